"""Deterministic pose solving: weight filter, EPnP seed, LM refinement.

The full pipeline in :func:`solve` mirrors how a pose is recovered from a
predicted correspondence field: drop the least-confident matches, compute a
closed-form initialization that ignores the weights, then minimize the
weighted reprojection cost with Levenberg-Marquardt on the 6-dim tangent
chart of :mod:`probpnp.geometry`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, NonFiniteCost, TooFewPoints
from .geometry import (
    CorrespondenceSet,
    EPS_Z,
    Pose,
    residual_jacobian,
    residuals,
    se3_retract,
    total_cost,
)

# ratio of spread along an axis to the dominant spread below which the cloud
# counts as flat (planar fallback) or as a line (hard failure)
_FLATNESS_RATIO = 1e-6


@dataclass(frozen=True)
class LmConfig:
    """Levenberg-Marquardt knobs.

    ``damping`` multiplies ``diag(J^T J)`` (Marquardt scaling); it shrinks by
    ``damping_down`` after an accepted step and grows by ``damping_up`` after
    a rejected one.
    """

    max_iterations: int = 50
    damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    step_tolerance: float = 1e-10
    cost_rel_tolerance: float = 1e-12

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.damping <= 0 or self.damping_up <= 1 or self.damping_down <= 1:
            raise ValueError("damping must be positive with up/down factors > 1")


@dataclass(frozen=True)
class PoseEstimate:
    """Solver output: refined pose plus bookkeeping."""

    pose: Pose
    final_cost: float
    iterations: int
    converged: bool


def filter_correspondences(cs, keep_fraction=0.5):
    """Keep the ``ceil(keep_fraction * n)`` matches with the largest weight norm.

    Ties are broken toward the lower original index, and the survivors stay
    in their original order.

    Raises
    ------
    TooFewPoints
        If fewer than 4 matches survive.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in (0, 1]")
    n = len(cs)
    keep = math.ceil(keep_fraction * n)
    norms = cs.weight_norms()
    # stable sort on negated norms keeps the lower index first among ties
    order = np.argsort(-norms, kind="stable")[:keep]
    if keep < 4:
        raise TooFewPoints(f"filter keeps {keep} of {n} matches; at least 4 needed")
    return cs.subset(np.sort(order))


# ---------------------------------------------------------------------------
# EPnP initialization
# ---------------------------------------------------------------------------

def _control_points(x3d):
    """Centroid + principal-axis control points; detects flat/linear clouds."""
    c0 = x3d.mean(axis=0)
    centered = x3d - c0
    cov = centered.T @ centered / x3d.shape[0]
    lam, vec = np.linalg.eigh(cov)  # ascending
    lam = np.maximum(lam[::-1], 0.0)
    vec = vec[:, ::-1]
    spread = np.sqrt(lam)
    if spread[0] <= 0.0:
        raise DegenerateConfiguration("all model points coincide")
    if spread[1] / spread[0] < _FLATNESS_RATIO:
        raise DegenerateConfiguration("model points are collinear")
    planar = spread[2] / spread[0] < _FLATNESS_RATIO
    if planar:
        ctrl = np.stack([c0, c0 + spread[0] * vec[:, 0], c0 + spread[1] * vec[:, 1]])
    else:
        ctrl = np.stack(
            [
                c0,
                c0 + spread[0] * vec[:, 0],
                c0 + spread[1] * vec[:, 1],
                c0 + spread[2] * vec[:, 2],
            ]
        )
    return ctrl, planar


def _barycentric(x3d, ctrl):
    """Coefficients alpha with x = alpha @ ctrl and rows summing to one."""
    m = ctrl.shape[0]
    if m == 4:
        a = np.vstack([ctrl.T, np.ones(m)])  # 4x4
        rhs = np.vstack([x3d.T, np.ones(x3d.shape[0])])
        return np.linalg.solve(a, rhs).T
    basis = (ctrl[1:] - ctrl[0]).T  # 3x2
    coef, *_ = np.linalg.lstsq(basis, (x3d - ctrl[0]).T, rcond=None)
    ab = coef.T  # (n, 2)
    return np.column_stack([1.0 - ab.sum(axis=1), ab])


def _nullspace_basis(alphas, x2d, k, n_ctrl, n_vec):
    """Smallest right-singular vectors of the projective constraint matrix."""
    n = alphas.shape[0]
    m = np.zeros((2 * n, 3 * n_ctrl))
    u = x2d[:, 0]
    v = x2d[:, 1]
    for j in range(n_ctrl):
        a = alphas[:, j]
        m[0::2, 3 * j + 0] = a * k.fx
        m[0::2, 3 * j + 2] = a * (k.cx - u)
        m[1::2, 3 * j + 1] = a * k.fy
        m[1::2, 3 * j + 2] = a * (k.cy - v)
    _, _, vt = np.linalg.svd(m, full_matrices=True)
    return vt[-n_vec:][::-1]  # rows: smallest singular value first


def _ctrl_pair_data(basis, ctrl):
    """Per kernel vector: pairwise control-point differences, plus targets."""
    n_ctrl = ctrl.shape[0]
    pairs = [(a, b) for a in range(n_ctrl) for b in range(a + 1, n_ctrl)]
    diffs = []  # (n_vec, n_pairs, 3)
    for vec in basis:
        pts = vec.reshape(n_ctrl, 3)
        diffs.append(np.stack([pts[a] - pts[b] for a, b in pairs]))
    target = np.array([np.linalg.norm(ctrl[a] - ctrl[b]) for a, b in pairs])
    return np.stack(diffs), target


def _betas_case1(diffs, target):
    v = diffs[0]
    denom = float(np.sum(v * v))
    if denom <= 0:
        return None
    dv = np.linalg.norm(v, axis=1)
    beta = float(np.sum(dv * target) / np.sum(dv * dv))
    out = np.zeros(diffs.shape[0])
    out[0] = beta
    return out

def _betas_case2(diffs, target):
    if diffs.shape[0] < 2:
        return None
    va, vb = diffs[0], diffs[1]
    rows = np.column_stack(
        [
            np.sum(va * va, axis=1),
            2.0 * np.sum(va * vb, axis=1),
            np.sum(vb * vb, axis=1),
        ]
    )
    sol, *_ = np.linalg.lstsq(rows, target**2, rcond=None)
    b11, b12, b22 = sol
    beta1 = math.sqrt(abs(b11))
    beta2 = b12 / beta1 if beta1 > 1e-12 else math.sqrt(abs(b22))
    out = np.zeros(diffs.shape[0])
    out[0] = beta1
    out[1] = beta2
    return out


def _betas_case3(diffs, target):
    if diffs.shape[0] < 3:
        return None
    va, vb, vc = diffs[0], diffs[1], diffs[2]
    rows = np.column_stack(
        [
            np.sum(va * va, axis=1),
            2.0 * np.sum(va * vb, axis=1),
            2.0 * np.sum(va * vc, axis=1),
            np.sum(vb * vb, axis=1),
            2.0 * np.sum(vb * vc, axis=1),
            np.sum(vc * vc, axis=1),
        ]
    )
    sol, *_ = np.linalg.lstsq(rows, target**2, rcond=None)
    b11, b12, b13 = sol[0], sol[1], sol[2]
    beta1 = math.sqrt(abs(b11))
    if beta1 <= 1e-12:
        return None
    out = np.zeros(diffs.shape[0])
    out[0] = beta1
    out[1] = b12 / beta1
    out[2] = b13 / beta1
    return out


def _refine_betas(betas, diffs, target, iterations=8):
    """Gauss-Newton on the control-point distance constraints."""
    betas = betas.copy()
    n_pairs = target.shape[0]
    for _ in range(iterations):
        combo = np.einsum("v,vpk->pk", betas, diffs)  # (n_pairs, 3)
        res = np.sum(combo * combo, axis=1) - target**2
        jac = 2.0 * np.einsum("pk,vpk->pv", combo, diffs)  # (n_pairs, n_vec)
        try:
            step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        except np.linalg.LinAlgError:
            break
        betas = betas + step
        if np.linalg.norm(step) < 1e-14:
            break
    del n_pairs
    return betas


def _pose_from_betas(betas, basis, alphas, x3d):
    """Reconstruct camera-frame points and fit a rigid transform to them."""
    n_ctrl = alphas.shape[1]
    ctrl_cam = np.einsum("v,vk->k", betas, basis).reshape(n_ctrl, 3)
    cam = alphas @ ctrl_cam
    if cam[:, 2].mean() < 0:
        cam = -cam
    cw = x3d.mean(axis=0)
    cc = cam.mean(axis=0)
    h = (cam - cc).T @ (x3d - cw)
    u, _, vt = np.linalg.svd(h)
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag(d) @ vt
    t = cc - rot @ cw
    return Pose.from_matrix(rot, t)


def _reprojection_rms(pose, k, x3d, x2d):
    cam = pose.apply(x3d)
    if np.any(cam[:, 2] <= EPS_Z):
        return math.inf
    u = k.fx * cam[:, 0] / cam[:, 2] + k.cx
    v = k.fy * cam[:, 1] / cam[:, 2] + k.cy
    return float(np.sqrt(np.mean((u - x2d[:, 0]) ** 2 + (v - x2d[:, 1]) ** 2)))


def epnp_init(cs, k):
    """Closed-form pose seed from the correspondences, ignoring weights.

    Standard EPnP: express the model points barycentrically in 4 control
    points (3 when the cloud is flat), recover the camera-frame control
    points from the nullspace of the projective constraints, and pick among
    the candidate nullspace combinations the one with the smallest
    unweighted reprojection error.

    Raises
    ------
    TooFewPoints
        Fewer than 4 correspondences.
    DegenerateConfiguration
        Collinear or coincident model points, or no usable candidate.
    """
    n = len(cs)
    if n < 4:
        raise TooFewPoints(f"EPnP needs at least 4 points, got {n}")
    x3d = cs.x3d
    x2d = cs.x2d
    ctrl, planar = _control_points(x3d)
    alphas = _barycentric(x3d, ctrl)
    n_vec = 2 if planar else 4
    basis = _nullspace_basis(alphas, x2d, k, ctrl.shape[0], n_vec)
    diffs, target = _ctrl_pair_data(basis, ctrl)

    cases = [_betas_case1(diffs, target), _betas_case2(diffs, target)]
    if not planar:
        cases.append(_betas_case3(diffs, target))

    best = None
    best_err = math.inf
    for betas in cases:
        if betas is None:
            continue
        betas = _refine_betas(betas, diffs, target)
        pose = _pose_from_betas(betas, basis, alphas, x3d)
        err = _reprojection_rms(pose, k, x3d, x2d)
        if err < best_err:
            best, best_err = pose, err
    if best is None or not math.isfinite(best_err):
        raise DegenerateConfiguration("EPnP found no pose with all points in front")
    return best


# ---------------------------------------------------------------------------
# Levenberg-Marquardt refinement
# ---------------------------------------------------------------------------

def lm_refine(cs, k, init, config=None):
    """Minimize the weighted reprojection cost from ``init``.

    Damped normal equations ``(J^T J + damping * diag(J^T J)) step = -J^T r``
    with multiplicative damping control; candidate poses that move points
    behind the camera get infinite cost and are rejected like any other
    non-improving step.  The returned cost never exceeds the initial cost.

    Raises
    ------
    NonFiniteCost
        If the initial cost is not finite, or a NaN appears in the residuals.
    """
    cfg = config or LmConfig()
    cost = total_cost(cs, init, k)
    if not math.isfinite(cost):
        raise NonFiniteCost("initial pose has non-finite cost")
    pose = init
    if cost == 0.0:
        return PoseEstimate(pose, 0.0, 0, True)

    lam = cfg.damping
    iterations = 0
    converged = False
    for _ in range(cfg.max_iterations):
        iterations += 1
        r = residuals(cs, pose, k).reshape(-1)
        if not np.all(np.isfinite(r)):
            raise NonFiniteCost("non-finite residuals during refinement")
        jac = residual_jacobian(cs, pose, k).reshape(-1, 6)
        grad = jac.T @ r
        jtj = jac.T @ jac
        diag = np.maximum(np.diag(jtj), 1e-12)

        accepted = False
        step = None
        while lam < 1e15:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                lam *= cfg.damping_up
                continue
            if not np.all(np.isfinite(step)):
                lam *= cfg.damping_up
                continue
            candidate = se3_retract(pose, step)
            cand_cost = total_cost(cs, candidate, k)
            if cand_cost < cost:
                accepted = True
                break
            lam *= cfg.damping_up
        if not accepted:
            # damping exhausted: no representable descent step remains
            converged = True
            break
        prev = cost
        pose, cost = candidate, cand_cost
        lam = max(lam / cfg.damping_down, 1e-15)
        if np.linalg.norm(step) < cfg.step_tolerance:
            converged = True
            break
        if prev - cost <= cfg.cost_rel_tolerance * max(prev, 1e-300):
            converged = True
            break
        if cost == 0.0:
            converged = True
            break
    return PoseEstimate(pose, cost, iterations, converged)


def solve(cs, k, keep_fraction=0.5, lm_config=None):
    """filter -> EPnP seed -> LM refinement over the *full* weighted set."""
    kept = filter_correspondences(cs, keep_fraction)
    seed = epnp_init(kept, k)
    return lm_refine(cs, k, seed, lm_config)
