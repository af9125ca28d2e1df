"""Differentiable losses and a small two-phase trainer.

The trainable object is a set of free correspondence parameters: per-point
3D coordinates, per-point weight logits, and one global weight scale.
Phase 1 fits the coordinates to known surface points with an L1 loss.
Phase 2 switches to density-aware objectives: a cross-entropy loss against
a point target (reprojection cost at the target pose plus the sampled log
normalizer) and a rotation loss on the cost minimizer, whose gradient
reaches the parameters through implicit differentiation of the solver's
fixed point.

Gradient conventions.  The cross-entropy gradient treats the drawn samples
as constants; with the default single sampling round and a caller-fixed
proposal this stop-gradient estimate is the exact derivative of the
computed loss, which is what the finite-difference checks rely on.  The
mode sensitivity uses the Gauss-Newton Hessian, exact on noiseless data
and accurate to the residual scale otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distribution import (
    AmisConfig,
    amis_estimate,
    geodesic_angle,
    laplace_covariance,
)
from .errors import CheiralityViolation, EmptyMask, ImproperDensity, SingularInformation
from .geometry import CorrespondenceSet, EPS_Z, Pose
from .solver import solve, total_cost


@dataclass(frozen=True)
class CorrespondenceParams:
    """Free parameters standing in for a correspondence network's output."""

    raw_x3d: np.ndarray
    raw_w2d: np.ndarray
    global_scale: float = 1.0

    def __post_init__(self):
        x3d = np.array(self.raw_x3d, dtype=float)
        w2d = np.array(self.raw_w2d, dtype=float)
        if x3d.ndim != 2 or x3d.shape[1] != 3 or x3d.shape[0] < 1:
            raise ValueError("raw_x3d must have shape (n, 3) with n >= 1")
        if w2d.shape != (x3d.shape[0], 2):
            raise ValueError("raw_w2d must have shape (n, 2) matching raw_x3d")
        if not (np.all(np.isfinite(x3d)) and np.all(np.isfinite(w2d))):
            raise ValueError("parameters must be finite")
        if not (math.isfinite(self.global_scale) and self.global_scale > 0):
            raise ValueError("global_scale must be positive and finite")
        x3d.setflags(write=False)
        w2d.setflags(write=False)
        object.__setattr__(self, "raw_x3d", x3d)
        object.__setattr__(self, "raw_w2d", w2d)

    def __len__(self):
        return self.raw_x3d.shape[0]

    def weights(self):
        return normalize_weights(self.raw_w2d, self.global_scale)


@dataclass(frozen=True)
class PhaseConfig:
    """Loss weights and optimizer settings for one training phase.

    Weights left as None resolve to phase defaults: phase 1 trains the
    coordinate L1 (weight 1.0) with the auxiliary slot at 1.0; phase 2
    drops the L1 and runs cross-entropy 0.2, rotation 1.0, auxiliary
    0.005.  ``aux_weight`` scales an optional caller-supplied penalty.
    The cited batch-size schedule (48 then 72) has no analog at this
    scale; batching is a no-op here.
    """

    phase: int
    iterations: int
    coord_l1_weight: float = None
    kl_weight: float = None
    rot_weight: float = None
    aux_weight: float = None
    base_lr: float = 0.0008
    warmup_iters: int = 400
    weight_decay: float = 0.01
    cosine_tail_fraction: float = 0.25

    def __post_init__(self):
        if self.phase not in (1, 2):
            raise ValueError("phase must be 1 or 2")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        defaults = (
            {"coord_l1_weight": 1.0, "kl_weight": 0.0, "rot_weight": 0.0, "aux_weight": 1.0}
            if self.phase == 1
            else {"coord_l1_weight": 0.0, "kl_weight": 0.2, "rot_weight": 1.0, "aux_weight": 0.005}
        )
        for name, value in defaults.items():
            current = getattr(self, name)
            if current is None:
                current = value
            if current < 0:
                raise ValueError(f"{name} must be >= 0")
            object.__setattr__(self, name, float(current))
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.cosine_tail_fraction <= 1.0:
            raise ValueError("cosine_tail_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class TrainReport:
    """Loss trace plus mode-pose errors around the phase-2 boundary."""

    loss_trace: tuple
    phase_boundaries: tuple
    initial_rotation_error: float
    initial_translation_error: float
    final_rotation_error: float
    final_translation_error: float
    final_params: CorrespondenceParams

    def __post_init__(self):
        object.__setattr__(self, "loss_trace", tuple(float(v) for v in self.loss_trace))
        object.__setattr__(self, "phase_boundaries", tuple(int(v) for v in self.phase_boundaries))
        if len(self.phase_boundaries) != 2 or self.phase_boundaries[0] > self.phase_boundaries[1]:
            raise ValueError("phase_boundaries must be (end_of_phase1, total)")
        if len(self.loss_trace) != self.phase_boundaries[1]:
            raise ValueError("loss trace must hold one entry per iteration")


def normalize_weights(raw_w2d, alpha):
    """Per-channel softmax over points, scaled so the weights average alpha.

    Uniform logits map to all-alpha weights exactly; the output is strictly
    positive wherever the softmax does not underflow.
    """
    raw = np.asarray(raw_w2d, dtype=float)
    if raw.ndim != 2 or raw.shape[1] != 2:
        raise ValueError("raw_w2d must have shape (n, 2)")
    if not (math.isfinite(alpha) and alpha > 0):
        raise ValueError("alpha must be positive and finite")
    expv = np.exp(raw - raw.max(axis=0))
    # grouping n/sum first keeps the uniform case bitwise exact
    return alpha * expv * (raw.shape[0] / expv.sum(axis=0))


def _projection_pieces(k, cam):
    """Pixel resid-free projection pieces at camera points ``cam`` (n, 3).

    Returns the projected pixels (n, 2) and the projection Jacobian
    (n, 2, 3) with respect to the camera-frame point.
    """
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    uv = np.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy], axis=1)
    jac = np.zeros((cam.shape[0], 2, 3))
    jac[:, 0, 0] = k.fx / z
    jac[:, 0, 2] = -k.fx * x / z**2
    jac[:, 1, 1] = k.fy / z
    jac[:, 1, 2] = -k.fy * y / z**2
    return uv, jac


def _cost_param_gradients(cs, k, poses, pose_weights):
    """Weighted sums of per-pose cost gradients w.r.t. x3d and w2d.

    ``poses`` is a sequence of poses with nonnegative ``pose_weights``;
    both gradients are accumulated as sum_m weight_m * d cost(pose_m)/d().
    All poses must keep every point in front of the camera.
    """
    x3d, x2d, w2d = cs.x3d, cs.x2d, cs.w2d
    rot = np.stack([p.rotation_matrix() for p in poses])
    trans = np.stack([p.t for p in poses])
    cam = np.einsum("mab,nb->mna", rot, x3d) + trans[:, None, :]
    x, y, z = cam[..., 0], cam[..., 1], cam[..., 2]
    if np.any(z <= EPS_Z):
        raise CheiralityViolation("cannot differentiate through a point behind the camera")
    uv = np.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy], axis=-1)
    err = uv - x2d[None, :, :]
    proj = np.zeros(cam.shape[:2] + (2, 3))
    proj[..., 0, 0] = k.fx / z
    proj[..., 0, 2] = -k.fx * x / z**2
    proj[..., 1, 1] = k.fy / z
    proj[..., 1, 2] = -k.fy * y / z**2
    scaled = (w2d**2)[None, :, :] * err
    cam_grad = np.einsum("mnca,mnc->mna", proj, scaled)
    weights = np.asarray(pose_weights, dtype=float)
    grad_x3d = np.einsum("m,mba,mnb->na", weights, rot, cam_grad)
    grad_w2d = np.einsum("m,mnc->nc", weights, w2d[None, :, :] * err**2)
    return grad_x3d, grad_w2d


def _chain_to_raw(params, grad_w2d):
    """Route d loss/d weights through the softmax scaling to the logits."""
    n = len(params)
    soft = params.weights() / (params.global_scale * n)
    scale = params.global_scale * n
    inner = np.sum(grad_w2d * soft, axis=0)
    grad_raw = scale * soft * (grad_w2d - inner[None, :])
    grad_alpha = float(np.sum(grad_w2d * params.weights()) / params.global_scale)
    return grad_raw, grad_alpha


def _default_proposal(gt_pose):
    sigma_t = 0.05 * max(abs(gt_pose.t[2]), 0.1)
    return np.diag([0.15**2] * 3 + [sigma_t**2] * 3)


def kl_loss(params, gt_pose, x2d, k, config=None, rng_seed=0, proposal_covariance=None):
    """Cross-entropy to a point target, with parameter gradients.

    Returns ``(loss, grad_x3d, grad_w2d_raw, grad_alpha)`` where
    loss = cost(gt_pose) + log_z and log_z comes from the adaptive sampler
    anchored at the target pose with a fixed seed.  The gradient holds the
    drawn samples fixed: d loss/d params = d cost(gt)/d params minus the
    self-normalized sample average of d cost(sample)/d params.  With the
    default non-adaptive config and a parameter-independent proposal this
    is the exact derivative of the returned value; adaptive configs add
    sampler sensitivity the formula deliberately ignores.
    """
    x2d = np.asarray(x2d, dtype=float)
    w2d = params.weights()
    cs = CorrespondenceSet(params.raw_x3d, x2d, w2d)
    if np.count_nonzero(np.linalg.norm(w2d, axis=1) > 0) < 4:
        raise ImproperDensity(
            "fewer than 4 effective correspondences; the translation marginal diverges"
        )
    cost_gt = total_cost(cs, gt_pose, k)
    if not math.isfinite(cost_gt):
        raise CheiralityViolation("target pose puts a correspondence behind the camera")
    if config is None:
        config = AmisConfig(rounds=1, samples_per_round=512)
    if proposal_covariance is None:
        proposal_covariance = _default_proposal(gt_pose)
    samples, log_z, _ = amis_estimate(
        cs, k, gt_pose, proposal_covariance, config, rng_seed
    )
    loss = cost_gt + log_z
    gx_target, gw_target = _cost_param_gradients(cs, k, [gt_pose], [1.0])
    sample_w = [math.exp(s.log_weight) for s in samples]
    gx_samples, gw_samples = _cost_param_gradients(
        cs, k, [s.pose for s in samples], sample_w
    )
    grad_raw, grad_alpha = _chain_to_raw(params, gw_target - gw_samples)
    return loss, gx_target - gx_samples, grad_raw, grad_alpha


def rot_loss(m1, m2):
    """Half of one minus the cosine of the relative rotation angle."""
    trace = float(np.trace(np.asarray(m1) @ np.asarray(m2).T))
    return min(1.0, max(0.0, 0.5 * (1.0 - (trace - 1.0) / 2.0)))


def rot_loss_gradient(m1, m2):
    """d rot_loss/d omega for the left increment exp([omega]x) @ m1."""
    a = np.asarray(m1) @ np.asarray(m2).T
    axial = np.array([a[1, 2] - a[2, 1], a[2, 0] - a[0, 2], a[0, 1] - a[1, 0]])
    return -0.25 * axial


def coord_l1_loss(pred_x3d, gt_x3d, mask=None):
    """Mean absolute coordinate error over the masked points."""
    pred = np.asarray(pred_x3d, dtype=float)
    gt = np.asarray(gt_x3d, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError("pred_x3d and gt_x3d must share shape (n, 3)")
    mask = _resolve_mask(mask, pred.shape[0])
    return float(np.mean(np.abs(pred[mask] - gt[mask]), axis=1).mean())


def coord_l1_gradient(pred_x3d, gt_x3d, mask=None):
    """Subgradient of coord_l1_loss w.r.t. the predicted coordinates."""
    pred = np.asarray(pred_x3d, dtype=float)
    gt = np.asarray(gt_x3d, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError("pred_x3d and gt_x3d must share shape (n, 3)")
    mask = _resolve_mask(mask, pred.shape[0])
    grad = np.zeros_like(pred)
    grad[mask] = np.sign(pred[mask] - gt[mask]) / (3.0 * np.count_nonzero(mask))
    return grad


def _resolve_mask(mask, n):
    if mask is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(n)
    if not mask.any():
        raise EmptyMask("no masked points to average over")
    return mask


def mode_gradient(params, x2d, k, mode):
    """Sensitivity of the cost minimizer to every free parameter.

    Implicit differentiation of the stationarity condition with the
    Gauss-Newton Hessian: columns are d(mode tangent)/d(parameter),
    laid out as [x3d row-major (3n), w2d logits row-major (2n), alpha].
    ``mode`` must already be a converged minimizer for the parameters.
    """
    x2d = np.asarray(x2d, dtype=float)
    w2d = params.weights()
    cs = CorrespondenceSet(params.raw_x3d, x2d, w2d)
    covariance = laplace_covariance(cs, k, mode)
    n = len(params)

    rot = mode.rotation_matrix()
    rotated = cs.x3d @ rot.T
    cam = rotated + mode.t
    if np.any(cam[:, 2] <= EPS_Z):
        raise CheiralityViolation("cannot differentiate through a point behind the camera")
    uv, proj = _projection_pieces(k, cam)
    err = uv - x2d
    rho = w2d * err

    # unweighted tangent jacobian rows: [-P [Rx]_x | P]
    basis = np.zeros((n, 2, 6))
    hats = np.zeros((n, 3, 3))
    hats[:, 0, 1] = -rotated[:, 2]
    hats[:, 0, 2] = rotated[:, 1]
    hats[:, 1, 0] = rotated[:, 2]
    hats[:, 1, 2] = -rotated[:, 0]
    hats[:, 2, 0] = -rotated[:, 1]
    hats[:, 2, 1] = rotated[:, 0]
    basis[:, :, :3] = -np.einsum("nca,nab->ncb", proj, hats)
    basis[:, :, 3:] = proj

    stationarity_jac = np.zeros((6, 5 * n + 1))
    grad_w_cols = np.zeros((n, 2, 6))
    for j in range(n):
        w = w2d[j]
        p = proj[j]
        b = basis[j]
        weighted_b = w[:, None] * b
        x_j, y_j, z_j = cam[j]
        # d(stationarity)/d cam, one camera axis at a time
        d_cam = np.zeros((6, 3))
        for axis in range(3):
            dp = np.zeros((2, 3))
            if axis == 0:
                dp[0, 2] = -k.fx / z_j**2
            elif axis == 1:
                dp[1, 2] = -k.fy / z_j**2
            else:
                dp[0, 0] = -k.fx / z_j**2
                dp[0, 2] = 2.0 * k.fx * x_j / z_j**3
                dp[1, 1] = -k.fy / z_j**2
                dp[1, 2] = 2.0 * k.fy * y_j / z_j**3
            dg = np.zeros((3, 6))
            unit_hat = np.zeros((3, 3))
            if axis == 0:
                unit_hat[1, 2], unit_hat[2, 1] = -1.0, 1.0
            elif axis == 1:
                unit_hat[0, 2], unit_hat[2, 0] = 1.0, -1.0
            else:
                unit_hat[0, 1], unit_hat[1, 0] = -1.0, 1.0
            dg[:, :3] = -unit_hat
            db = dp @ np.concatenate([-hats[j], np.eye(3)], axis=1) + p @ dg
            d_cam[:, axis] = weighted_b.T @ (w * p[:, axis]) + (w[:, None] * db).T @ rho[j]
        stationarity_jac[:, 3 * j : 3 * j + 3] = d_cam @ rot
        grad_w_cols[j] = (2.0 * w * err[j])[:, None] * b

    soft = w2d / (params.global_scale * n)
    scale = params.global_scale * n
    for channel in range(2):
        cols = grad_w_cols[:, channel, :]  # (n, 6)
        inner = soft[:, channel] @ cols
        for j in range(n):
            stationarity_jac[:, 3 * n + 2 * j + channel] = scale * soft[j, channel] * (
                cols[j] - inner
            )
    stationarity_jac[:, 5 * n] = (
        np.einsum("nc,nca->a", w2d, grad_w_cols) / params.global_scale
    )
    return -covariance @ stationarity_jac


def lr_schedule(iteration, cfg):
    """Learning rate at ``iteration``: warmup, plateau, then cosine tail."""
    if not 0 <= iteration < cfg.iterations:
        raise ValueError("iteration must lie in [0, cfg.iterations)")
    factor = 1.0
    if cfg.warmup_iters > 0 and iteration < cfg.warmup_iters:
        factor = iteration / cfg.warmup_iters
    tail = math.ceil(cfg.cosine_tail_fraction * cfg.iterations)
    start = cfg.iterations - tail
    if tail > 0 and iteration >= start:
        factor *= 0.5 * (1.0 + math.cos(math.pi * (iteration - start) / tail))
    return cfg.base_lr * factor


def _mode_errors(params, x2d, k, gt_pose):
    estimate = solve(CorrespondenceSet(params.raw_x3d, x2d, params.weights()), k, keep_fraction=1.0)
    rot_err = geodesic_angle(estimate.pose.rotation_matrix(), gt_pose.rotation_matrix())
    return estimate.pose, rot_err, float(np.linalg.norm(estimate.pose.t - gt_pose.t))


def train_toy(
    instance,
    phase1,
    phase2,
    rng_seed=0,
    amis_config=None,
    proposal_covariance=None,
    aux_penalty=None,
):
    """Two-phase gradient descent over free correspondence parameters.

    ``instance`` supplies ground truth (pose and surface coordinates) and
    the 2D observations.  Parameters start at the instance's published
    coordinates with uniform weight logits.  Phase 2 draws a fresh seeded
    sampler stream each iteration; the proposal covariance is frozen once
    up front so the cross-entropy gradients stay exact (see kl_loss).
    ``aux_penalty``, if given, is called with the current parameters and
    must return (value, grad_x3d, grad_w2d_raw, grad_alpha); its weight
    comes from the phase config.  Independent instances train
    independently; parallelism belongs to the caller.
    """
    if phase1.phase != 1 or phase2.phase != 2:
        raise ValueError("pass a phase-1 config then a phase-2 config")
    x2d = instance.correspondences.x2d
    k = instance.k
    gt_pose = instance.gt_pose
    gt_x3d = instance.gt_x3d
    params = CorrespondenceParams(
        instance.correspondences.x3d, np.zeros((len(instance.correspondences), 2)), 1.0
    )
    if amis_config is None:
        amis_config = AmisConfig(rounds=1, samples_per_round=256)
    if proposal_covariance is None:
        try:
            initial_cs = CorrespondenceSet(params.raw_x3d, x2d, params.weights())
            proposal_covariance = 2.25 * laplace_covariance(initial_cs, k, gt_pose)
        except SingularInformation:
            proposal_covariance = _default_proposal(gt_pose)
    kl_seeds = np.random.SeedSequence(rng_seed).generate_state(max(1, phase2.iterations))

    trace = []

    def run_phase(cfg, seeds):
        nonlocal params
        for it in range(cfg.iterations):
            lr = lr_schedule(it, cfg)
            loss = 0.0
            grad_x = np.zeros_like(params.raw_x3d)
            grad_l = np.zeros_like(params.raw_w2d)
            grad_a = 0.0
            if cfg.coord_l1_weight > 0:
                loss += cfg.coord_l1_weight * coord_l1_loss(params.raw_x3d, gt_x3d)
                grad_x += cfg.coord_l1_weight * coord_l1_gradient(params.raw_x3d, gt_x3d)
            if cfg.kl_weight > 0:
                value, gx, gl, ga = kl_loss(
                    params,
                    gt_pose,
                    x2d,
                    k,
                    amis_config,
                    int(seeds[it]),
                    proposal_covariance,
                )
                loss += cfg.kl_weight * value
                grad_x += cfg.kl_weight * gx
                grad_l += cfg.kl_weight * gl
                grad_a += cfg.kl_weight * ga
            if cfg.rot_weight > 0:
                mode, _, _ = _mode_errors(params, x2d, k, gt_pose)
                value = rot_loss(mode.rotation_matrix(), gt_pose.rotation_matrix())
                tangent = np.concatenate(
                    [rot_loss_gradient(mode.rotation_matrix(), gt_pose.rotation_matrix()), np.zeros(3)]
                )
                chained = mode_gradient(params, x2d, k, mode).T @ tangent
                n = len(params)
                loss += cfg.rot_weight * value
                grad_x += cfg.rot_weight * chained[: 3 * n].reshape(n, 3)
                grad_l += cfg.rot_weight * chained[3 * n : 5 * n].reshape(n, 2)
                grad_a += cfg.rot_weight * chained[5 * n]
            if aux_penalty is not None and cfg.aux_weight > 0:
                value, gx, gl, ga = aux_penalty(params)
                loss += cfg.aux_weight * value
                grad_x += cfg.aux_weight * gx
                grad_l += cfg.aux_weight * gl
                grad_a += cfg.aux_weight * ga
            trace.append(loss)
            decay = 1.0 - lr * cfg.weight_decay
            # alpha steps in log space: positivity for free, decay pulls toward 1
            log_alpha = decay * math.log(params.global_scale) - lr * params.global_scale * grad_a
            params = CorrespondenceParams(
                decay * params.raw_x3d - lr * grad_x,
                decay * params.raw_w2d - lr * grad_l,
                math.exp(log_alpha),
            )

    run_phase(phase1, None)
    _, initial_rot, initial_trans = _mode_errors(params, x2d, k, gt_pose)
    run_phase(phase2, kl_seeds)
    if phase2.iterations > 0:
        _, final_rot, final_trans = _mode_errors(params, x2d, k, gt_pose)
    else:
        final_rot, final_trans = initial_rot, initial_trans
    return TrainReport(
        loss_trace=tuple(trace),
        phase_boundaries=(phase1.iterations, phase1.iterations + phase2.iterations),
        initial_rotation_error=initial_rot,
        initial_translation_error=initial_trans,
        final_rotation_error=final_rot,
        final_translation_error=final_trans,
        final_params=params,
    )
