"""Pose densities beyond the point estimate.

The unnormalized density over poses is ``exp(-total_cost)``.  This module
summarizes it three ways: a curvature (Laplace) covariance at the mode, a
self-normalized importance-weighted sample from an adaptive Student-t
mixture, and an estimate of the log normalizing constant.

The sampler works in the 6-dim tangent space at the mode (rotation
increment first, translation second) and evaluates poses through the
retraction, so one chart covers every rotation less than pi away from the
mode.  Tangent draws at or beyond pi are assigned zero density: they alias
poses the chart already covers.

The adaptive scheme is multi-round: round one proposes from Student-t
components placed at the known mode candidates, each later round refits a
new component to the moments of the current weighted sample, and every
sample is finally re-weighted against the mixture of all components with
deterministic (sample-count proportional) mixture weights.  That final
re-weighting is what keeps the estimator consistent even when early rounds
proposed badly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, logsumexp

from .errors import (
    DegenerateConfiguration,
    NonFiniteCost,
    SingularInformation,
    TooFewPoints,
)
from .geometry import (
    Pose,
    geodesic_angle,
    residual_jacobian,
    residuals,
    se3_local,
    se3_retract,
    total_cost,
)
from .solver import epnp_init, lm_refine, solve

_NULL_SPACE_RATIO = 1e-12
_COVARIANCE_FLOOR = 1e-9
_EXPLORATION_BASE_SIGMA = 0.45
_PROBE_SEPARATION = 0.2  # rad; closer candidates count as the same mode


@dataclass(frozen=True)
class PoseSample:
    """One weighted posterior draw; ``log_weight`` is normalized so the
    weights of a sample set sum to one."""

    pose: Pose
    log_weight: float

    def __post_init__(self):
        if not math.isfinite(self.log_weight):
            raise ValueError("log_weight must be finite")


@dataclass(frozen=True)
class PoseDistribution:
    """Sampled pose density: mode, tangent covariance at the mode, weighted
    samples (zero-mass draws are dropped), log normalizer, and effective
    sample size."""

    mode: Pose
    covariance: np.ndarray
    samples: tuple
    log_z: float
    ess: float

    def __post_init__(self):
        cov = np.array(self.covariance, dtype=float)
        if cov.shape != (6, 6):
            raise ValueError("covariance must be 6x6")
        if np.abs(cov - cov.T).max() > 1e-9:
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-9:
            raise ValueError("covariance must be positive semidefinite")
        if not math.isfinite(self.log_z):
            raise ValueError("log_z must be finite")
        if not 0 < self.ess <= max(len(self.samples), 1):
            raise ValueError("ess must lie in (0, sample count]")
        total = logsumexp([s.log_weight for s in self.samples])
        if abs(total) > 1e-9:
            raise ValueError("sample weights must sum to one")
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "samples", tuple(self.samples))


@dataclass(frozen=True)
class AmisConfig:
    rounds: int = 4
    samples_per_round: int = 128
    proposal_dof: float = 3.0
    symmetry_exploration_scale: float = 5.0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.samples_per_round < 8:
            raise ValueError("samples_per_round must be >= 8")
        if self.proposal_dof <= 0:
            raise ValueError("proposal_dof must be positive")
        if self.symmetry_exploration_scale <= 0:
            raise ValueError("symmetry_exploration_scale must be positive")


def log_unnormalized_density(cs, k, pose):
    """log of exp(-cost): just the negated cost, -inf behind the camera."""
    return -total_cost(cs, pose, k)


# ---------------------------------------------------------------------------
# curvature at the mode
# ---------------------------------------------------------------------------

def information_matrix(cs, k, pose):
    """Gauss-Newton information J^T J over all weighted residuals."""
    j = residual_jacobian(cs, pose, k).reshape(-1, 6)
    return j.T @ j


def laplace_covariance(cs, k, mode):
    """Inverse curvature at the mode, (J^T J + floor*I)^-1.

    Raises
    ------
    SingularInformation
        When the information matrix has a (relative) null direction, i.e.
        an eigenvalue below 1e-12 times the largest one: the data does not
        constrain that pose direction at all, as happens under a continuous
        symmetry.  The exception carries the direction so callers can widen
        their proposals instead of failing.
    """
    info = information_matrix(cs, k, mode)
    eigenvalues, eigenvectors = np.linalg.eigh(info)
    lead = max(float(eigenvalues[-1]), 1.0)
    if eigenvalues[0] < _NULL_SPACE_RATIO * lead:
        raise SingularInformation(
            "pose direction unconstrained by the correspondences",
            direction=eigenvectors[:, 0].copy(),
            eigenvalue=float(eigenvalues[0]),
        )
    cov = (eigenvectors / (eigenvalues + _COVARIANCE_FLOOR)) @ eigenvectors.T
    return 0.5 * (cov + cov.T)


def exploration_covariance(cs, k, mode, scale):
    """Wide fallback covariance for unconstrained directions.

    (J^T J + I/sigma^2)^-1 with sigma = scale * 0.45: constrained
    directions keep their curvature scale, null directions open up to
    sigma, wide enough for the proposal to reach any rotation in the
    chart.
    """
    sigma = scale * _EXPLORATION_BASE_SIGMA
    info = information_matrix(cs, k, mode)
    eigenvalues, eigenvectors = np.linalg.eigh(info)
    cov = (eigenvectors / (eigenvalues + 1.0 / sigma**2)) @ eigenvectors.T
    return 0.5 * (cov + cov.T)


def _so3_left_jacobian_inverse(omega):
    """Inverse left Jacobian of SO(3) at rotation vector ``omega``."""
    theta = np.linalg.norm(omega)
    if theta < 1e-9:
        return np.eye(3)
    axis = omega / theta
    hat = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    half = theta / 2.0
    return np.eye(3) - half * hat + (1.0 - half / math.tan(half)) * (hat @ hat)


def _chart_log_volume(rotvec):
    """Log volume of rotation-group measure per unit chart volume.

    The rotation block of the chart is the exponential map, whose group
    (bi-invariant) volume element relative to coordinate volume is
    (2 - 2 cos theta) / theta^2.  Weighting sampled densities by this
    factor makes masses chart-placement independent: two exactly
    symmetric pose clusters carry equal mass even though one sits at the
    chart origin and the other near the boundary.
    """
    theta_sq = float(np.dot(rotvec, rotvec))
    if theta_sq < 1e-8:
        return -theta_sq / 12.0
    theta = math.sqrt(theta_sq)
    return math.log((2.0 - 2.0 * math.cos(theta)) / theta_sq)


def _warp_to_chart(covariance, rotvec):
    """Map a left-frame covariance at ``rotvec`` into chart coordinates.

    A left perturbation eps at the pose ``exp(rotvec) * mode`` moves the
    chart coordinate by J_l(rotvec)^-1 eps in the rotation block and
    one-to-one in translation, so a covariance stated in the pose's own
    frame must be pushed through that map before it can serve as a
    proposal spread at a chart center away from the origin.
    """
    transform = np.eye(6)
    transform[:3, :3] = _so3_left_jacobian_inverse(rotvec)
    warped = transform @ np.asarray(covariance, dtype=float) @ transform.T
    return 0.5 * (warped + warped.T)


_RING_COMPONENTS = 24


def ring_proposal(cs, k, mode, spin_axis, count=_RING_COMPONENTS):
    """Proposal components tracing an unconstrained rotation circle.

    For a density that is constant along rotations about ``spin_axis``
    (left frame at the mode), the zero-cost set is the straight chart line
    delta_omega = phi * axis, and the local curvature in the left frame at
    each circle point is the same matrix.  Each returned component sits at
    one spin angle with that shared conditional covariance mapped into
    chart coordinates through the inverse left Jacobian, so the mixture
    hugs the curved probability tube instead of smearing over it.
    """
    axis = np.asarray(spin_axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    spacing = 2.0 * math.pi / count
    info = information_matrix(cs, k, mode)
    eigenvalues, eigenvectors = np.linalg.eigh(info)
    group_cov = (eigenvectors / (eigenvalues + 1.0 / spacing**2)) @ eigenvectors.T
    components = []
    for i in range(count):
        phi = (i + 0.5) * spacing - math.pi
        center = np.concatenate([phi * axis, np.zeros(3)])
        components.append((center, _warp_to_chart(group_cov, phi * axis)))
    return components


# ---------------------------------------------------------------------------
# adaptive multi-round importance sampling, generic in dimension
# ---------------------------------------------------------------------------

class _StudentT:
    """Multivariate Student-t proposal component."""

    def __init__(self, mean, covariance, dof):
        self.mean = np.asarray(mean, dtype=float)
        self.dof = float(dof)
        d = self.mean.size
        # the matrix is the Student-t scale, not the covariance: the
        # resulting spread is dof/(dof-2) wider, deliberate overdispersion
        # that keeps importance weights bounded on near-Gaussian targets
        scale = np.asarray(covariance, dtype=float)
        jitter = 1e-12 * max(np.trace(scale) / d, 1e-30)
        for _ in range(60):
            try:
                self.chol = np.linalg.cholesky(scale + jitter * np.eye(d))
                break
            except np.linalg.LinAlgError:
                jitter *= 10.0
        else:
            raise NonFiniteCost("proposal covariance cannot be factorized")
        self.log_norm = (
            gammaln((self.dof + d) / 2.0)
            - gammaln(self.dof / 2.0)
            - 0.5 * d * math.log(self.dof * math.pi)
            - np.sum(np.log(np.diag(self.chol)))
        )

    def draw(self, n, rng):
        d = self.mean.size
        z = rng.standard_normal((n, d))
        u = rng.chisquare(self.dof, n)
        return self.mean + (z @ self.chol.T) * np.sqrt(self.dof / u)[:, None]

    def log_pdf(self, x):
        d = self.mean.size
        diff = np.atleast_2d(x) - self.mean
        white = solve_triangular(self.chol, diff.T, lower=True)
        m2 = np.sum(white**2, axis=0)
        return self.log_norm - 0.5 * (self.dof + d) * np.log1p(m2 / self.dof)


def _mixture_log_pdf(components, counts, x):
    total = sum(counts)
    parts = [
        math.log(c / total) + comp.log_pdf(x)
        for comp, c in zip(components, counts)
    ]
    return logsumexp(np.stack(parts, axis=0), axis=0)


def _split_evenly(total, bins):
    base, extra = divmod(total, bins)
    return [base + (1 if i < extra else 0) for i in range(bins)]


def adaptive_mixture_sample(log_density, proposal, config, rng):
    """Run the adaptive scheme on an arbitrary-dimension log density.

    ``proposal`` is a nonempty list of ``(center, covariance)`` pairs, the
    round-one mixture components.  Returns ``(points, log_weights)`` where
    ``points`` has shape (rounds * samples_per_round, d) and the raw log
    weights are log density minus log mixture density (not normalized).
    """
    components = [
        _StudentT(np.asarray(c, dtype=float), cov, config.proposal_dof)
        for c, cov in proposal
    ]
    counts = _split_evenly(config.samples_per_round, len(components))

    points = np.vstack(
        [comp.draw(c, rng) for comp, c in zip(components, counts) if c > 0]
    )
    counts = [c for c in counts if c > 0]
    components = components[: len(counts)] if len(counts) < len(components) else components
    log_p = np.array([log_density(x) for x in points])

    for _ in range(1, config.rounds):
        log_w = log_p - _mixture_log_pdf(components, counts, points)
        components.append(
            _StudentT(*_weighted_moments(points, log_w), config.proposal_dof)
        )
        counts.append(config.samples_per_round)
        fresh = components[-1].draw(config.samples_per_round, rng)
        points = np.vstack([points, fresh])
        log_p = np.concatenate([log_p, [log_density(x) for x in fresh]])

    log_w = log_p - _mixture_log_pdf(components, counts, points)
    return points, log_w


def _weighted_moments(points, log_w):
    finite = np.isfinite(log_w)
    if not finite.any():
        # nothing informative yet; refit around the bulk of the draws
        return points.mean(axis=0), np.cov(points.T) + 1e-6 * np.eye(points.shape[1])
    w = np.zeros(len(points))
    w[finite] = np.exp(log_w[finite] - logsumexp(log_w[finite]))
    mean = w @ points
    diff = points - mean
    cov = (diff * w[:, None]).T @ diff
    return mean, 0.5 * (cov + cov.T)


def ess_from_log_weights(log_w):
    """(sum w)^2 / sum w^2 for unnormalized log weights; 1.0 on collapse."""
    finite = np.isfinite(log_w)
    if not finite.any():
        return 1.0
    lw = log_w[finite]
    return float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)))


# ---------------------------------------------------------------------------
# pose-level sampling
# ---------------------------------------------------------------------------

def amis_estimate(cs, k, mode, covariance, config=None, rng_seed=0, extra_modes=()):
    """Sample the pose density around ``mode``.

    ``covariance`` seeds the round-one proposal: either a single 6x6
    spread shared by all round-one components (Laplace result or the
    exploration fallback) or an explicit list of ``(center, covariance)``
    components such as :func:`ring_proposal` builds.  ``extra_modes``
    lists further poses to anchor round-one components at, e.g.
    candidates found on the other side of a discrete symmetry.

    Returns ``(samples, log_z, ess)``: normalized PoseSamples (zero-mass
    draws dropped), the log of the estimated density integral over the
    tangent chart, and the effective sample size.
    """
    config = config or AmisConfig()
    rng = np.random.default_rng(rng_seed)

    def log_density(delta):
        if np.dot(delta[:3], delta[:3]) >= math.pi**2:
            return -math.inf
        chart_volume = _chart_log_volume(delta[:3])
        return log_unnormalized_density(cs, k, se3_retract(mode, delta)) + chart_volume

    if isinstance(covariance, np.ndarray):
        proposal = [(np.zeros(6), covariance)]
    else:
        proposal = list(covariance)
    anchor_cov = proposal[0][1]
    for pose in extra_modes:
        delta = se3_local(mode, pose)
        try:
            local_cov = laplace_covariance(cs, k, pose)
        except SingularInformation:
            local_cov = anchor_cov
        proposal.append((delta, _warp_to_chart(local_cov, delta[:3])))
        spin = np.linalg.norm(delta[:3])
        # a mode near the chart edge (a 180-degree twin) aliases onto the
        # antipodal edge as well; anchor a component on that side too
        if spin > math.pi - 0.5:
            reflected = delta.copy()
            reflected[:3] = delta[:3] * (1.0 - 2.0 * math.pi / spin)
            proposal.append((reflected, _warp_to_chart(local_cov, reflected[:3])))
    points, log_w = adaptive_mixture_sample(log_density, proposal, config, rng)
    total = len(points)
    log_z = float(logsumexp(log_w) - math.log(total))
    ess = ess_from_log_weights(log_w)

    finite = np.isfinite(log_w)
    norm = logsumexp(log_w[finite])
    samples = tuple(
        PoseSample(se3_retract(mode, points[i]), float(log_w[i] - norm))
        for i in np.nonzero(finite)[0]
    )
    return samples, log_z, ess


def _alternate_mode_probe(cs, k, mode_pose, lm_config):
    """Look for a second basin by re-solving on the worst-fitting half.

    On a clean unimodal instance the worst half still describes the same
    pose and the candidate lands back at the mode (then it is discarded).
    Under a discrete ambiguity the worst-fitting half is exactly the
    family of correspondences explained by the competing pose.
    """
    n = len(cs)
    half = n // 2
    if half < 4:
        return None
    norms = np.linalg.norm(residuals(cs, mode_pose, k), axis=1)
    worst = np.sort(np.argsort(-norms, kind="stable")[:half])
    try:
        seed = epnp_init(cs.subset(worst), k)
        candidate = lm_refine(cs, k, seed, lm_config).pose
    except (TooFewPoints, DegenerateConfiguration, NonFiniteCost):
        return None
    apart = geodesic_angle(
        candidate.rotation_matrix(), mode_pose.rotation_matrix()
    )
    return candidate if apart > _PROBE_SEPARATION else None


def _co_detection_map(cs):
    """Rigid model-space map implied by 3D points sharing one detection.

    A correspondence set for an ambiguous object carries several 3D
    hypotheses for a single image point.  Each such group pins the model
    self-map that swaps the hypotheses; with at least three group pairs
    the map (Q, c), x -> Q x + c, is recovered by a rigid fit.  Returns
    None when there are too few pairs or the pairs do not agree on one
    rigid map (e.g. accidental detection collisions).
    """
    groups = {}
    for i in range(len(cs)):
        groups.setdefault(cs.x2d[i].tobytes(), []).append(i)
    first, second = [], []
    for idx in groups.values():
        for a, b in zip(idx, idx[1:]):
            first.append(cs.x3d[a])
            second.append(cs.x3d[b])
    if len(first) < 3:
        return None
    a = np.asarray(first)
    b = np.asarray(second)
    a_mean = a.mean(axis=0)
    b_mean = b.mean(axis=0)
    # involutions make per-pair orientation irrelevant, so a plain
    # rigid fit over the pairs as recorded is enough
    u, s, vt = np.linalg.svd((a - a_mean).T @ (b - b_mean))
    if s[1] <= 1e-12 * max(s[0], 1e-30):
        return None
    sign = np.sign(np.linalg.det(u @ vt))
    rotation = (u * np.array([1.0, 1.0, sign])) @ vt
    rotation = rotation.T
    shift = b_mean - rotation @ a_mean
    spread = float(np.sqrt(np.mean(np.sum((a - a_mean) ** 2, axis=1))))
    err = np.linalg.norm(a @ rotation.T + shift - b, axis=1)
    if float(np.sqrt(np.mean(err**2))) > 1e-6 * (1.0 + spread):
        return None
    return rotation, shift


def _symmetry_twin_probe(cs, k, mode_pose, lm_config):
    """Mirror the mode through the co-detection symmetry map.

    The pose density of a set with duplicated detections is exactly
    invariant under the recovered self-map, so refining the mapped mode
    lands on the equal-mass twin no matter where on the shared basin
    structure the primary mode sits.
    """
    fit = _co_detection_map(cs)
    if fit is None:
        return None
    rotation, shift = fit
    r_twin = mode_pose.rotation_matrix() @ rotation.T
    t_twin = mode_pose.t - r_twin @ shift
    try:
        candidate = lm_refine(cs, k, Pose.from_matrix(r_twin, t_twin), lm_config).pose
    except (TooFewPoints, DegenerateConfiguration, NonFiniteCost):
        return None
    apart = geodesic_angle(
        candidate.rotation_matrix(), mode_pose.rotation_matrix()
    )
    return candidate if apart > _PROBE_SEPARATION else None


def estimate_distribution(
    cs,
    k,
    keep_fraction=1.0,
    lm_config=None,
    amis_config=None,
    rng_seed=0,
    init_pose=None,
):
    """Full pipeline: mode, curvature, adaptive sampling, packaging.

    ``init_pose`` skips the closed-form seeding and refines from the given
    pose instead; it is the escape hatch for correspondence sets the
    closed-form initializer rejects (e.g. collapsed-to-axis coordinates,
    which are collinear by construction).
    """
    amis_config = amis_config or AmisConfig()
    if init_pose is not None:
        estimate = lm_refine(cs, k, init_pose, lm_config)
    else:
        estimate = solve(cs, k, keep_fraction, lm_config)
    mode = estimate.pose

    try:
        covariance = laplace_covariance(cs, k, mode)
        proposal = covariance
    except SingularInformation as singular:
        covariance = exploration_covariance(
            cs, k, mode, amis_config.symmetry_exploration_scale
        )
        proposal = covariance
        direction = singular.direction
        if direction is not None and np.linalg.norm(direction[:3]) > 0.5:
            # unconstrained spin: the density is a thin tube around the
            # rotation circle, which one wide component cannot track
            proposal = ring_proposal(cs, k, mode, direction[:3])

    extra_modes = []
    for probe in (_symmetry_twin_probe, _alternate_mode_probe):
        candidate = probe(cs, k, mode, lm_config)
        if candidate is None:
            continue
        if any(
            geodesic_angle(candidate.rotation_matrix(), known.rotation_matrix())
            <= _PROBE_SEPARATION
            for known in extra_modes
        ):
            continue
        extra_modes.append(candidate)
    samples, log_z, ess = amis_estimate(
        cs,
        k,
        mode,
        proposal,
        amis_config,
        rng_seed,
        extra_modes=tuple(extra_modes),
    )
    return PoseDistribution(mode, covariance, samples, log_z, ess)


def symmetry_spin_angle(reference, pose, axis):
    """Angle of the relative rotation about a model-frame ``axis``.

    Extracts the best-fit spin: exactly the rotation angle when the
    relative rotation is about ``axis``, and the plane-projected angle
    otherwise.  Range (-pi, pi].
    """
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0])
    if abs(axis[0]) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    b1 = np.cross(axis, helper)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(axis, b1)
    basis = np.column_stack([b1, b2, axis])
    rel = basis.T @ (reference.rotation_matrix().T @ pose.rotation_matrix()) @ basis
    return math.atan2(rel[1, 0] - rel[0, 1], rel[0, 0] + rel[1, 1])


def sample_poses(dist, n, rng_seed=0):
    """Draw ``n`` poses by systematic resampling of the weighted samples."""
    if not dist.samples:
        raise ValueError("distribution has no samples")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    weights = np.exp([s.log_weight for s in dist.samples])
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0  # close the last bin against rounding
    positions = (np.arange(n) + rng.random()) / n
    idx = np.searchsorted(cdf, positions, side="left")
    return [dist.samples[int(i)].pose for i in idx]
