"""Rigid poses, pinhole projection, and weighted reprojection residuals.

Conventions used throughout the package
---------------------------------------
* Rotations are stored as unit quaternions ``(w, x, y, z)``; matrices are
  built on demand.  A pose maps model coordinates into camera coordinates,
  ``p_cam = R @ p_model + t``, with ``t`` in meters.
* Tangent vectors are 6-vectors ``(wx, wy, wz, tx, ty, tz)``: the first three
  entries are a rotation increment in radians, the last three a translation
  increment in meters.  The retraction applies the rotation on the left and
  the translation additively in the camera frame::

      retract(pose, d) = Pose(exp([d[:3]]_x) @ R,  t + d[3:])

* Pixels follow the usual pinhole model ``u = fx * X/Z + cx``,
  ``v = fy * Y/Z + cy`` with no distortion.  Depths at or below ``EPS_Z``
  (1e-6 m) count as behind the camera.
* A correspondence couples a model point ``x3d`` (meters), an observed pixel
  ``x2d``, and a per-axis weight 2-vector ``w2d`` (>= 0).  Its residual is
  ``w2d * (project(pose, k, x3d) - x2d)`` and the total cost of a set is
  half the sum of squared residual entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CheiralityViolation, DimensionMismatch, InvalidSize

EPS_Z = 1e-6
_QUAT_NORM_TOL = 1e-9


# ---------------------------------------------------------------------------
# quaternion / rotation helpers
# ---------------------------------------------------------------------------

def _quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("quaternion must be finite and nonzero")
    q = q / n
    if q[0] < 0.0:  # canonical hemisphere, keeps representations unique
        q = -q
    return q


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _quat_from_matrix(m):
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(m)))
        if i == 0:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            w = (m[2, 1] - m[1, 2]) / s
            x = 0.25 * s
            y = (m[0, 1] + m[1, 0]) / s
            z = (m[0, 2] + m[2, 0]) / s
        elif i == 1:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            w = (m[0, 2] - m[2, 0]) / s
            x = (m[0, 1] + m[1, 0]) / s
            y = 0.25 * s
            z = (m[1, 2] + m[2, 1]) / s
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            w = (m[1, 0] - m[0, 1]) / s
            x = (m[0, 2] + m[2, 0]) / s
            y = (m[1, 2] + m[2, 1]) / s
            z = 0.25 * s
    return _quat_normalize(np.array([w, x, y, z]))


def _quat_from_rotvec(v):
    v = np.asarray(v, dtype=float)
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        # second-order series keeps exp/log round trips tight near zero
        half = 0.5 * angle
        w = 1.0 - half * half / 2.0
        s = 0.5 - half * half / 12.0
    else:
        w = math.cos(0.5 * angle)
        s = math.sin(0.5 * angle) / angle
    return _quat_normalize(np.array([w, s * v[0], s * v[1], s * v[2]]))


def so3_exp(rotvec):
    """Rotation matrix for a rotation-vector (axis times angle, radians)."""
    return _quat_to_matrix(_quat_from_rotvec(rotvec))


def so3_log(matrix):
    """Rotation vector of a rotation matrix; angle in [0, pi]."""
    q = _quat_from_matrix(matrix)
    w = min(1.0, max(-1.0, float(q[0])))
    vec = q[1:]
    s = float(np.linalg.norm(vec))
    angle = 2.0 * math.atan2(s, w)
    if s < 1e-12:
        # near identity (or near pi with a clean axis from the quaternion)
        if angle < 1e-6:
            return vec * 2.0
        return vec / s * angle
    return vec / s * angle


def _hat(v):
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def geodesic_angle(r1, r2):
    """Geodesic distance in radians between two rotation matrices."""
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    c = (float(np.trace(r1 @ r2.T)) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


# ---------------------------------------------------------------------------
# core value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform from model to camera coordinates.

    Parameters
    ----------
    q : array-like, shape (4,)
        Unit quaternion ``(w, x, y, z)``.  Normalized on construction; the
        stored norm is within 1e-9 of one.
    t : array-like, shape (3,)
        Translation in meters.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = _quat_normalize(self.q)
        t = np.array(self.t, dtype=float)
        if t.shape != (3,):
            raise ValueError("translation must be a 3-vector")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity():
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(rotation, translation):
        """Build a pose from a 3x3 rotation matrix and a 3-vector."""
        return Pose(_quat_from_matrix(rotation), np.asarray(translation, dtype=float))

    @staticmethod
    def from_rotvec(rotvec, translation):
        return Pose(_quat_from_rotvec(rotvec), np.asarray(translation, dtype=float))

    def rotation_matrix(self):
        return _quat_to_matrix(self.q)

    def apply(self, points):
        """Map model points (..., 3) into camera coordinates."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation_matrix().T + self.t

    def compose(self, other):
        """``self @ other``: apply ``other`` first, then ``self``."""
        r = self.rotation_matrix()
        return Pose(_quat_mul(self.q, other.q), r @ other.t + self.t)

    def inverse(self):
        r = self.rotation_matrix()
        conj = np.array([self.q[0], -self.q[1], -self.q[2], -self.q[3]])
        return Pose(conj, -(r.T @ self.t))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with an associated raster size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidSize("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidSize("image size must be positive")

    def matrix(self):
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class Correspondence:
    """One 2D-3D match with a per-axis confidence weight."""

    x3d: np.ndarray
    x2d: np.ndarray
    w2d: np.ndarray

    def __post_init__(self):
        x3d = np.asarray(self.x3d, dtype=float).reshape(3)
        x2d = np.asarray(self.x2d, dtype=float).reshape(2)
        w2d = np.asarray(self.w2d, dtype=float).reshape(2)
        if not (np.all(np.isfinite(x3d)) and np.all(np.isfinite(x2d)) and np.all(np.isfinite(w2d))):
            raise ValueError("correspondence entries must be finite")
        if np.any(w2d < 0):
            raise ValueError("weights must be non-negative")
        object.__setattr__(self, "x3d", x3d)
        object.__setattr__(self, "x2d", x2d)
        object.__setattr__(self, "w2d", w2d)


class CorrespondenceSet:
    """Array-backed collection of correspondences.

    Stores ``x3d`` (n, 3), ``x2d`` (n, 2) and ``w2d`` (n, 2) as float arrays.
    The set is immutable; derive filtered or reweighted copies through
    :meth:`subset` and :meth:`with_weights`.
    """

    __slots__ = ("x3d", "x2d", "w2d")

    def __init__(self, x3d, x2d, w2d):
        x3d = np.array(x3d, dtype=float)
        x2d = np.array(x2d, dtype=float)
        w2d = np.array(w2d, dtype=float)
        if x3d.ndim != 2 or x3d.shape[1] != 3:
            raise DimensionMismatch("x3d must have shape (n, 3)")
        n = x3d.shape[0]
        if n < 1:
            raise ValueError("a correspondence set needs at least one item")
        if x2d.shape != (n, 2) or w2d.shape != (n, 2):
            raise DimensionMismatch("x2d and w2d must have shape (n, 2)")
        if not (np.all(np.isfinite(x3d)) and np.all(np.isfinite(x2d)) and np.all(np.isfinite(w2d))):
            raise ValueError("correspondence arrays must be finite")
        if np.any(w2d < 0):
            raise ValueError("weights must be non-negative")
        for a in (x3d, x2d, w2d):
            a.setflags(write=False)
        self.x3d = x3d
        self.x2d = x2d
        self.w2d = w2d

    @staticmethod
    def from_items(items):
        items = list(items)
        return CorrespondenceSet(
            np.array([c.x3d for c in items]),
            np.array([c.x2d for c in items]),
            np.array([c.w2d for c in items]),
        )

    def __len__(self):
        return self.x3d.shape[0]

    def __getitem__(self, i):
        return Correspondence(self.x3d[i], self.x2d[i], self.w2d[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        return CorrespondenceSet(self.x3d[indices], self.x2d[indices], self.w2d[indices])

    def with_weights(self, w2d):
        return CorrespondenceSet(self.x3d, self.x2d, w2d)

    def weight_norms(self):
        return np.linalg.norm(self.w2d, axis=1)


# ---------------------------------------------------------------------------
# projection and residuals
# ---------------------------------------------------------------------------

def _camera_points(pose, x3d):
    return np.asarray(x3d, dtype=float) @ pose.rotation_matrix().T + pose.t


def _project_camera(k, p):
    """Project camera-frame points (n, 3) without a cheirality check."""
    z = p[:, 2]
    u = k.fx * p[:, 0] / z + k.cx
    v = k.fy * p[:, 1] / z + k.cy
    return np.stack([u, v], axis=1)


def project_points(pose, k, x3d):
    """Project model points (n, 3) to pixels (n, 2).

    Raises
    ------
    CheiralityViolation
        If any point has camera depth <= ``EPS_Z``.
    """
    pts = np.asarray(x3d, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    p = _camera_points(pose, pts)
    if np.any(p[:, 2] <= EPS_Z):
        raise CheiralityViolation(
            f"{int(np.sum(p[:, 2] <= EPS_Z))} point(s) at or behind the camera"
        )
    uv = _project_camera(k, p)
    return uv[0] if single else uv


def project(pose, k, x3d):
    """Project a single model point to a pixel 2-vector."""
    return project_points(pose, k, np.asarray(x3d, dtype=float).reshape(3))


def weighted_residual(corr, pose, k):
    """Residual 2-vector ``w2d * (project(x3d) - x2d)`` of one correspondence."""
    uv = project(pose, k, corr.x3d)
    return corr.w2d * (uv - corr.x2d)


def residuals(cs, pose, k):
    """Stacked weighted residuals (n, 2); raises on cheirality violations."""
    uv = project_points(pose, k, cs.x3d)
    return cs.w2d * (uv - cs.x2d)


def total_cost(cs, pose, k):
    """Half the sum of squared weighted residual entries.

    Returns ``math.inf`` when any point sits at or behind the camera, so the
    corresponding unnormalized density ``exp(-cost)`` is zero there.
    """
    p = _camera_points(pose, cs.x3d)
    if np.any(p[:, 2] <= EPS_Z):
        return math.inf
    r = cs.w2d * (_project_camera(k, p) - cs.x2d)
    return 0.5 * float(np.sum(r * r))


def _projection_jacobians(k, p):
    """d(pixel)/d(camera point) for camera points (n, 3) -> (n, 2, 3)."""
    n = p.shape[0]
    z = p[:, 2]
    out = np.zeros((n, 2, 3))
    out[:, 0, 0] = k.fx / z
    out[:, 0, 2] = -k.fx * p[:, 0] / (z * z)
    out[:, 1, 1] = k.fy / z
    out[:, 1, 2] = -k.fy * p[:, 1] / (z * z)
    return out


def residual_jacobian(cs, pose, k):
    """Jacobian of the stacked weighted residuals w.r.t. the 6-dim tangent.

    Returns an array of shape (n, 2, 6): for correspondence ``i``, columns
    0-2 differentiate along the rotation increment (left-multiplied
    exponential) and columns 3-5 along the additive translation increment.
    """
    r = pose.rotation_matrix()
    rotated = cs.x3d @ r.T  # R @ x, before translation
    p = rotated + pose.t
    if np.any(p[:, 2] <= EPS_Z):
        raise CheiralityViolation("cannot differentiate through a point behind the camera")
    pj = _projection_jacobians(k, p)  # (n, 2, 3)
    wpj = cs.w2d[:, :, None] * pj  # diag(w) @ d(uv)/dp
    jac = np.empty((len(cs), 2, 6))
    # d p / d rot = -[R x]_x; build the cross-product matrices in bulk
    n = len(cs)
    hats = np.zeros((n, 3, 3))
    hats[:, 0, 1] = -rotated[:, 2]
    hats[:, 0, 2] = rotated[:, 1]
    hats[:, 1, 0] = rotated[:, 2]
    hats[:, 1, 2] = -rotated[:, 0]
    hats[:, 2, 0] = -rotated[:, 1]
    hats[:, 2, 1] = rotated[:, 0]
    jac[:, :, :3] = -np.einsum("nij,njk->nik", wpj, hats)
    jac[:, :, 3:] = wpj
    return jac


def cost_gradient(cs, pose, k):
    """Gradient of :func:`total_cost` w.r.t. the 6-dim tangent at ``pose``."""
    r = residuals(cs, pose, k).reshape(-1)
    j = residual_jacobian(cs, pose, k).reshape(-1, 6)
    return j.T @ r


def cost_param_gradients(cs, pose, k):
    """Gradients of :func:`total_cost` w.r.t. model points and weights.

    Returns
    -------
    grad_x3d : ndarray, shape (n, 3)
    grad_w2d : ndarray, shape (n, 2)
        Derivatives w.r.t. the effective (already-normalized) weights.
    """
    rmat = pose.rotation_matrix()
    p = _camera_points(pose, cs.x3d)
    if np.any(p[:, 2] <= EPS_Z):
        raise CheiralityViolation("cost gradient undefined behind the camera")
    raw = _project_camera(k, p) - cs.x2d  # unweighted residual
    f = cs.w2d * raw
    pj = _projection_jacobians(k, p)
    # dC/dx_i = (diag(w) J_proj R)^T f_i
    wpj = cs.w2d[:, :, None] * pj
    grad_x3d = np.einsum("nij,ni->nj", wpj @ rmat, f)
    grad_w2d = f * raw  # = w * raw^2 per entry
    return grad_x3d, grad_w2d


# ---------------------------------------------------------------------------
# tangent-space chart
# ---------------------------------------------------------------------------

def se3_retract(pose, delta):
    """Apply a 6-dim tangent step: left-rotate by delta[:3], shift by delta[3:]."""
    d = np.asarray(delta, dtype=float)
    if d.shape != (6,):
        raise ValueError("tangent vector must have shape (6,)")
    dq = _quat_from_rotvec(d[:3])
    return Pose(_quat_mul(dq, pose.q), pose.t + d[3:])


def se3_local(a, b):
    """Tangent vector ``d`` with ``se3_retract(a, d) == b`` (rotation < pi)."""
    rel = b.rotation_matrix() @ a.rotation_matrix().T
    return np.concatenate([so3_log(rel), b.t - a.t])


def pose_errors(est, gt):
    """(geodesic rotation error in radians, translation error in meters)."""
    rot = geodesic_angle(est.rotation_matrix(), gt.rotation_matrix())
    return rot, float(np.linalg.norm(est.t - gt.t))


# ---------------------------------------------------------------------------
# rigid-symmetry annotations (shared by meshes and the metric suite)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymmetrySet:
    """Rigid transforms mapping a model onto itself.

    ``discrete`` lists (rotation, translation) pairs and always effectively
    includes the identity (it is added on demand if missing).  Each entry of
    ``continuous_axes`` is a unit 3-vector: the model is symmetric under any
    rotation about that axis through the model origin.  Continuous axes are
    discretized on request.
    """

    discrete: tuple = field(default_factory=tuple)
    continuous_axes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        discrete = []
        for rot, trans in self.discrete:
            rot = np.asarray(rot, dtype=float).reshape(3, 3)
            trans = np.asarray(trans, dtype=float).reshape(3)
            rot.setflags(write=False)
            trans.setflags(write=False)
            discrete.append((rot, trans))
        axes = []
        for axis in self.continuous_axes:
            axis = np.asarray(axis, dtype=float).reshape(3)
            n = np.linalg.norm(axis)
            if n == 0:
                raise ValueError("symmetry axis must be nonzero")
            axis = axis / n
            axis.setflags(write=False)
            axes.append(axis)
        object.__setattr__(self, "discrete", tuple(discrete))
        object.__setattr__(self, "continuous_axes", tuple(axes))

    @staticmethod
    def identity_only():
        return SymmetrySet()

    def transforms(self, continuous_steps=64):
        """All symmetry transforms as (rotation, translation) pairs.

        Continuous axes are discretized into ``continuous_steps`` rotations.
        The identity is always present and listed first.
        """
        if continuous_steps < 1:
            raise ValueError("continuous_steps must be >= 1")
        out = [(np.eye(3), np.zeros(3))]
        for rot, trans in self.discrete:
            if np.allclose(rot, np.eye(3), atol=1e-12) and np.allclose(trans, 0.0, atol=1e-12):
                continue  # identity is already first
            out.append((rot, trans))
        for axis in self.continuous_axes:
            for step in range(1, continuous_steps):
                angle = 2.0 * math.pi * step / continuous_steps
                out.append((so3_exp(axis * angle), np.zeros(3)))
        return out
