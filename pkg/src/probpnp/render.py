"""Software depth rendering, visibility reasoning, and depth-map IO.

The rasterizer is a straightforward perspective-correct z-buffer: pixel
centers sit at ``(col + 0.5, row + 0.5)``, the nearest surface wins, depth
ties go to the triangle with the lower index, and back-facing triangles are
drawn like any others.  Triangles that cross the near plane are clipped
against ``z = EPS_Z``; triangles entirely behind it are skipped.

Depth maps are stored as meters with 0 marking "no data".  The binary file
format is: magic ``DPTH``, little-endian u32 width, u32 height, then
``width * height`` float32 depths in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheiralityViolation,
    DimensionMismatch,
    InvalidSize,
    NoOverlap,
    ParseError,
)
from .geometry import EPS_Z, Pose, SymmetrySet

_MAGIC = b"DPTH"


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with a precomputed diameter and symmetry annotations.

    ``diameter`` is the largest pairwise vertex distance; it feeds the
    distance-threshold grids of the metric suite.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    diameter: float
    symmetries: SymmetrySet = field(default_factory=SymmetrySet.identity_only)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        t = np.array(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] < 3:
            raise DimensionMismatch("vertices must have shape (n >= 3, 3)")
        if t.ndim != 2 or t.shape[1] != 3 or t.shape[0] < 1:
            raise DimensionMismatch("triangles must have shape (m >= 1, 3)")
        if t.min() < 0 or t.max() >= v.shape[0]:
            raise ValueError("triangle indices out of range")
        if not np.isfinite(self.diameter) or self.diameter <= 0:
            raise InvalidSize("diameter must be positive")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)


def mesh_diameter(vertices):
    """Largest pairwise vertex distance (exact, chunked O(n^2))."""
    v = np.asarray(vertices, dtype=float)
    best = 0.0
    chunk = 512
    for i in range(0, v.shape[0], chunk):
        block = v[i : i + chunk]
        d2 = np.sum((block[:, None, :] - v[None, :, :]) ** 2, axis=2)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def make_mesh(vertices, triangles, symmetries=None):
    """Convenience constructor that computes the diameter."""
    return Mesh(
        vertices,
        triangles,
        mesh_diameter(vertices),
        symmetries or SymmetrySet.identity_only(),
    )


@dataclass(frozen=True)
class DepthMap:
    """Row-major depth raster in meters; 0 marks pixels without data."""

    width: int
    height: int
    depths: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvalidSize("depth map must be at least 1x1")
        d = np.array(self.depths, dtype=float)
        if d.shape != (self.height, self.width):
            raise DimensionMismatch(
                f"depth array shape {d.shape} does not match {self.height}x{self.width}"
            )
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("depths must be finite and non-negative")
        d.setflags(write=False)
        object.__setattr__(self, "depths", d)

    def valid_mask(self):
        return self.depths > 0.0


def write_depth_map(path, depth_map):
    """Serialize to the DPTH binary layout (float32, little-endian)."""
    data = depth_map.depths.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", depth_map.width, depth_map.height))
        fh.write(data)


def read_depth_map(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise ParseError(f"{path}: not a DPTH depth map")
    width, height = struct.unpack("<II", blob[4:12])
    if width < 1 or height < 1:
        raise InvalidSize(f"{path}: bad raster size {width}x{height}")
    expected = 12 + 4 * width * height
    if len(blob) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(blob)}")
    depths = np.frombuffer(blob, dtype="<f4", offset=12).astype(float)
    return DepthMap(width, height, depths.reshape(height, width))


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _clip_near(tri):
    """Clip one camera-space triangle against z = EPS_Z.

    Returns a list of triangles (each (3, 3)) entirely in front.
    """
    inside = tri[:, 2] > EPS_Z
    count = int(inside.sum())
    if count == 3:
        return [tri]
    if count == 0:
        return []
    # Sutherland-Hodgman on the z plane
    poly = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        ain, bin_ = a[2] > EPS_Z, b[2] > EPS_Z
        if ain:
            poly.append(a)
        if ain != bin_:
            s = (EPS_Z - a[2]) / (b[2] - a[2])
            poly.append(a + s * (b - a))
    if len(poly) < 3:
        return []
    out = []
    for i in range(1, len(poly) - 1):
        out.append(np.stack([poly[0], poly[i], poly[i + 1]]))
    return out


def render_depth(mesh, pose, k, width=None, height=None):
    """Render the mesh depth at ``pose`` under intrinsics ``k``.

    ``width``/``height`` default to the intrinsics' raster size.  Pixels the
    object does not cover are 0.
    """
    width = int(width if width is not None else k.width)
    height = int(height if height is not None else k.height)
    if width < 1 or height < 1:
        raise InvalidSize("render target must be at least 1x1")
    buf = np.zeros((height, width))

    cam = pose.apply(mesh.vertices)
    for tri_index in range(mesh.triangles.shape[0]):
        tri = cam[mesh.triangles[tri_index]]
        for piece in _clip_near(tri):
            _raster_triangle(buf, piece, k, width, height)
    return DepthMap(width, height, buf)


def _raster_triangle(buf, tri, k, width, height):
    z = tri[:, 2]
    u = k.fx * tri[:, 0] / z + k.cx
    v = k.fy * tri[:, 1] / z + k.cy
    lo_x = max(int(np.floor(u.min() - 0.5)), 0)
    hi_x = min(int(np.ceil(u.max() - 0.5)), width - 1)
    lo_y = max(int(np.floor(v.min() - 0.5)), 0)
    hi_y = min(int(np.ceil(v.max() - 0.5)), height - 1)
    if lo_x > hi_x or lo_y > hi_y:
        return
    px = np.arange(lo_x, hi_x + 1) + 0.5
    py = np.arange(lo_y, hi_y + 1) + 0.5
    gx, gy = np.meshgrid(px, py)

    x0, y0 = u[0], v[0]
    x1, y1 = u[1], v[1]
    x2, y2 = u[2], v[2]
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    if area == 0.0:
        return
    w0 = (x1 - gx) * (y2 - gy) - (x2 - gx) * (y1 - gy)
    w1 = (x2 - gx) * (y0 - gy) - (x0 - gx) * (y2 - gy)
    w2 = (x0 - gx) * (y1 - gy) - (x1 - gx) * (y0 - gy)
    if area < 0.0:  # rasterize both windings identically
        area, w0, w1, w2 = -area, -w0, -w1, -w2
    cover = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not cover.any():
        return
    b0 = w0 / area
    b1 = w1 / area
    b2 = w2 / area
    # perspective-correct: 1/z interpolates linearly in screen space
    inv_z = b0 / z[0] + b1 / z[1] + b2 / z[2]
    with np.errstate(divide="ignore"):
        depth = np.where(inv_z > 0, 1.0 / inv_z, np.inf)
    window = buf[lo_y : hi_y + 1, lo_x : hi_x + 1]
    current = np.where(window > 0, window, np.inf)
    # strictly nearer wins; equal depth keeps the earlier (lower-index) triangle
    take = cover & (depth < current)
    window[take] = depth[take]


# ---------------------------------------------------------------------------
# visibility and depth-based refinement
# ---------------------------------------------------------------------------

def visibility_mask(object_depth, scene_depth, tolerance=0.015):
    """Pixels where the object is present and not occluded by the scene.

    A pixel is visible when the object render has data there and either the
    scene has no depth or the object surface is within ``tolerance`` meters
    in front of (or behind) the scene surface.
    """
    if (object_depth.width, object_depth.height) != (scene_depth.width, scene_depth.height):
        raise DimensionMismatch("object and scene depth maps differ in size")
    obj = object_depth.depths
    scene = scene_depth.depths
    return (obj > 0) & ((scene <= 0) | (obj <= scene + tolerance))


def depth_refine(pose, mesh, k, observed_depth):
    """Shift the pose along the viewing ray by the median depth error.

    Renders the mesh at ``pose``, takes the median of
    ``observed - rendered`` over pixels where both maps have data, and moves
    the translation along the ray through the projection of ``t``,
    normalized to unit z (so the depth component changes by exactly the
    median difference).

    Raises
    ------
    NoOverlap
        If no pixel has data in both maps.
    CheiralityViolation
        If the model origin is behind the camera.
    """
    if pose.t[2] <= EPS_Z:
        raise CheiralityViolation("model origin is behind the camera")
    rendered = render_depth(mesh, pose, k, observed_depth.width, observed_depth.height)
    both = rendered.valid_mask() & observed_depth.valid_mask()
    if not both.any():
        raise NoOverlap("rendered and observed depth maps share no pixels")
    delta = float(np.median(observed_depth.depths[both] - rendered.depths[both]))
    u0 = k.fx * pose.t[0] / pose.t[2] + k.cx
    v0 = k.fy * pose.t[1] / pose.t[2] + k.cy
    ray = np.array([(u0 - k.cx) / k.fx, (v0 - k.cy) / k.fy, 1.0])
    return Pose(pose.q, pose.t + delta * ray)
