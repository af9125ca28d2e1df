"""Synthetic scene generation and file IO for experiments.

Covers primitive meshes with symmetry annotations, randomized noisy
instances (pose, surface correspondences, pixel noise, outliers,
occlusion), an ASCII PLY subset, BOP-style result CSV files, JSON configs
with stable digests, and scenario bundle directories.

Units: the library works in meters throughout; result CSV translations are
converted to millimeters at the IO boundary and back on read.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    InvalidSize,
    ParseError,
    TooFewPoints,
    UnsupportedPly,
)
from .geometry import (
    CameraIntrinsics,
    CorrespondenceSet,
    Pose,
    SymmetrySet,
    project_points,
)
from .render import DepthMap, Mesh, mesh_diameter, read_depth_map, write_depth_map


# ---------------------------------------------------------------------------
# configuration types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    """Observation noise knobs for synthetic instances.

    ``occlusion_half_plane`` is ``(normal, offset)`` with a unit 2-vector
    normal; detections with ``normal . u > offset`` are dropped.
    """

    pixel_sigma: float = 1.0
    outlier_fraction: float = 0.0
    occlusion_half_plane: tuple = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.pixel_sigma < 0:
            raise ValueError("pixel_sigma must be >= 0")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must be in [0, 1)")
        if self.occlusion_half_plane is not None:
            normal, offset = self.occlusion_half_plane
            normal = np.asarray(normal, dtype=float).reshape(2)
            n = np.linalg.norm(normal)
            if n == 0:
                raise ValueError("occlusion normal must be nonzero")
            normal = normal / n
            normal.setflags(write=False)
            object.__setattr__(self, "occlusion_half_plane", (normal, float(offset)))


@dataclass(frozen=True)
class PoseBounds:
    """Sampling box for ground-truth poses: uniform rotation, translation
    uniform in ``[-lateral, lateral]^2 x depth_range``."""

    depth_range: tuple = (0.5, 3.0)
    lateral: float = 0.15

    def __post_init__(self):
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise ValueError("depth_range must satisfy 0 < lo <= hi")
        if self.lateral < 0:
            raise ValueError("lateral must be >= 0")


@dataclass(frozen=True)
class InstanceRecord:
    """One synthetic observation plus everything oracles need.

    ``gt_x3d`` keeps the true surface coordinate behind each detection,
    even when the published ``correspondences`` were altered (collapsed,
    cloned, or corrupted) to emulate a correspondence network's output.
    """

    scene_id: int
    image_id: int
    object_id: int
    gt_pose: Pose
    k: CameraIntrinsics
    correspondences: CorrespondenceSet
    gt_x3d: np.ndarray
    observed_depth: DepthMap = None

    def __post_init__(self):
        if min(self.scene_id, self.image_id, self.object_id) < 0:
            raise ValueError("ids must be nonnegative")
        gt = np.array(self.gt_x3d, dtype=float)
        if gt.shape != (len(self.correspondences), 3):
            raise ValueError("gt_x3d must align with the correspondences")
        gt.setflags(write=False)
        object.__setattr__(self, "gt_x3d", gt)


# ---------------------------------------------------------------------------
# primitive meshes
# ---------------------------------------------------------------------------

def _box(extents):
    ex, ey, ez = (float(v) / 2.0 for v in extents)
    vertices = np.array(
        [
            [-ex, -ey, -ez], [ex, -ey, -ez], [ex, ey, -ez], [-ex, ey, -ez],
            [-ex, -ey, ez], [ex, -ey, ez], [ex, ey, ez], [-ex, ey, ez],
        ]
    )
    triangles = np.array(
        [
            [0, 1, 2], [0, 2, 3],
            [4, 6, 5], [4, 7, 6],
            [0, 5, 1], [0, 4, 5],
            [3, 2, 6], [3, 6, 7],
            [0, 3, 7], [0, 7, 4],
            [1, 5, 6], [1, 6, 2],
        ]
    )
    return vertices, triangles


def _cube_rotations():
    """The 24 rotations mapping an axis-aligned cube onto itself."""
    out = []
    for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
        for signs in np.ndindex(2, 2, 2):
            rot = np.zeros((3, 3))
            for row, col in enumerate(perm):
                rot[row, col] = 1.0 if signs[row] == 0 else -1.0
            if np.linalg.det(rot) > 0:
                out.append(rot)
    return out


def _ring(radius, z, segments):
    angles = 2.0 * math.pi * np.arange(segments) / segments
    return np.column_stack(
        [radius * np.cos(angles), radius * np.sin(angles), np.full(segments, z)]
    )


def make_primitive_mesh(kind, **params):
    """Build one of the stock shapes with its symmetry annotation.

    Kinds and size parameters (all meters, all positive):
      cube(size)                axis-aligned, 24 discrete symmetries
      cylinder(radius, height, segments)   continuous z-axis symmetry
      cone(radius, height, segments)       continuous z-axis symmetry
      tetra(size)               scalene, identity-only symmetry
      sym_box_180(extents)      distinct extents, 180-degree z symmetry
    """
    if kind == "cube":
        size = float(params.pop("size", 0.1))
        _check_sizes(params, size=size)
        vertices, triangles = _box((size, size, size))
        sym = SymmetrySet(discrete=tuple((rot, np.zeros(3)) for rot in _cube_rotations()))
    elif kind == "sym_box_180":
        extents = tuple(float(v) for v in params.pop("extents", (0.06, 0.1, 0.16)))
        _check_sizes(params, *extents)
        if len(set(extents)) != 3:
            raise InvalidSize("sym_box_180 extents must be distinct")
        vertices, triangles = _box(extents)
        flip = np.diag([-1.0, -1.0, 1.0])
        sym = SymmetrySet(discrete=((flip, np.zeros(3)),))
    elif kind in ("cylinder", "cone"):
        radius = float(params.pop("radius", 0.05))
        height = float(params.pop("height", 0.2 if kind == "cylinder" else 0.15))
        segments = int(params.pop("segments", 32))
        _check_sizes(params, radius=radius, height=height)
        if segments < 3:
            raise InvalidSize("segments must be >= 3")
        if kind == "cylinder":
            vertices, triangles = _cylinder(radius, height, segments)
        else:
            vertices, triangles = _cone(radius, height, segments)
        sym = SymmetrySet(continuous_axes=(np.array([0.0, 0.0, 1.0]),))
    elif kind == "tetra":
        size = float(params.pop("size", 0.25))
        _check_sizes(params, size=size)
        vertices = size * np.array(
            [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.35, 0.9, 0.0], [0.25, 0.3, 0.8]]
        )
        vertices = vertices - vertices.mean(axis=0)
        triangles = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]])
        sym = SymmetrySet.identity_only()
    else:
        raise InvalidSize(f"unknown primitive kind {kind!r}")
    return Mesh(vertices, triangles, mesh_diameter(vertices), sym)


def _check_sizes(leftover_params, *values, **named):
    if leftover_params:
        raise InvalidSize(f"unknown size parameters {sorted(leftover_params)}")
    for value in list(values) + list(named.values()):
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
            raise InvalidSize("size parameters must be positive finite numbers")


def _cylinder(radius, height, segments):
    h = height / 2.0
    bottom = _ring(radius, -h, segments)
    top = _ring(radius, h, segments)
    vertices = np.vstack([bottom, top, [[0.0, 0.0, -h]], [[0.0, 0.0, h]]])
    b_center, t_center = 2 * segments, 2 * segments + 1
    triangles = []
    for i in range(segments):
        j = (i + 1) % segments
        triangles.append([i, j, segments + i])           # side lower
        triangles.append([j, segments + j, segments + i])  # side upper
        triangles.append([b_center, j, i])                 # bottom cap
        triangles.append([t_center, segments + i, segments + j])  # top cap
    return vertices, np.array(triangles)


def _cone(radius, height, segments):
    h = height / 2.0
    base = _ring(radius, -h, segments)
    vertices = np.vstack([base, [[0.0, 0.0, -h]], [[0.0, 0.0, h]]])
    center, apex = segments, segments + 1
    triangles = []
    for i in range(segments):
        j = (i + 1) % segments
        triangles.append([center, j, i])   # base cap
        triangles.append([i, j, apex])     # flank
    return vertices, np.array(triangles)


# ---------------------------------------------------------------------------
# instance generation
# ---------------------------------------------------------------------------

def sample_surface_points(mesh, n, rng):
    """Area-weighted uniform samples on the mesh surface."""
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise InvalidSize("mesh has zero surface area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = rng.random(n)
    r2 = rng.random(n)
    flip = r1 + r2 > 1.0
    r1[flip] = 1.0 - r1[flip]
    r2[flip] = 1.0 - r2[flip]
    return a[tri] + r1[:, None] * (b[tri] - a[tri]) + r2[:, None] * (c[tri] - a[tri])


def sample_pose(bounds, rng):
    """Uniform rotation (normalized 4-normal quaternion), boxed translation."""
    q = rng.normal(size=4)
    x = rng.uniform(-bounds.lateral, bounds.lateral)
    y = rng.uniform(-bounds.lateral, bounds.lateral)
    z = rng.uniform(*bounds.depth_range)
    return Pose(q, np.array([x, y, z]))


def generate_instance(
    mesh,
    bounds,
    k,
    n_points,
    noise,
    scene_id=0,
    image_id=0,
    object_id=0,
    correspondence_model="exact",
):
    """Draw a pose and a noisy set of 2D-3D correspondences.

    ``correspondence_model`` selects what the published 3D coordinates look
    like, emulating different correspondence-network behaviors:

      exact           true surface coordinates
      axis_collapse   coordinates projected onto the continuous symmetry
                      axis, as a rotation-agnostic predictor would emit;
                      the instance carries no information about the
                      rotation angle around that axis
      symmetry_clone  each detection is listed twice, once with the true
                      coordinate and once with its discrete-symmetry
                      counterpart; the density becomes exactly multimodal

    Raises TooFewPoints when occlusion leaves fewer than 4 detections.
    """
    if n_points < 4:
        raise TooFewPoints("need at least 4 points")
    rng = np.random.default_rng(noise.rng_seed)
    gt_pose = sample_pose(bounds, rng)
    surface = sample_surface_points(mesh, n_points, rng)

    if correspondence_model == "exact":
        x3d = surface
    elif correspondence_model == "axis_collapse":
        if not mesh.symmetries.continuous_axes:
            raise ValueError("axis_collapse needs a continuous symmetry axis")
        axis = mesh.symmetries.continuous_axes[0]
        x3d = np.outer(surface @ axis, axis)
    elif correspondence_model == "symmetry_clone":
        if not mesh.symmetries.discrete:
            raise ValueError("symmetry_clone needs a discrete symmetry")
        x3d = surface
    else:
        raise ValueError(f"unknown correspondence model {correspondence_model!r}")

    x2d = project_points(gt_pose, k, x3d)
    if noise.pixel_sigma > 0:
        x2d = x2d + rng.normal(0.0, noise.pixel_sigma, size=x2d.shape)
    n_out = int(round(noise.outlier_fraction * n_points))
    if n_out > 0:
        idx = rng.choice(n_points, size=n_out, replace=False)
        x2d[idx, 0] = rng.uniform(0.0, k.width, size=n_out)
        x2d[idx, 1] = rng.uniform(0.0, k.height, size=n_out)
    gt_x3d = surface

    if correspondence_model == "symmetry_clone":
        rot, trans = mesh.symmetries.discrete[0]
        clones = surface @ rot.T + trans
        x3d = np.vstack([x3d, clones])
        x2d = np.vstack([x2d, x2d])  # clone shares its detection
        gt_x3d = np.vstack([gt_x3d, gt_x3d])

    if noise.occlusion_half_plane is not None:
        normal, offset = noise.occlusion_half_plane
        keep = x2d @ normal <= offset
        x3d, x2d, gt_x3d = x3d[keep], x2d[keep], gt_x3d[keep]
    if len(x3d) < 4:
        raise TooFewPoints(f"occlusion left {len(x3d)} correspondences")

    correspondences = CorrespondenceSet(x3d, x2d, np.ones_like(x2d))
    return InstanceRecord(
        scene_id, image_id, object_id, gt_pose, k, correspondences, gt_x3d
    )


# ---------------------------------------------------------------------------
# PLY (ASCII subset)
# ---------------------------------------------------------------------------

def save_ply(path, mesh):
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for v in mesh.vertices:
        lines.append(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for t in mesh.triangles:
        lines.append(f"3 {t[0]} {t[1]} {t[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_ply(path, symmetries=None):
    """Read an ASCII PLY with plain x/y/z vertices and index-list faces.

    Polygon faces are fan-triangulated.  Binary files and extra vertex
    properties raise UnsupportedPly; structural problems raise ParseError
    with the offending line number.
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", line=1)
    n_vertex = n_face = None
    vertex_props = []
    current = None
    body_start = None
    for ln, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1:2] != ["ascii"]:
                raise UnsupportedPly(f"only ascii format is supported, got {raw.strip()!r}")
        elif parts[0] == "element":
            if len(parts) != 3:
                raise ParseError("malformed element declaration", line=ln)
            current = parts[1]
            if current == "vertex":
                n_vertex = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
            else:
                raise UnsupportedPly(f"unsupported element {parts[1]!r}")
        elif parts[0] == "property":
            if current == "vertex":
                vertex_props.append(parts[-1])
            elif current == "face":
                if parts[1] != "list" or parts[-1] != "vertex_indices":
                    raise UnsupportedPly(f"unsupported face property {raw.strip()!r}")
        elif parts[0] == "end_header":
            body_start = ln
            break
        else:
            raise ParseError(f"unexpected header line {raw.strip()!r}", line=ln)
    if body_start is None:
        raise ParseError("missing end_header", line=len(lines))
    if vertex_props != ["x", "y", "z"]:
        raise UnsupportedPly(f"vertex properties must be x y z, got {vertex_props}")
    if n_vertex is None or n_face is None:
        raise ParseError("missing vertex or face element", line=body_start)

    body = lines[body_start:]
    if len(body) < n_vertex + n_face:
        raise ParseError(
            f"expected {n_vertex + n_face} body lines, found {len(body)}",
            line=len(lines),
        )
    vertices = np.empty((n_vertex, 3))
    for i in range(n_vertex):
        ln = body_start + 1 + i
        parts = body[i].split()
        if len(parts) != 3:
            raise ParseError(f"vertex needs 3 coordinates, got {len(parts)}", line=ln)
        try:
            vertices[i] = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"bad vertex coordinates {body[i].strip()!r}", line=ln)
    triangles = []
    for i in range(n_face):
        ln = body_start + 1 + n_vertex + i
        parts = body[n_vertex + i].split()
        try:
            count = int(parts[0])
            idx = [int(p) for p in parts[1 : 1 + count]]
        except (ValueError, IndexError):
            raise ParseError(f"bad face row {body[n_vertex + i].strip()!r}", line=ln)
        if count < 3 or len(parts) != count + 1:
            raise ParseError("face row length does not match its count", line=ln)
        for j in range(1, count - 1):  # fan triangulation
            triangles.append([idx[0], idx[j], idx[j + 1]])
    triangles = np.array(triangles, dtype=np.int64)
    return Mesh(
        vertices,
        triangles,
        mesh_diameter(vertices),
        symmetries or SymmetrySet.identity_only(),
    )


# ---------------------------------------------------------------------------
# BOP-style result CSV
# ---------------------------------------------------------------------------

_CSV_HEADER = "scene_id,im_id,obj_id,score,R,t,time"


@dataclass(frozen=True)
class BopRow:
    """One pose estimate in BOP result convention (translation in meters
    here; millimeters only inside the file)."""

    scene_id: int
    image_id: int
    object_id: int
    score: float
    pose: Pose
    time: float = -1.0


def _fmt_component(value):
    # integers print bare (1, 0, 1000); everything else shortest round-trip
    as_int = int(value)
    return str(as_int) if as_int == value else repr(float(value))


def write_bop_csv(path, rows):
    lines = [_CSV_HEADER]
    for row in rows:
        rot = row.pose.rotation_matrix().reshape(-1)
        t_mm = row.pose.t * 1000.0
        lines.append(
            ",".join(
                [
                    str(row.scene_id),
                    str(row.image_id),
                    str(row.object_id),
                    repr(float(row.score)),
                    " ".join(_fmt_component(v) for v in rot),
                    " ".join(_fmt_component(v) for v in t_mm),
                    repr(float(row.time)),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_bop_csv(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != _CSV_HEADER:
        raise ParseError(f"expected header {_CSV_HEADER!r}", line=1)
    rows = []
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 7:
            raise ParseError(f"expected 7 fields, got {len(parts)}", line=ln)
        try:
            scene_id, image_id, object_id = (int(p) for p in parts[:3])
            score = float(parts[3])
            rot = np.array([float(v) for v in parts[4].split()])
            t_mm = np.array([float(v) for v in parts[5].split()])
            time = float(parts[6])
        except ValueError:
            raise ParseError(f"non-numeric field in {raw!r}", line=ln)
        if rot.size != 9:
            raise ParseError(f"R needs 9 values, got {rot.size}", line=ln)
        if t_mm.size != 3:
            raise ParseError(f"t needs 3 values, got {t_mm.size}", line=ln)
        pose = Pose.from_matrix(rot.reshape(3, 3), t_mm / 1000.0)
        rows.append(BopRow(scene_id, image_id, object_id, score, pose, time))
    return rows


# ---------------------------------------------------------------------------
# JSON config + digest
# ---------------------------------------------------------------------------

def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(config, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(config).__name__}")
    return config


def config_digest(config):
    """SHA-256 over the canonical (sorted, compact) JSON encoding."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# scenario bundle directories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioBundle:
    mesh: Mesh
    records: tuple
    manifest: dict = None


def pose_to_json(pose):
    return {"q": [float(v) for v in pose.q], "t": [float(v) for v in pose.t]}


def pose_from_json(obj):
    return Pose(np.array(obj["q"], dtype=float), np.array(obj["t"], dtype=float))


def intrinsics_to_json(k):
    return {
        "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
        "width": k.width, "height": k.height,
    }


def intrinsics_from_json(obj):
    return CameraIntrinsics(
        obj["fx"], obj["fy"], obj["cx"], obj["cy"], obj["width"], obj["height"]
    )


def _record_to_json(record, depth_file):
    c = record.correspondences
    return {
        "scene_id": record.scene_id,
        "image_id": record.image_id,
        "object_id": record.object_id,
        "gt_pose": pose_to_json(record.gt_pose),
        "k": intrinsics_to_json(record.k),
        "x3d": c.x3d.tolist(),
        "x2d": c.x2d.tolist(),
        "w2d": c.w2d.tolist(),
        "gt_x3d": record.gt_x3d.tolist(),
        "depth_file": depth_file,
    }


def _record_from_json(obj, directory):
    depth = None
    if obj.get("depth_file"):
        depth = read_depth_map(Path(directory) / obj["depth_file"])
    return InstanceRecord(
        obj["scene_id"],
        obj["image_id"],
        obj["object_id"],
        pose_from_json(obj["gt_pose"]),
        intrinsics_from_json(obj["k"]),
        CorrespondenceSet(
            np.array(obj["x3d"], dtype=float),
            np.array(obj["x2d"], dtype=float),
            np.array(obj["w2d"], dtype=float),
        ),
        np.array(obj["gt_x3d"], dtype=float),
        depth,
    )


def symmetries_to_json(sym):
    return {
        "discrete": [
            {"rotation": rot.tolist(), "translation": trans.tolist()}
            for rot, trans in sym.discrete
        ],
        "continuous_axes": [axis.tolist() for axis in sym.continuous_axes],
    }


def symmetries_from_json(obj):
    return SymmetrySet(
        discrete=tuple(
            (np.array(d["rotation"]), np.array(d["translation"]))
            for d in obj["discrete"]
        ),
        continuous_axes=tuple(np.array(a) for a in obj["continuous_axes"]),
    )


def save_bundle(directory, mesh, records, manifest=None):
    """Write a scenario directory: mesh.ply, depth rasters, instances.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_ply(directory / "mesh.ply", mesh)
    instances = []
    for record in records:
        depth_file = None
        if record.observed_depth is not None:
            depth_file = (
                f"depth_{record.scene_id:04d}_{record.image_id:04d}"
                f"_{record.object_id:04d}.dpth"
            )
            write_depth_map(directory / depth_file, record.observed_depth)
        instances.append(_record_to_json(record, depth_file))
    doc = {
        "manifest": manifest,
        "mesh_file": "mesh.ply",
        "diameter": mesh.diameter,
        "symmetries": symmetries_to_json(mesh.symmetries),
        "instances": instances,
    }
    (directory / "instances.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_bundle(directory):
    directory = Path(directory)
    path = directory / "instances.json"
    if not path.exists():
        raise ParseError(f"{path} does not exist")
    doc = json.loads(path.read_text())
    symmetries = symmetries_from_json(doc["symmetries"])
    mesh = load_ply(directory / doc["mesh_file"], symmetries=symmetries)
    records = tuple(_record_from_json(obj, directory) for obj in doc["instances"])
    return ScenarioBundle(mesh, records, doc.get("manifest"))
