"""Pose-error metrics and threshold-sweep aggregation.

Four error measures are computed per instance: average model-point
distance with and without nearest-point matching (add/adds), maximum
symmetry-aware surface distance (mssd), maximum symmetry-aware projected
distance (mspd), and the visible-surface depth discrepancy (vsd).
Correctness is judged by sweeping each error over a threshold grid and a
single recall number averages the vsd, mssd and mspd sweeps.

Symmetry handling for mssd/mspd minimizes over an explicit transform
list; continuous axes are discretized.  vsd compares rendered depth
images directly, so object symmetry never enters it.

The threshold grids and the 15 mm visibility tolerance are widely used
evaluation conventions, kept overridable through MetricConfig.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CheiralityViolation, EmptyUnion
from .geometry import EPS_Z, project_points
from .render import render_depth, visibility_mask

_CHUNK = 256  # rows per block in the exact nearest-neighbor sweep


def _fractions(start, stop, step):
    count = int(round((stop - start) / step)) + 1
    return tuple(round(start + i * step, 10) for i in range(count))


@dataclass(frozen=True)
class MetricConfig:
    """Threshold grids and tolerances for the correctness sweeps.

    ``vsd_taus``, ``mssd_thresholds`` and ``add_threshold`` are fractions
    of the object diameter; ``mspd_thresholds`` are pixels at a 640-wide
    image and scale linearly with ``image_width``; ``vsd_thresholds``
    bound the vsd error itself.
    """

    vsd_taus: tuple = field(default_factory=lambda: _fractions(0.05, 0.5, 0.05))
    vsd_thresholds: tuple = field(default_factory=lambda: _fractions(0.05, 0.5, 0.05))
    mssd_thresholds: tuple = field(default_factory=lambda: _fractions(0.05, 0.5, 0.05))
    mspd_thresholds: tuple = field(default_factory=lambda: _fractions(5.0, 50.0, 5.0))
    add_threshold: float = 0.1
    continuous_steps: int = 64
    visib_tolerance: float = 0.015
    image_width: int = 640

    def __post_init__(self):
        grids = {
            "vsd_taus": self.vsd_taus,
            "vsd_thresholds": self.vsd_thresholds,
            "mssd_thresholds": self.mssd_thresholds,
            "mspd_thresholds": self.mspd_thresholds,
        }
        for name, values in grids.items():
            values = tuple(float(v) for v in values)
            if not values:
                raise ValueError(f"{name} must be nonempty")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ValueError(f"{name} must be strictly increasing")
            if values[0] <= 0:
                raise ValueError(f"{name} must be positive")
            object.__setattr__(self, name, values)
        if self.add_threshold <= 0:
            raise ValueError("add_threshold must be positive")
        if self.continuous_steps < 1:
            raise ValueError("continuous_steps must be >= 1")
        if self.visib_tolerance < 0:
            raise ValueError("visib_tolerance must be >= 0")
        if self.image_width < 1:
            raise ValueError("image_width must be >= 1")


@dataclass(frozen=True)
class MetricReport:
    """Raw per-instance errors plus the recall sweep results."""

    vsd_errors: tuple
    mssd_errors: tuple
    mspd_errors: tuple
    add_errors: tuple
    adds_errors: tuple
    vsd_recall: float
    mssd_recall: float
    mspd_recall: float
    add_recall: float
    adds_recall: float
    ar: float

    def __post_init__(self):
        recalls = (
            self.vsd_recall,
            self.mssd_recall,
            self.mspd_recall,
            self.add_recall,
            self.adds_recall,
        )
        if any(not 0.0 <= r <= 1.0 for r in recalls):
            raise ValueError("recalls must lie in [0, 1]")
        mean = (self.vsd_recall + self.mssd_recall + self.mspd_recall) / 3.0
        if abs(self.ar - mean) > 1e-12:
            raise ValueError("ar must average the vsd, mssd and mspd recalls")


def add_and_adds(vertices, gt, est):
    """Mean model-point error, direct and nearest-point matched.

    ``add`` pairs each point with itself; ``adds`` pairs each estimated
    point with the nearest ground-truth point, which is what makes the
    measure blind to symmetry.  Nearest neighbors are exact; the quadratic
    sweep is chunked to keep memory flat.
    """
    vertices = np.asarray(vertices, dtype=float)
    if vertices.ndim != 2 or vertices.shape[1] != 3 or vertices.shape[0] < 1:
        raise ValueError("vertices must have shape (n, 3) with n >= 1")
    gt_pts = gt.apply(vertices)
    est_pts = est.apply(vertices)
    add = float(np.mean(np.linalg.norm(est_pts - gt_pts, axis=1)))
    nearest = np.empty(len(est_pts))
    for start in range(0, len(est_pts), _CHUNK):
        block = est_pts[start : start + _CHUNK]
        d2 = np.sum((block[:, None, :] - gt_pts[None, :, :]) ** 2, axis=2)
        nearest[start : start + _CHUNK] = np.sqrt(d2.min(axis=1))
    return add, float(np.mean(nearest))


def _symmetry_transformed(vertices, sym, continuous_steps):
    for rot, trans in sym.transforms(continuous_steps):
        yield vertices @ rot.T + trans


def mssd(vertices, sym, gt, est, continuous_steps=64):
    """Maximum surface distance, minimized over the symmetry group."""
    vertices = np.asarray(vertices, dtype=float)
    est_pts = est.apply(vertices)
    best = np.inf
    for mapped in _symmetry_transformed(vertices, sym, continuous_steps):
        worst = np.max(np.linalg.norm(est_pts - gt.apply(mapped), axis=1))
        best = min(best, float(worst))
    return best


def mspd(vertices, sym, gt, est, k, continuous_steps=64):
    """Maximum projected distance in pixels, minimized over the symmetry group.

    Raises CheiralityViolation when any required projection would place a
    model point at or behind the camera.
    """
    vertices = np.asarray(vertices, dtype=float)
    est_px = project_points(est, k, vertices)
    best = np.inf
    for mapped in _symmetry_transformed(vertices, sym, continuous_steps):
        gt_px = project_points(gt, k, mapped)
        worst = np.max(np.linalg.norm(est_px - gt_px, axis=1))
        best = min(best, float(worst))
    return best


def vsd(mesh, gt, est, k, scene_depth, tau, visib_tol=0.015):
    """Visible-surface discrepancy between two poses of one mesh.

    Renders both poses, derives per-pose visibility against the scene
    depth, and scores the fraction of pixels in the union of the two
    visibility masks that are not explained by both poses agreeing to
    within ``tau`` meters.  0 means the visible surfaces match, 1 means
    they share nothing.
    """
    if (scene_depth.width, scene_depth.height) != (k.width, k.height):
        raise ValueError("scene depth resolution must match the intrinsics")
    if tau <= 0:
        raise ValueError("tau must be positive")
    gt_depth = render_depth(mesh, gt, k)
    est_depth = render_depth(mesh, est, k)
    visible_gt = visibility_mask(gt_depth, scene_depth, visib_tol)
    visible_est = visibility_mask(est_depth, scene_depth, visib_tol)
    union = visible_gt | visible_est
    total = int(np.count_nonzero(union))
    if total == 0:
        raise EmptyUnion("neither pose is visible in the image")
    both = visible_gt & visible_est
    agree = both & (np.abs(est_depth.depths - gt_depth.depths) < tau)
    return 1.0 - np.count_nonzero(agree) / total


def _sweep_recall(errors, thresholds):
    errors = np.asarray(errors, dtype=float)
    hits = errors[:, None] <= np.asarray(thresholds)[None, :]
    return float(np.count_nonzero(hits)) / hits.size


def recall_and_ar(vsd_errors, mssd_errors, mspd_errors, add_errors, adds_errors, config, diameters):
    """Threshold sweeps over per-instance errors, averaged into one score.

    ``vsd_errors`` holds one error per (instance, tau) following
    ``config.vsd_taus``; the other error sequences hold one value per
    instance.  ``diameters`` gives each instance's object diameter, which
    scales the mssd and add thresholds.  A pose is correct when its error
    is at or below the threshold; the headline score averages the vsd,
    mssd and mspd recalls, while the add/adds recalls at the single
    ``add_threshold`` are reported alongside.
    """
    diameters = np.asarray(diameters, dtype=float)
    n = diameters.size
    vsd_errors = tuple(tuple(float(e) for e in row) for row in vsd_errors)
    for row in vsd_errors:
        if len(row) != len(config.vsd_taus):
            raise ValueError("each vsd row must hold one error per tau")
    lengths = {len(vsd_errors), len(mssd_errors), len(mspd_errors), len(add_errors), len(adds_errors), n}
    if lengths != {n}:
        raise ValueError("all error sequences must have one entry per instance")

    vsd_flat = np.asarray(vsd_errors, dtype=float).reshape(-1)
    vsd_recall = _sweep_recall(vsd_flat, config.vsd_thresholds)

    mssd_arr = np.asarray(mssd_errors, dtype=float)
    thresholds = np.asarray(config.mssd_thresholds)[None, :] * diameters[:, None]
    mssd_recall = float(np.count_nonzero(mssd_arr[:, None] <= thresholds)) / thresholds.size

    scale = config.image_width / 640.0
    mspd_recall = _sweep_recall(
        np.asarray(mspd_errors, dtype=float), [t * scale for t in config.mspd_thresholds]
    )

    add_recall = float(np.count_nonzero(np.asarray(add_errors) <= config.add_threshold * diameters)) / n
    adds_recall = float(np.count_nonzero(np.asarray(adds_errors) <= config.add_threshold * diameters)) / n

    return MetricReport(
        vsd_errors=vsd_errors,
        mssd_errors=tuple(float(e) for e in mssd_errors),
        mspd_errors=tuple(float(e) for e in mspd_errors),
        add_errors=tuple(float(e) for e in add_errors),
        adds_errors=tuple(float(e) for e in adds_errors),
        vsd_recall=vsd_recall,
        mssd_recall=mssd_recall,
        mspd_recall=mspd_recall,
        add_recall=add_recall,
        adds_recall=adds_recall,
        ar=(vsd_recall + mssd_recall + mspd_recall) / 3.0,
    )
