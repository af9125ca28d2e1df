import numpy as np
import pytest

from probpnp.errors import CheiralityViolation, EmptyUnion
from probpnp.geometry import CameraIntrinsics, Pose, SymmetrySet, so3_exp
from probpnp.metrics import (
    MetricConfig,
    MetricReport,
    add_and_adds,
    mspd,
    mssd,
    recall_and_ar,
    vsd,
)
from probpnp.render import DepthMap, make_mesh, render_depth, visibility_mask
from conftest import default_camera


# Independent oracles, written before the assertions that use them.  All are
# deliberately naive: plain double loops and per-pixel scans.


def brute_add_adds(vertices, gt, est):
    gt_pts = [gt.apply(v.reshape(1, 3))[0] for v in vertices]
    est_pts = [est.apply(v.reshape(1, 3))[0] for v in vertices]
    add = np.mean([np.linalg.norm(e - g) for e, g in zip(est_pts, gt_pts)])
    adds = np.mean(
        [min(np.linalg.norm(e - g) for g in gt_pts) for e in est_pts]
    )
    return float(add), float(adds)


def brute_sym_extreme(vertices, sym, gt, est, steps, project=None):
    est_pts = est.apply(vertices)
    if project is not None:
        est_pts = project(est, vertices)
    best = np.inf
    for rot, trans in sym.transforms(steps):
        mapped = vertices @ rot.T + trans
        gt_pts = gt.apply(mapped) if project is None else project(gt, mapped)
        worst = max(
            np.linalg.norm(est_pts[i] - gt_pts[i]) for i in range(len(vertices))
        )
        best = min(best, float(worst))
    return best


def pixel_project(k):
    def project(pose, pts):
        cam = pose.apply(pts)
        return np.stack(
            [k.fx * cam[:, 0] / cam[:, 2] + k.cx, k.fy * cam[:, 1] / cam[:, 2] + k.cy],
            axis=1,
        )

    return project


def recompute_vsd(mesh, gt, est, k, scene, tau, tol=0.015):
    gt_d = render_depth(mesh, gt, k).depths
    est_d = render_depth(mesh, est, k).depths
    scene_d = scene.depths
    union = 0
    mismatched = 0
    for row in range(k.height):
        for col in range(k.width):
            g, e, s = gt_d[row, col], est_d[row, col], scene_d[row, col]
            vis_g = g > 0 and (s <= 0 or g <= s + tol)
            vis_e = e > 0 and (s <= 0 or e <= s + tol)
            if not (vis_g or vis_e):
                continue
            union += 1
            if not (vis_g and vis_e and abs(e - g) < tau):
                mismatched += 1
    return mismatched / union


def cube_mesh(size=0.1):
    h = size / 2.0
    vertices = np.array(
        [
            [-h, -h, -h],
            [h, -h, -h],
            [h, h, -h],
            [-h, h, -h],
            [-h, -h, h],
            [h, -h, h],
            [h, h, h],
            [-h, h, h],
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
    return make_mesh(vertices, triangles)


def tetra_vertices(scale=0.1):
    return scale * np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.1, -0.05], [0.2, 0.9, 0.1], [-0.1, 0.3, 0.8]]
    )


def small_camera():
    return CameraIntrinsics(120.0, 120.0, 64.0, 48.0, 128, 96)


def pose(rotvec, t):
    return Pose.from_matrix(so3_exp(np.asarray(rotvec, dtype=float)), np.asarray(t, dtype=float))


IDENTITY_SYM = SymmetrySet()


class TestMetricConfig:
    def test_default_grids(self):
        cfg = MetricConfig()
        fractions = tuple(0.05 * i for i in range(1, 11))
        assert cfg.vsd_taus == pytest.approx(fractions, abs=1e-12)
        assert cfg.vsd_thresholds == pytest.approx(fractions, abs=1e-12)
        assert cfg.mssd_thresholds == pytest.approx(fractions, abs=1e-12)
        assert cfg.mspd_thresholds == pytest.approx(tuple(5.0 * i for i in range(1, 11)))
        assert cfg.add_threshold == 0.1
        assert cfg.continuous_steps == 64
        assert cfg.visib_tolerance == 0.015
        assert cfg.image_width == 640

    def test_rejects_empty_grid(self):
        with pytest.raises(ValueError):
            MetricConfig(vsd_taus=())

    def test_rejects_non_increasing(self):
        with pytest.raises(ValueError):
            MetricConfig(mssd_thresholds=(0.1, 0.1, 0.2))
        with pytest.raises(ValueError):
            MetricConfig(mspd_thresholds=(10.0, 5.0))

    def test_rejects_nonpositive_values(self):
        with pytest.raises(ValueError):
            MetricConfig(vsd_thresholds=(0.0, 0.1))
        with pytest.raises(ValueError):
            MetricConfig(add_threshold=0.0)
        with pytest.raises(ValueError):
            MetricConfig(continuous_steps=0)
        with pytest.raises(ValueError):
            MetricConfig(visib_tolerance=-0.01)
        with pytest.raises(ValueError):
            MetricConfig(image_width=0)


class TestAddAndAdds:
    def test_equal_poses_are_zero(self):
        verts = tetra_vertices()
        p = pose([0.2, -0.1, 0.4], [0.0, 0.1, 1.2])
        add, adds = add_and_adds(verts, p, p)
        assert add == 0.0
        assert adds == 0.0

    def test_pure_translation(self):
        verts = tetra_vertices()
        gt = pose([0.1, 0.0, 0.0], [0.0, 0.0, 1.0])
        est = Pose.from_matrix(gt.rotation_matrix(), gt.t + np.array([0.01, 0.0, 0.0]))
        add, adds = add_and_adds(verts, gt, est)
        assert add == pytest.approx(0.01, rel=1e-12)
        assert adds <= add + 1e-15

    def test_cube_quarter_turn_matches_brute_force(self):
        verts = cube_mesh(0.1).vertices
        gt = pose([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
        est = pose([0.0, 0.0, np.pi / 2.0], [0.0, 0.0, 1.0])
        add, adds = add_and_adds(verts, gt, est)
        b_add, b_adds = brute_add_adds(verts, gt, est)
        assert add == pytest.approx(b_add, rel=1e-12)
        assert adds == pytest.approx(b_adds, rel=1e-12, abs=1e-15)
        # the quarter turn permutes cube vertices, so matching hides it
        assert adds == pytest.approx(0.0, abs=1e-12)
        assert add > 0.05

    def test_random_instance_matches_brute_force(self):
        rng = np.random.default_rng(9)
        verts = rng.normal(size=(23, 3)) * 0.08
        gt = pose(rng.normal(size=3) * 0.4, [0.02, -0.01, 1.1])
        est = pose(rng.normal(size=3) * 0.4, [0.0, 0.03, 1.05])
        add, adds = add_and_adds(verts, gt, est)
        b_add, b_adds = brute_add_adds(verts, gt, est)
        assert add == pytest.approx(b_add, rel=1e-12)
        assert adds == pytest.approx(b_adds, rel=1e-12)
        assert adds <= add + 1e-15

    def test_chunked_sweep_matches_brute_force(self):
        rng = np.random.default_rng(3)
        verts = rng.normal(size=(600, 3)) * 0.05  # forces multiple chunks
        gt = pose([0.0, 0.2, 0.0], [0.0, 0.0, 1.0])
        est = pose([0.1, 0.2, 0.0], [0.01, 0.0, 1.0])
        _, adds = add_and_adds(verts, gt, est)
        gt_pts = gt.apply(verts)
        est_pts = est.apply(verts)
        oracle = np.mean(
            [min(np.linalg.norm(e - g) for g in gt_pts) for e in est_pts]
        )
        assert adds == pytest.approx(oracle, rel=1e-12)

    def test_single_vertex(self):
        verts = np.array([[0.0, 0.0, 0.0]])
        gt = pose([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
        est = pose([0.0, 0.0, 0.0], [0.0, 0.0, 1.2])
        add, adds = add_and_adds(verts, gt, est)
        assert add == pytest.approx(0.2, rel=1e-12)
        assert adds == pytest.approx(0.2, rel=1e-12)

    def test_rejects_bad_shapes(self):
        p = pose([0.0] * 3, [0.0, 0.0, 1.0])
        with pytest.raises(ValueError):
            add_and_adds(np.zeros((0, 3)), p, p)
        with pytest.raises(ValueError):
            add_and_adds(np.zeros((4, 2)), p, p)


class TestMssd:
    def test_equal_poses(self):
        sym = SymmetrySet(discrete=((so3_exp(np.array([0.0, 0.0, np.pi])), np.zeros(3)),))
        p = pose([0.3, 0.1, -0.2], [0.0, 0.0, 1.0])
        assert mssd(tetra_vertices(), sym, p, p) == 0.0

    def test_symmetry_absorbs_half_turn(self):
        flip = so3_exp(np.array([0.0, 0.0, np.pi]))
        sym = SymmetrySet(discrete=((flip, np.zeros(3)),))
        verts = cube_mesh(0.1).vertices * np.array([1.0, 0.5, 0.25])
        gt = pose([0.2, -0.1, 0.3], [0.0, 0.05, 1.1])
        est = Pose.from_matrix(gt.rotation_matrix() @ flip, gt.t)
        assert mssd(verts, sym, gt, est) == pytest.approx(0.0, abs=1e-12)

    def test_asymmetric_matches_brute_force(self):
        rng = np.random.default_rng(4)
        verts = tetra_vertices()
        sym = SymmetrySet(
            discrete=(
                (so3_exp(np.array([0.0, 0.0, np.pi / 2.0])), np.zeros(3)),
                (so3_exp(np.array([0.0, np.pi, 0.0])), np.array([0.0, 0.0, 0.01])),
            )
        )
        gt = pose(rng.normal(size=3) * 0.5, [0.0, 0.0, 1.0])
        est = pose(rng.normal(size=3) * 0.5, [0.02, -0.01, 1.05])
        got = mssd(verts, sym, gt, est)
        assert got == pytest.approx(brute_sym_extreme(verts, sym, gt, est, 64), rel=1e-12)

    def test_identity_only_equals_max_pointwise(self):
        rng = np.random.default_rng(8)
        verts = rng.normal(size=(17, 3)) * 0.06
        gt = pose([0.1, 0.2, 0.3], [0.0, 0.0, 1.0])
        est = pose([0.15, 0.2, 0.3], [0.0, 0.01, 1.0])
        expected = max(
            np.linalg.norm(est.apply(v.reshape(1, 3))[0] - gt.apply(v.reshape(1, 3))[0])
            for v in verts
        )
        assert mssd(verts, IDENTITY_SYM, gt, est) == pytest.approx(expected, rel=1e-12)

    def test_invariant_to_symmetry_composed_gt(self):
        flip = so3_exp(np.array([0.0, 0.0, np.pi]))
        sym = SymmetrySet(discrete=((flip, np.zeros(3)),))
        verts = tetra_vertices()
        gt = pose([0.3, -0.2, 0.1], [0.01, 0.0, 1.0])
        est = pose([0.25, -0.2, 0.15], [0.0, 0.0, 1.02])
        gt_flipped = Pose.from_matrix(gt.rotation_matrix() @ flip, gt.t)
        assert mssd(verts, sym, gt, est) == pytest.approx(
            mssd(verts, sym, gt_flipped, est), rel=1e-9
        )


class TestMspd:
    def test_equal_poses(self):
        k = default_camera()
        p = pose([0.1, 0.0, 0.0], [0.0, 0.0, 1.0])
        assert mspd(tetra_vertices(), IDENTITY_SYM, p, p, k) == 0.0

    def test_cylinder_discretization_bound(self):
        k = default_camera()
        rng = np.random.default_rng(2)
        theta = rng.uniform(0.0, 2.0 * np.pi, 60)
        verts = np.stack(
            [0.06 * np.cos(theta), 0.06 * np.sin(theta), rng.uniform(-0.1, 0.1, 60)],
            axis=1,
        )
        sym = SymmetrySet(continuous_axes=((0.0, 0.0, 1.0),))
        gt = pose([0.3, -0.2, 0.1], [0.05, -0.02, 1.1])
        px = pixel_project(k)(gt, verts)
        span = max(
            np.linalg.norm(px[i] - px[j])
            for i in range(len(px))
            for j in range(len(px))
        )
        bound = span * np.sin(np.pi / 64.0)
        for alpha in (0.013, 0.8, 2.4, np.pi / 64.0):
            est = Pose.from_matrix(
                gt.rotation_matrix() @ so3_exp(np.array([0.0, 0.0, alpha])), gt.t
            )
            assert mspd(verts, sym, gt, est, k, continuous_steps=64) <= bound

    def test_asymmetric_matches_brute_force(self):
        k = default_camera()
        rng = np.random.default_rng(6)
        verts = tetra_vertices()
        sym = SymmetrySet(
            discrete=((so3_exp(np.array([np.pi / 3.0, 0.0, 0.0])), np.zeros(3)),)
        )
        gt = pose(rng.normal(size=3) * 0.4, [0.0, 0.02, 1.0])
        est = pose(rng.normal(size=3) * 0.4, [0.01, 0.0, 1.1])
        got = mspd(verts, sym, gt, est, k)
        oracle = brute_sym_extreme(verts, sym, gt, est, 64, project=pixel_project(k))
        assert got == pytest.approx(oracle, rel=1e-12)

    def test_invariant_to_symmetry_composed_gt(self):
        k = default_camera()
        flip = so3_exp(np.array([np.pi, 0.0, 0.0]))
        sym = SymmetrySet(discrete=((flip, np.zeros(3)),))
        verts = tetra_vertices()
        gt = pose([0.2, 0.1, 0.0], [0.0, 0.0, 1.0])
        est = pose([0.22, 0.1, 0.0], [0.0, 0.0, 1.01])
        gt_flipped = Pose.from_matrix(gt.rotation_matrix() @ flip, gt.t)
        assert mspd(verts, sym, gt, est, k) == pytest.approx(
            mspd(verts, sym, gt_flipped, est, k), rel=1e-9
        )

    def test_behind_camera_raises(self):
        k = default_camera()
        gt = pose([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
        behind = pose([0.0, 0.0, 0.0], [0.0, 0.0, -1.0])
        with pytest.raises(CheiralityViolation):
            mspd(tetra_vertices(), IDENTITY_SYM, gt, behind, k)


class TestVsd:
    def quad(self, half=0.08):
        return make_mesh(
            np.array(
                [[-half, -half, 0.0], [half, -half, 0.0], [half, half, 0.0], [-half, half, 0.0]]
            ),
            np.array([[0, 1, 2], [0, 2, 3]]),
        )

    def empty_scene(self, k):
        return DepthMap(k.width, k.height, np.zeros((k.height, k.width)))

    def test_equal_poses_against_object_scene(self):
        k = small_camera()
        mesh = cube_mesh(0.1)
        gt = pose([0.2, 0.1, 0.0], [0.0, 0.0, 0.9])
        scene = render_depth(mesh, gt, k)
        assert vsd(mesh, gt, gt, k, scene, tau=0.02) == 0.0

    def test_disjoint_renders(self):
        k = small_camera()
        mesh = cube_mesh(0.06)
        gt = pose([0.0, 0.0, 0.0], [-0.15, 0.0, 1.0])
        est = pose([0.0, 0.0, 0.0], [0.15, 0.0, 1.0])
        assert vsd(mesh, gt, est, k, self.empty_scene(k), tau=0.02) == 1.0

    def test_lateral_shift_matches_pixel_oracle(self):
        k = small_camera()
        mesh = self.quad()
        gt = pose([0.0] * 3, [0.0, 0.0, 1.0])
        est = pose([0.0] * 3, [0.05, 0.0, 1.0])
        scene = self.empty_scene(k)
        got = vsd(mesh, gt, est, k, scene, tau=0.02)
        assert got == pytest.approx(recompute_vsd(mesh, gt, est, k, scene, 0.02), abs=1e-15)
        assert 0.0 < got < 1.0

    def test_ray_shift_small_versus_large(self):
        k = small_camera()
        mesh = cube_mesh(0.1)
        gt = pose([0.1, -0.2, 0.05], [0.0, 0.0, 1.0])
        scene = self.empty_scene(k)
        tau = 0.02
        errors = {}
        for label, shift in (("half", tau / 2.0), ("double", 2.0 * tau)):
            est = Pose.from_matrix(gt.rotation_matrix(), gt.t + np.array([0.0, 0.0, shift]))
            err = vsd(mesh, gt, est, k, scene, tau)
            assert err == pytest.approx(
                recompute_vsd(mesh, gt, est, k, scene, tau), abs=1e-15
            )
            errors[label] = err
        assert errors["half"] < 0.5
        assert errors["double"] > 0.9
        assert errors["half"] < errors["double"]

    def test_strictness_at_tau(self):
        # depths differ by almost exactly tau; just under must count as
        # agreement, just over must not
        k = small_camera()
        mesh = self.quad()
        gt = pose([0.0] * 3, [0.0, 0.0, 1.0])
        scene = self.empty_scene(k)
        tau = 0.02
        under = Pose.from_matrix(np.eye(3), gt.t + np.array([0.0, 0.0, tau * (1.0 - 1e-4)]))
        over = Pose.from_matrix(np.eye(3), gt.t + np.array([0.0, 0.0, tau * (1.0 + 1e-4)]))
        assert vsd(mesh, gt, under, k, scene, tau) < 0.5
        assert vsd(mesh, gt, over, k, scene, tau) == 1.0

    def test_occluded_scene_matches_pixel_oracle(self):
        k = small_camera()
        mesh = cube_mesh(0.1)
        gt = pose([0.1, 0.0, 0.0], [0.0, 0.0, 1.0])
        est = pose([0.1, 0.0, 0.0], [0.02, 0.0, 1.0])
        # occluder plane covering the left half of the image, closer than the cube
        depths = np.zeros((k.height, k.width))
        depths[:, : k.width // 2] = 0.5
        scene = DepthMap(k.width, k.height, depths)
        got = vsd(mesh, gt, est, k, scene, tau=0.02)
        assert got == pytest.approx(recompute_vsd(mesh, gt, est, k, scene, 0.02), abs=1e-15)

    def test_empty_union_raises(self):
        k = small_camera()
        mesh = cube_mesh(0.05)
        off = pose([0.0] * 3, [5.0, 0.0, 1.0])
        with pytest.raises(EmptyUnion):
            vsd(mesh, off, off, k, self.empty_scene(k), tau=0.02)

    def test_resolution_mismatch_rejected(self):
        k = small_camera()
        mesh = cube_mesh(0.1)
        p = pose([0.0] * 3, [0.0, 0.0, 1.0])
        wrong = DepthMap(64, 48, np.zeros((48, 64)))
        with pytest.raises(ValueError):
            vsd(mesh, p, p, k, wrong, tau=0.02)

    def test_nonpositive_tau_rejected(self):
        k = small_camera()
        mesh = cube_mesh(0.1)
        p = pose([0.0] * 3, [0.0, 0.0, 1.0])
        with pytest.raises(ValueError):
            vsd(mesh, p, p, k, self.empty_scene(k), tau=0.0)


def uniform_vsd_rows(count, value, taus):
    return [[value] * len(taus) for _ in range(count)]


class TestRecallAndAr:
    def test_mssd_hand_count(self):
        cfg = MetricConfig()
        diameter = 0.24
        n = 3
        report = recall_and_ar(
            vsd_errors=uniform_vsd_rows(n, 0.0, cfg.vsd_taus),
            mssd_errors=[0.01 * diameter, 0.2 * diameter, 0.6 * diameter],
            mspd_errors=[0.0] * n,
            add_errors=[0.0] * n,
            adds_errors=[0.0] * n,
            config=cfg,
            diameters=[diameter] * n,
        )
        # thresholds 0.05..0.5: first instance passes all 10, the 0.2 one
        # passes 0.2..0.5 inclusive (7), the last none
        assert report.mssd_recall == pytest.approx(17.0 / 30.0, abs=1e-12)

    def test_published_single_view_row(self):
        cfg = MetricConfig()
        taus = cfg.vsd_taus
        vsd_errors = (
            uniform_vsd_rows(64, 0.01, taus)
            + [[0.0] * 5 + [1.0] * 5]
            + uniform_vsd_rows(35, 1.0, taus)
        )
        mspd_errors = [1.0] * 87 + [10.0] + [1000.0] * 12
        mssd_errors = [0.01] * 83 + [0.3] + [9.9] * 16
        report = recall_and_ar(
            vsd_errors=vsd_errors,
            mssd_errors=mssd_errors,
            mspd_errors=mspd_errors,
            add_errors=[0.0] * 100,
            adds_errors=[0.0] * 100,
            config=cfg,
            diameters=[1.0] * 100,
        )
        assert report.mspd_recall == pytest.approx(0.879, abs=1e-12)
        assert report.mssd_recall == pytest.approx(0.835, abs=1e-12)
        assert report.vsd_recall == pytest.approx(0.645, abs=1e-12)
        assert round(report.ar, 3) == 0.786

    def test_all_zero_errors(self):
        cfg = MetricConfig()
        n = 5
        report = recall_and_ar(
            vsd_errors=uniform_vsd_rows(n, 0.0, cfg.vsd_taus),
            mssd_errors=[0.0] * n,
            mspd_errors=[0.0] * n,
            add_errors=[0.0] * n,
            adds_errors=[0.0] * n,
            config=cfg,
            diameters=[0.2] * n,
        )
        for recall in (
            report.vsd_recall,
            report.mssd_recall,
            report.mspd_recall,
            report.add_recall,
            report.adds_recall,
        ):
            assert recall == 1.0
        assert report.ar == 1.0

    def test_correctness_is_non_strict(self):
        cfg = MetricConfig()
        report = recall_and_ar(
            vsd_errors=uniform_vsd_rows(1, 0.0, cfg.vsd_taus),
            mssd_errors=[0.0],
            mspd_errors=[5.0],  # exactly the smallest threshold
            add_errors=[0.0],
            adds_errors=[0.0],
            config=cfg,
            diameters=[1.0],
        )
        assert report.mspd_recall == 1.0

    def test_recall_non_decreasing_in_threshold(self):
        rng = np.random.default_rng(12)
        errors = rng.uniform(0.0, 0.6, 40)
        thresholds = MetricConfig().mssd_thresholds
        fractions = [float(np.mean(errors <= t)) for t in thresholds]
        assert all(b >= a for a, b in zip(fractions, fractions[1:]))

    def test_mspd_thresholds_scale_with_image_width(self):
        narrow = MetricConfig()
        wide = MetricConfig(image_width=1280)
        args = dict(
            vsd_errors=uniform_vsd_rows(1, 0.0, narrow.vsd_taus),
            mssd_errors=[0.0],
            mspd_errors=[12.0],
            add_errors=[0.0],
            adds_errors=[0.0],
            diameters=[1.0],
        )
        at_640 = recall_and_ar(config=narrow, **args)
        at_1280 = recall_and_ar(config=wide, **args)
        # 12 px passes thresholds 15..50 at width 640 but 10..100 at 1280
        assert at_640.mspd_recall == pytest.approx(8.0 / 10.0, abs=1e-12)
        assert at_1280.mspd_recall == pytest.approx(9.0 / 10.0, abs=1e-12)

    def test_diameter_scales_mssd_and_add(self):
        cfg = MetricConfig()
        args = dict(
            vsd_errors=uniform_vsd_rows(1, 0.0, cfg.vsd_taus),
            mssd_errors=[0.03],
            mspd_errors=[0.0],
            add_errors=[0.03],
            adds_errors=[0.03],
            config=cfg,
        )
        small = recall_and_ar(diameters=[0.1], **args)
        large = recall_and_ar(diameters=[1.0], **args)
        assert small.mssd_recall < large.mssd_recall
        assert small.add_recall == 0.0 and large.add_recall == 1.0
        assert small.adds_recall == 0.0 and large.adds_recall == 1.0

    def test_rejects_mismatched_lengths(self):
        cfg = MetricConfig()
        with pytest.raises(ValueError):
            recall_and_ar(
                vsd_errors=uniform_vsd_rows(2, 0.0, cfg.vsd_taus),
                mssd_errors=[0.0],
                mspd_errors=[0.0, 0.0],
                add_errors=[0.0, 0.0],
                adds_errors=[0.0, 0.0],
                config=cfg,
                diameters=[0.2, 0.2],
            )

    def test_rejects_short_vsd_rows(self):
        cfg = MetricConfig()
        with pytest.raises(ValueError):
            recall_and_ar(
                vsd_errors=[[0.0, 0.0]],
                mssd_errors=[0.0],
                mspd_errors=[0.0],
                add_errors=[0.0],
                adds_errors=[0.0],
                config=cfg,
                diameters=[0.2],
            )


class TestMetricReport:
    def build(self, **overrides):
        fields = dict(
            vsd_errors=((0.1,),),
            mssd_errors=(0.01,),
            mspd_errors=(2.0,),
            add_errors=(0.01,),
            adds_errors=(0.01,),
            vsd_recall=0.9,
            mssd_recall=0.6,
            mspd_recall=0.3,
            add_recall=1.0,
            adds_recall=1.0,
            ar=0.6,
        )
        fields.update(overrides)
        return MetricReport(**fields)

    def test_consistent_report_accepted(self):
        report = self.build()
        assert report.ar == pytest.approx(0.6)

    def test_rejects_ar_not_mean(self):
        with pytest.raises(ValueError):
            self.build(ar=0.7)

    def test_rejects_out_of_range_recall(self):
        with pytest.raises(ValueError):
            self.build(vsd_recall=1.5, ar=(1.5 + 0.6 + 0.3) / 3.0)
