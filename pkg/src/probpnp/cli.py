"""Batch experiment runner.

Subcommands cover the full pipeline on synthetic scenes: ``synth`` writes a
scenario directory, ``solve`` produces BOP-format pose estimates, ``sample``
draws posterior pose samples, ``train-toy`` runs the two-phase trainer,
``eval`` scores predictions against ground truth, and ``refine-depth``
applies the depth-based translation correction.

Conventions shared by every subcommand:

  - ``--config`` names a JSON file; its keys override the built-in defaults
    and command-line flags override both.  The effective config's SHA-256
    lands in the run manifest.
  - ``--seed`` drives every random stream.  Per-instance streams spawn from
    (seed, scene_id, image_id, object_id), so results do not depend on
    ``--jobs`` scheduling.
  - JSON outputs embed the manifest (including a wall-clock stamp); text
    tables embed it without the stamp; CSV and PNG outputs stay pure and a
    ``manifest.json`` sidecar covers them.  Re-running a command with the
    same config and seed reproduces every byte except the wall-clock field.
  - exit codes: 0 success, 2 configuration error, 3 data error.

Set ``PROBPNP_LOG`` (DEBUG/INFO/WARNING/ERROR) for progress logging.
"""

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .distribution import (
    AmisConfig,
    estimate_distribution,
    geodesic_angle,
    sample_poses,
    symmetry_spin_angle,
)
from .errors import (
    CheiralityViolation,
    ConfigError,
    EmptyUnion,
    ProbPnpError,
)
from .geometry import CameraIntrinsics, Pose
from .learning import PhaseConfig, train_toy
from .metrics import MetricConfig, mspd, mssd, add_and_adds, recall_and_ar, vsd
from .render import depth_refine, render_depth
from .reporting import (
    aligned_table,
    angle_histogram_figure,
    loss_curve_figure,
    manifest_header,
    recall_curves_figure,
    save_figure,
)
from .scenario import (
    BopRow,
    NoiseConfig,
    PoseBounds,
    config_digest,
    generate_instance,
    load_bundle,
    load_config,
    make_primitive_mesh,
    read_bop_csv,
    save_bundle,
    write_bop_csv,
)
from .solver import LmConfig, solve

log = logging.getLogger("probpnp")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

DEFAULT_CAMERA = {
    "fx": 500.0, "fy": 500.0, "cx": 320.0, "cy": 240.0, "width": 640, "height": 480,
}

DEFAULTS = {
    "synth": {
        "mesh": {"kind": "tetra"},
        "camera": DEFAULT_CAMERA,
        "instances": 8,
        "points": 24,
        "correspondence_model": "exact",
        "noise": {"pixel_sigma": 1.0, "outlier_fraction": 0.0, "occlusion": None},
        "bounds": {"depth_range": [0.8, 1.6], "lateral": 0.1},
        "with_depth": False,
    },
    "solve": {"keep_fraction": 0.5, "lm": {}},
    "sample": {
        "keep_fraction": 1.0,
        "sampler": {"rounds": 4, "samples_per_round": 128},
        "draws": 512,
        "mesh": {"kind": "cylinder"},
        "camera": DEFAULT_CAMERA,
        "points": 40,
        "noise": {"pixel_sigma": 1.0, "outlier_fraction": 0.0, "occlusion": None},
        "bounds": {"depth_range": [0.8, 1.6], "lateral": 0.1},
    },
    "train-toy": {
        "phase1": {"iterations": 200, "warmup_iters": 50},
        "phase2": {"iterations": 250, "base_lr": 0.0003, "warmup_iters": 50},
        "sampler": {"rounds": 1, "samples_per_round": 256},
    },
    "eval": {"metrics": {}, "resolution": None},
    "refine-depth": {},
}

_CORRESPONDENCE_BY_KIND = {"cylinder": "axis_collapse", "sym_box_180": "symmetry_clone"}


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def merge_config(defaults, override):
    """One-level-deep merge: dict values merge key-wise, others replace."""
    merged = dict(defaults)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def effective_config(command, args):
    config = dict(DEFAULTS[command])
    if args.config:
        config = merge_config(config, load_config(args.config))
    if getattr(args, "keep_fraction", None) is not None:
        config["keep_fraction"] = args.keep_fraction
    if getattr(args, "samples", None) is not None:
        config.setdefault("sampler", {})
        config["sampler"] = {**config["sampler"], "samples_per_round": args.samples}
    if getattr(args, "resolution", None) is not None:
        config["resolution"] = args.resolution
    return config


def build_manifest(command, config, seed):
    return {
        "command": command,
        "config_digest": config_digest(config),
        "seed": int(seed),
        "version": __version__,
        "wall_clock": datetime.now(timezone.utc).isoformat(),
    }


def parse_camera(obj):
    try:
        return CameraIntrinsics(
            float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]),
            int(obj["width"]), int(obj["height"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad camera config: {exc}")


def parse_noise(obj, rng_seed):
    occlusion = obj.get("occlusion")
    half_plane = None
    if occlusion is not None:
        try:
            half_plane = (np.asarray(occlusion["normal"], dtype=float), float(occlusion["offset"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad occlusion config: {exc}")
    try:
        return NoiseConfig(
            pixel_sigma=float(obj.get("pixel_sigma", 1.0)),
            outlier_fraction=float(obj.get("outlier_fraction", 0.0)),
            occlusion_half_plane=half_plane,
            rng_seed=rng_seed,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad noise config: {exc}")


def parse_bounds(obj):
    try:
        return PoseBounds(tuple(float(v) for v in obj["depth_range"]), float(obj["lateral"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad bounds config: {exc}")


def parse_mesh(obj):
    try:
        params = {key: value for key, value in obj.items() if key != "kind"}
        return make_primitive_mesh(obj["kind"], **params)
    except KeyError:
        raise ConfigError("mesh config needs a 'kind'")
    except (TypeError, ValueError, ProbPnpError) as exc:
        raise ConfigError(f"bad mesh config: {exc}")


def parse_phase(obj, phase):
    try:
        return PhaseConfig(phase=phase, **obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad phase{phase} config: {exc}")


def parse_amis(obj):
    try:
        return AmisConfig(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad sampler config: {exc}")


def parse_metric_config(obj):
    try:
        return MetricConfig(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad metrics config: {exc}")


def instance_seed(base, record):
    seq = np.random.SeedSequence(
        [int(base), record.scene_id, record.image_id, record.object_id]
    )
    return int(seq.generate_state(1)[0])


def instance_label(record):
    return f"s{record.scene_id:04d}_i{record.image_id:04d}_o{record.object_id:04d}"


def run_pool(jobs, fn, items):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def write_json(path, manifest, payload):
    doc = {"manifest": manifest, **payload}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_text(path, manifest, body):
    Path(path).write_text(manifest_header(manifest) + body)


def write_sidecar(out_dir, manifest):
    write_json(Path(out_dir) / "manifest.json", manifest, {})


def prepare_out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_scenario(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scenario path {path} does not exist")
    return load_bundle(path)


def match_predictions(records, rows, source):
    by_id = {(r.scene_id, r.image_id, r.object_id): r for r in rows}
    matched = []
    for record in records:
        key = (record.scene_id, record.image_id, record.object_id)
        if key not in by_id:
            raise ProbPnpError(
                f"{source} has no row for instance scene={key[0]} image={key[1]} object={key[2]}"
            )
        matched.append((record, by_id[key]))
    return matched


def fmt(value, digits=4):
    return f"{value:.{digits}f}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    config = effective_config("synth", args)
    manifest = build_manifest("synth", config, args.seed)
    out = prepare_out(args)
    mesh = parse_mesh(config["mesh"])
    k = parse_camera(config["camera"])
    bounds = parse_bounds(config["bounds"])
    count = int(config["instances"])
    if count < 1:
        raise ConfigError("instances must be >= 1")
    model = config["correspondence_model"]

    records = []
    for i in range(count):
        seed_i = int(
            np.random.SeedSequence([int(args.seed), 0, i, 0]).generate_state(1)[0]
        )
        record = generate_instance(
            mesh,
            bounds,
            k,
            int(config["points"]),
            parse_noise(config["noise"], seed_i),
            scene_id=0,
            image_id=i,
            object_id=0,
            correspondence_model=model,
        )
        if config["with_depth"]:
            depth = render_depth(mesh, record.gt_pose, k)
            record = type(record)(
                record.scene_id,
                record.image_id,
                record.object_id,
                record.gt_pose,
                record.k,
                record.correspondences,
                record.gt_x3d,
                depth,
            )
        records.append(record)
        log.info("synth %s: %d correspondences", instance_label(record), len(record.correspondences))
    save_bundle(out, mesh, records, manifest=manifest)
    log.info("wrote scenario with %d instances to %s", count, out)
    return EXIT_OK


def cmd_solve(args):
    config = effective_config("solve", args)
    manifest = build_manifest("solve", config, args.seed)
    out = prepare_out(args)
    bundle = load_scenario(args.scenario)
    try:
        lm = LmConfig(**config["lm"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad lm config: {exc}")
    keep = float(config["keep_fraction"])

    def solve_one(record):
        estimate = solve(record.correspondences, record.k, keep_fraction=keep, lm_config=lm)
        rot_err = geodesic_angle(
            estimate.pose.rotation_matrix(), record.gt_pose.rotation_matrix()
        )
        trans_err = float(np.linalg.norm(estimate.pose.t - record.gt_pose.t))
        log.info("solve %s: cost %.4g", instance_label(record), estimate.final_cost)
        return record, estimate, rot_err, trans_err

    results = run_pool(args.jobs, solve_one, bundle.records)
    results.sort(key=lambda r: (r[0].scene_id, r[0].image_id, r[0].object_id))

    rows = [
        BopRow(rec.scene_id, rec.image_id, rec.object_id, 1.0, est.pose, -1.0)
        for rec, est, _, _ in results
    ]
    write_bop_csv(out / "predictions.csv", rows)
    payload = {
        "results": [
            {
                "scene_id": rec.scene_id,
                "image_id": rec.image_id,
                "object_id": rec.object_id,
                "final_cost": est.final_cost,
                "iterations": est.iterations,
                "converged": est.converged,
                "rotation_error_rad": rot_err,
                "translation_error_m": trans_err,
            }
            for rec, est, rot_err, trans_err in results
        ]
    }
    write_json(out / "solve_report.json", manifest, payload)
    table = aligned_table(
        ["scene", "image", "object", "cost", "iters", "converged", "rot_err_deg", "trans_err_mm"],
        [
            [
                rec.scene_id,
                rec.image_id,
                rec.object_id,
                fmt(est.final_cost),
                est.iterations,
                est.converged,
                fmt(math.degrees(rot_err)),
                fmt(trans_err * 1000.0, 3),
            ]
            for rec, est, rot_err, trans_err in results
        ],
    )
    write_text(out / "solve_report.txt", manifest, table)
    write_sidecar(out, manifest)
    return EXIT_OK


def _sample_records(args, config):
    """Scenario records, or one synthesized instance for --mesh runs."""
    if args.scenario:
        return load_scenario(args.scenario).records, None
    mesh_cfg = dict(config["mesh"])
    if args.mesh:
        mesh_cfg = {"kind": args.mesh}
    mesh = parse_mesh(mesh_cfg)
    model = _CORRESPONDENCE_BY_KIND.get(mesh_cfg["kind"], "exact")
    record = generate_instance(
        mesh,
        parse_bounds(config["bounds"]),
        parse_camera(config["camera"]),
        int(config["points"]),
        parse_noise(config["noise"], int(args.seed)),
        correspondence_model=model,
    )
    return (record,), mesh


def cmd_sample(args):
    config = effective_config("sample", args)
    if args.mesh:
        config = merge_config(config, {"mesh": {"kind": args.mesh}})
    manifest = build_manifest("sample", config, args.seed)
    out = prepare_out(args)
    records, synth_mesh = _sample_records(args, config)
    amis = parse_amis(config["sampler"])
    draws = int(config["draws"])
    mesh = synth_mesh
    if args.scenario:
        mesh = load_scenario(args.scenario).mesh

    axes = mesh.symmetries.continuous_axes if mesh is not None else ()
    spin_axis = axes[0] if axes else None

    def sample_one(record):
        seed_i = instance_seed(args.seed, record)
        try:
            dist = estimate_distribution(
                record.correspondences,
                record.k,
                keep_fraction=float(config["keep_fraction"]),
                amis_config=amis,
                rng_seed=seed_i,
            )
        except ProbPnpError:
            # collapsed coordinate sets reject the closed-form start;
            # refine from the recorded ground truth instead
            dist = estimate_distribution(
                record.correspondences,
                record.k,
                amis_config=amis,
                rng_seed=seed_i,
                init_pose=record.gt_pose,
            )
        poses = sample_poses(dist, draws, rng_seed=seed_i + 1)
        if spin_axis is not None:
            angles = [
                math.degrees(symmetry_spin_angle(dist.mode, p, spin_axis)) for p in poses
            ]
            angle_kind = "spin_about_symmetry_axis"
        else:
            angles = [
                math.degrees(
                    geodesic_angle(dist.mode.rotation_matrix(), p.rotation_matrix())
                )
                for p in poses
            ]
            angle_kind = "geodesic_from_mode"
        log.info("sample %s: ess %.1f", instance_label(record), dist.ess)
        return record, dist, angles, angle_kind

    results = run_pool(args.jobs, sample_one, records)
    results.sort(key=lambda r: (r[0].scene_id, r[0].image_id, r[0].object_id))

    instances = []
    for record, dist, angles, angle_kind in results:
        instances.append(
            {
                "scene_id": record.scene_id,
                "image_id": record.image_id,
                "object_id": record.object_id,
                "log_z": dist.log_z,
                "ess": dist.ess,
                "mode": {"q": dist.mode.q.tolist(), "t": dist.mode.t.tolist()},
                "angle_kind": angle_kind,
                "angles_deg": angles,
                "samples": [
                    {
                        "q": s.pose.q.tolist(),
                        "t": s.pose.t.tolist(),
                        "log_weight": s.log_weight,
                    }
                    for s in dist.samples
                ],
            }
        )
        fig = angle_histogram_figure(
            angles, title=f"{instance_label(record)} ({angle_kind})"
        )
        save_figure(fig, out / f"angle_hist_{instance_label(record)}.png")
    write_json(out / "samples.json", manifest, {"instances": instances})
    table = aligned_table(
        ["scene", "image", "object", "log_z", "ess", "samples", "angle_span_deg"],
        [
            [
                rec.scene_id,
                rec.image_id,
                rec.object_id,
                fmt(dist.log_z),
                fmt(dist.ess, 1),
                len(dist.samples),
                fmt(max(angles) - min(angles), 1) if angles else "0.0",
            ]
            for rec, dist, angles, _ in results
        ],
    )
    write_text(out / "samples.txt", manifest, table)
    write_sidecar(out, manifest)
    return EXIT_OK


def cmd_train_toy(args):
    config = effective_config("train-toy", args)
    manifest = build_manifest("train-toy", config, args.seed)
    out = prepare_out(args)
    bundle = load_scenario(args.scenario)
    phase1 = parse_phase(config["phase1"], 1)
    phase2 = parse_phase(config["phase2"], 2)
    amis = parse_amis(config["sampler"])
    # resolved loss weights belong in the manifest: the config may omit
    # them, and what actually ran is the record of interest
    manifest["phase2_weights"] = {
        "coord_l1": phase2.coord_l1_weight,
        "kl": phase2.kl_weight,
        "rot": phase2.rot_weight,
        "aux": phase2.aux_weight,
    }

    def train_one(record):
        report = train_toy(
            record,
            phase1,
            phase2,
            rng_seed=instance_seed(args.seed, record),
            amis_config=amis,
        )
        log.info(
            "train-toy %s: rot %.4f -> %.4f rad",
            instance_label(record),
            report.initial_rotation_error,
            report.final_rotation_error,
        )
        return record, report

    results = run_pool(args.jobs, train_one, bundle.records)
    results.sort(key=lambda r: (r[0].scene_id, r[0].image_id, r[0].object_id))

    instances = []
    for record, report in results:
        label = instance_label(record)
        instances.append(
            {
                "scene_id": record.scene_id,
                "image_id": record.image_id,
                "object_id": record.object_id,
                "phase_boundaries": list(report.phase_boundaries),
                "initial_rotation_error_rad": report.initial_rotation_error,
                "initial_translation_error_m": report.initial_translation_error,
                "final_rotation_error_rad": report.final_rotation_error,
                "final_translation_error_m": report.final_translation_error,
                "improved": report.final_rotation_error < report.initial_rotation_error,
                "final_global_scale": report.final_params.global_scale,
                "loss_trace_file": f"loss_trace_{label}.csv",
            }
        )
        trace_lines = ["iteration,loss"]
        trace_lines.extend(
            f"{i},{value!r}" for i, value in enumerate(report.loss_trace)
        )
        (out / f"loss_trace_{label}.csv").write_text("\n".join(trace_lines) + "\n")
        fig = loss_curve_figure(
            report.loss_trace, report.phase_boundaries[0], title=f"loss {label}"
        )
        save_figure(fig, out / f"loss_curve_{label}.png")
    improved = sum(1 for i in instances if i["improved"])
    write_json(
        out / "train_report.json",
        manifest,
        {"instances": instances, "improved": improved, "total": len(instances)},
    )
    table = aligned_table(
        ["scene", "image", "object", "init_rot_rad", "final_rot_rad", "improved"],
        [
            [
                i["scene_id"],
                i["image_id"],
                i["object_id"],
                fmt(i["initial_rotation_error_rad"], 5),
                fmt(i["final_rotation_error_rad"], 5),
                i["improved"],
            ]
            for i in instances
        ],
    )
    write_text(out / "train_report.txt", manifest, table)
    write_sidecar(out, manifest)
    return EXIT_OK


def _scaled_camera(k, resolution):
    try:
        width, height = (int(v) for v in str(resolution).lower().split("x"))
    except ValueError:
        raise ConfigError(f"resolution must look like 160x120, got {resolution!r}")
    if width < 1 or height < 1:
        raise ConfigError("resolution sides must be >= 1")
    sx = width / k.width
    sy = height / k.height
    return CameraIntrinsics(k.fx * sx, k.fy * sy, k.cx * sx, k.cy * sy, width, height)


def cmd_eval(args):
    config = effective_config("eval", args)
    manifest = build_manifest("eval", config, args.seed)
    out = prepare_out(args)
    bundle = load_scenario(args.scenario)
    rows = read_bop_csv(args.predictions)
    pairs = match_predictions(bundle.records, rows, args.predictions)
    metric_config = parse_metric_config(config["metrics"])
    mesh = bundle.mesh
    sym = mesh.symmetries
    steps = metric_config.continuous_steps

    def eval_one(pair):
        record, row = pair
        gt, est = record.gt_pose, row.pose
        k = record.k
        if config["resolution"]:
            k = _scaled_camera(k, config["resolution"])
            scene_depth = render_depth(mesh, gt, k)
        elif record.observed_depth is not None:
            scene_depth = record.observed_depth
        else:
            scene_depth = render_depth(mesh, gt, k)
        add_err, adds_err = add_and_adds(mesh.vertices, gt, est)
        mssd_err = mssd(mesh.vertices, sym, gt, est, continuous_steps=steps)
        try:
            mspd_err = mspd(mesh.vertices, sym, gt, est, k, continuous_steps=steps)
        except CheiralityViolation:
            mspd_err = math.inf
        vsd_row = []
        for tau_fraction in metric_config.vsd_taus:
            try:
                vsd_row.append(
                    vsd(
                        mesh,
                        gt,
                        est,
                        k,
                        scene_depth,
                        tau_fraction * mesh.diameter,
                        visib_tol=metric_config.visib_tolerance,
                    )
                )
            except EmptyUnion:
                vsd_row.append(1.0)
        log.info("eval %s: add %.4g", instance_label(record), add_err)
        return record, vsd_row, mssd_err, mspd_err, add_err, adds_err

    results = run_pool(args.jobs, eval_one, pairs)
    results.sort(key=lambda r: (r[0].scene_id, r[0].image_id, r[0].object_id))

    vsd_rows = [r[1] for r in results]
    mssd_errors = [r[2] for r in results]
    mspd_errors = [r[3] for r in results]
    add_errors = [r[4] for r in results]
    adds_errors = [r[5] for r in results]
    diameters = [mesh.diameter] * len(results)
    report = recall_and_ar(
        vsd_rows, mssd_errors, mspd_errors, add_errors, adds_errors,
        metric_config, diameters,
    )

    payload = {
        "ar": report.ar,
        "recalls": {
            "vsd": report.vsd_recall,
            "mssd": report.mssd_recall,
            "mspd": report.mspd_recall,
            "add": report.add_recall,
            "adds": report.adds_recall,
        },
        "instances": [
            {
                "scene_id": rec.scene_id,
                "image_id": rec.image_id,
                "object_id": rec.object_id,
                "vsd_errors": [float(v) for v in vsd_row],
                "mssd_error": float(mssd_err),
                "mspd_error": float(mspd_err),
                "add_error": float(add_err),
                "adds_error": float(adds_err),
            }
            for rec, vsd_row, mssd_err, mspd_err, add_err, adds_err in results
        ],
    }
    write_json(out / "eval_report.json", manifest, payload)

    table_body = aligned_table(
        ["scene", "image", "object", "vsd_mean", "mssd", "mspd_px", "add", "adds"],
        [
            [
                rec.scene_id,
                rec.image_id,
                rec.object_id,
                fmt(float(np.mean(vsd_row))),
                fmt(mssd_err),
                fmt(mspd_err, 2) if math.isfinite(mspd_err) else "inf",
                fmt(add_err),
                fmt(adds_err),
            ]
            for rec, vsd_row, mssd_err, mspd_err, add_err, adds_err in results
        ],
    )
    summary = aligned_table(
        ["metric", "recall"],
        [
            ["vsd", fmt(report.vsd_recall)],
            ["mssd", fmt(report.mssd_recall)],
            ["mspd", fmt(report.mspd_recall)],
            ["add", fmt(report.add_recall)],
            ["adds", fmt(report.adds_recall)],
            ["ar", fmt(report.ar)],
        ],
    )
    write_text(out / "eval_report.txt", manifest, table_body + "\n" + summary)

    vsd_flat = np.asarray(vsd_rows, dtype=float).reshape(-1)
    vsd_curve = [
        float(np.mean(vsd_flat <= theta)) for theta in metric_config.vsd_thresholds
    ]
    diam = np.asarray(diameters)
    mssd_arr = np.asarray(mssd_errors)
    mssd_curve = [
        float(np.mean(mssd_arr <= theta * diam)) for theta in metric_config.mssd_thresholds
    ]
    scale = metric_config.image_width / 640.0
    mspd_arr = np.asarray(mspd_errors)
    mspd_curve = [
        float(np.mean(mspd_arr <= theta * scale)) for theta in metric_config.mspd_thresholds
    ]
    fig = recall_curves_figure(
        [
            ("vsd", metric_config.vsd_thresholds, vsd_curve, "error threshold"),
            ("mssd", metric_config.mssd_thresholds, mssd_curve, "threshold [diameter]"),
            ("mspd", metric_config.mspd_thresholds, mspd_curve, "threshold [px at 640]"),
        ],
        title="recall curves",
    )
    save_figure(fig, out / "recall_curves.png")
    write_sidecar(out, manifest)
    return EXIT_OK


def cmd_refine_depth(args):
    config = effective_config("refine-depth", args)
    manifest = build_manifest("refine-depth", config, args.seed)
    out = prepare_out(args)
    bundle = load_scenario(args.scenario)
    rows = read_bop_csv(args.predictions)
    pairs = match_predictions(bundle.records, rows, args.predictions)
    for record, _ in pairs:
        if record.observed_depth is None:
            raise ProbPnpError(
                f"instance {instance_label(record)} carries no observed depth; "
                "synthesize the scenario with with_depth=true"
            )

    def refine_one(pair):
        record, row = pair
        refined = depth_refine(row.pose, bundle.mesh, record.k, record.observed_depth)
        log.info(
            "refine-depth %s: z %.4f -> %.4f",
            instance_label(record),
            row.pose.t[2],
            refined.t[2],
        )
        return record, row, refined

    results = run_pool(args.jobs, refine_one, pairs)
    results.sort(key=lambda r: (r[0].scene_id, r[0].image_id, r[0].object_id))

    refined_rows = [
        BopRow(rec.scene_id, rec.image_id, rec.object_id, row.score, refined, row.time)
        for rec, row, refined in results
    ]
    write_bop_csv(out / "refined.csv", refined_rows)
    table = aligned_table(
        ["scene", "image", "object", "z_before_m", "z_after_m", "shift_mm"],
        [
            [
                rec.scene_id,
                rec.image_id,
                rec.object_id,
                fmt(row.pose.t[2]),
                fmt(refined.t[2]),
                fmt((refined.t[2] - row.pose.t[2]) * 1000.0, 2),
            ]
            for rec, row, refined in results
        ],
    )
    write_text(out / "refine_report.txt", manifest, table)
    write_sidecar(out, manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="probpnp",
        description="Probabilistic PnP experiments on synthetic scenes.",
    )
    parser.add_argument("--version", action="version", version=f"probpnp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        p.add_argument("--config", help="JSON config file; keys override defaults")
        p.add_argument("--seed", type=int, default=0, help="base random seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers")
        if scenario:
            p.add_argument("--scenario", required=True, help="scenario directory from synth")

    p = sub.add_parser("synth", help="generate a synthetic scenario directory")
    common(p, scenario=False)

    p = sub.add_parser("solve", help="estimate poses, write BOP CSV")
    common(p)
    p.add_argument("--keep-fraction", type=float, help="inlier fraction kept by the solver")

    p = sub.add_parser("sample", help="draw posterior pose samples")
    common(p, scenario=False)
    p.add_argument("--scenario", help="scenario directory (omit with --mesh)")
    p.add_argument("--mesh", help="synthesize one instance of this primitive instead")
    p.add_argument("--samples", type=int, help="sampler draws per round")

    p = sub.add_parser("train-toy", help="run the two-phase trainer per instance")
    common(p)
    p.add_argument("--samples", type=int, help="sampler draws per round")

    p = sub.add_parser("eval", help="score a predictions CSV against ground truth")
    common(p)
    p.add_argument("--predictions", required=True, help="BOP CSV from solve/refine-depth")
    p.add_argument("--resolution", help="render VSD at WIDTHxHEIGHT instead of full size")

    p = sub.add_parser("refine-depth", help="depth-correct a predictions CSV")
    common(p)
    p.add_argument("--predictions", required=True, help="BOP CSV to refine")
    return parser


HANDLERS = {
    "synth": cmd_synth,
    "solve": cmd_solve,
    "sample": cmd_sample,
    "train-toy": cmd_train_toy,
    "eval": cmd_eval,
    "refine-depth": cmd_refine_depth,
}


def main(argv=None):
    level = os.environ.get("PROBPNP_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "sample" and not (args.scenario or args.mesh):
        parser.error("sample needs --scenario or --mesh")
    try:
        return HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProbPnpError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
