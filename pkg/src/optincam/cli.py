"""Command-line interface.

Subcommands: simulate, calibrate, train-nlos, track, match, replay,
evaluate, sweep, mask. Exit code 0 on success, 2 on schema errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import calibration, io, nlos, pipeline, simulator
from .errors import SchemaError
from .matching import build_cost_matrix, overlap_matrix, solve_assignment
from .optimize import CmaesConfig, RansacConfig
from .pipeline import ReplayConfig
from .tracking import NoiseModel


def _replay_config(args) -> ReplayConfig:
    cfg = io.load_config(args.config)
    anchor, intr, extr, noise = io.parse_config(cfg)
    detector = None
    detector_path = getattr(args, "detector", None) or cfg.get("detector_path")
    if detector_path:
        detector = nlos.NlosDetectorModel.load(detector_path)
    rc = ReplayConfig(
        anchor=anchor,
        intrinsics=intr,
        extrinsics=extr,
        noise=noise,
        w_r=float(cfg["w_r"]),
        h_tag=float(cfg["h_tag"]),
        c_th=float(cfg.get("c_th", 1.5)),
        u_th=float(cfg.get("u_th", 1.5)),
        window_s=float(cfg.get("window_s", 10.0)),
        align_tolerance=float(cfg.get("align_tolerance", 0.25)),
        detector=detector,
    )
    # CLI flags override config keys
    if getattr(args, "c_th", None) is not None:
        rc.c_th = args.c_th
    if getattr(args, "u_th", None) is not None:
        rc.u_th = args.u_th
    return rc


def _cmd_simulate(args) -> int:
    scene_cfg = simulator.SceneConfig(
        person_count=args.people,
        tag_count=args.tags,
        duration_s=args.duration,
        seed=args.seed,
    )
    gt = simulator.generate_scene(scene_cfg)
    anchor = simulator.default_anchor()
    intr, extr = simulator.default_camera()
    uwb_noise = simulator.UwbNoiseConfig.zero() if args.zero_noise else simulator.UwbNoiseConfig()
    cam_noise = simulator.CameraNoiseConfig.zero() if args.zero_noise else simulator.CameraNoiseConfig()
    samples, _ = simulator.simulate_uwb(gt, anchor, uwb_noise, seed=args.seed)
    dets, sidecar = simulator.simulate_detections(gt, intr, extr, cam_noise, seed=args.seed)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_uwb_jsonl(out / "uwb.jsonl", samples)
    io.write_tracklet_jsonl(out / "tracklets.jsonl", dets)
    io.write_groundtruth_jsonl(out / "groundtruth.jsonl", sidecar)
    noise = NoiseModel.hand_designed()
    io.save_config(
        out / "config.json",
        io.config_to_dict(anchor, intr, extr, noise, w_r=0.30, h_tag=scene_cfg.tag_height, seed=args.seed),
    )
    print(f"wrote {len(samples)} uwb samples, {len(dets)} detections to {out}")
    return 0


def _cmd_calibrate(args) -> int:
    cfg = io.load_config(args.config)
    anchor, intr, extr, _noise = io.parse_config(cfg)
    samples = io.read_uwb_jsonl(args.uwb)
    dets = io.read_tracklet_jsonl(args.tracklets)
    pairs = calibration.pair_dataset(samples, dets)
    init = calibration.CalibParams(anchor=anchor, w_r=float(cfg["w_r"]), h_tag=float(cfg["h_tag"]))
    params, outliers = calibration.calibrate_extrinsics(
        pairs, intr, extr, init,
        RansacConfig(sample_size=8, iterations=args.ransac_iters, inlier_threshold=args.inlier_threshold, seed=args.seed),
    )
    labels = calibration.label_nlos(outliers)
    feats = np.array([p.sample.features for p in pairs])
    detector = nlos.train_detector(feats, labels, seed=args.seed)
    tuned = calibration.tune_noise(
        pairs, params, detector, intr, extr,
        d_th=args.d_th, cfg=CmaesConfig(sigma0=0.8, max_evals=args.tune_evals, seed=args.seed),
    )
    report = calibration.calibration_report(params, outliers, tuned)
    calibration.save_report(args.report, report)
    if args.detector_out:
        detector.save(args.detector_out)
    if args.config_out:
        new_cfg = io.config_to_dict(
            params.anchor, intr, extr,
            NoiseModel(r_los=tuned.r_los, r_nlos=tuned.r_nlos),
            w_r=params.w_r, h_tag=params.h_tag,
            c_th=float(cfg.get("c_th", 1.5)), u_th=float(cfg.get("u_th", 1.5)),
            detector_path=args.detector_out,
        )
        io.save_config(args.config_out, new_cfg)
    print(json.dumps(report, indent=2))
    return 0


def _cmd_train_nlos(args) -> int:
    data = json.loads(Path(args.data).read_text())
    feats = np.array(data["features"], dtype=float)
    labels = np.array(data["labels"], dtype=int)
    model = nlos.train_detector(feats, labels, seed=args.seed)
    model.save(args.out)
    print(f"trained detector on {len(labels)} samples -> {args.out}")
    return 0


def _cmd_track(args) -> int:
    rc = _replay_config(args)
    samples = io.read_uwb_jsonl(args.uwb)
    trajectories = pipeline._filter_tags(samples, rc)
    with open(args.out, "w", encoding="utf-8") as fh:
        for tag_id in sorted(trajectories):
            for p in trajectories[tag_id].points:
                fh.write(
                    json.dumps(
                        {
                            "tag_id": tag_id,
                            "t": p.timestamp,
                            "position": p.position.tolist(),
                            "position_cov": p.position_cov.tolist(),
                            "uncertain": bool(p.uncertain),
                        }
                    )
                    + "\n"
                )
    print(f"tracked {len(trajectories)} tag(s) -> {args.out}")
    return 0


def _cmd_match(args) -> int:
    rc = _replay_config(args)
    samples = io.read_uwb_jsonl(args.uwb)
    dets = io.read_tracklet_jsonl(args.tracklets)
    trajectories = pipeline._filter_tags(samples, rc)
    tracklets = pipeline.detections_to_tracklets(dets, rc)
    tag_ids = sorted(trajectories)
    trk_ids = sorted(tracklets)
    cm = build_cost_matrix([trajectories[t] for t in tag_ids], [tracklets[t] for t in trk_ids], rc.align_tolerance)
    ov = overlap_matrix([tracklets[t] for t in trk_ids])
    result = solve_assignment(cm, ov, rc.c_th)
    out = {
        "tags": tag_ids,
        "tracklets": trk_ids,
        "costs": [[None if not np.isfinite(c) else c for c in row] for row in cm.costs],
        "assignment": result.x.tolist(),
        "objective": result.objective,
    }
    Path(args.out).write_text(json.dumps(out, indent=2))
    print(f"objective {result.objective:.4f}, {int(result.x.sum())} pairs assigned")
    return 0


def _cmd_replay(args) -> int:
    rc = _replay_config(args)
    samples = io.read_uwb_jsonl(args.uwb)
    dets = io.read_tracklet_jsonl(args.tracklets)
    gt = io.read_groundtruth_jsonl(args.groundtruth) if args.groundtruth else None
    decisions, metrics = pipeline.run_replay(samples, dets, rc, gt)
    with open(args.out, "w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(
                json.dumps(
                    {
                        "t": d.timestamp,
                        "assignments": [
                            {"tag_id": a[0], "tracklet_id": a[1], "box": list(a[2]), "keep": a[3]}
                            for a in d.assignments
                        ],
                        "unmatched": d.unmatched,
                    }
                )
                + "\n"
            )
    if metrics is not None:
        print(f"recall {metrics.recall:.4f}, misid rate {metrics.misid_rate:.4f}")
        if args.metrics_out:
            n_people = len({r["person_id"] for r in gt})
            n_tags = len({r["carries_tag"] for r in gt if r["carries_tag"]})
            with open(args.metrics_out, "w", encoding="utf-8") as fh:
                fh.write(pipeline.METRICS_CSV_HEADER + "\n")
                fh.write(pipeline.metrics_csv_row(args.scene_id, n_people, n_tags, rc, metrics) + "\n")
    print(f"wrote {len(decisions)} frame decisions -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    gt = io.read_groundtruth_jsonl(args.groundtruth)
    decisions = _read_decisions(args.decisions)
    metrics = pipeline.evaluate_recall(decisions, gt)
    print(json.dumps({"recall": metrics.recall, "misid_rate": metrics.misid_rate,
                      "misidentification_count": metrics.misidentification_count,
                      "frames_visible": metrics.frames_visible}, indent=2))
    return 0


def _read_decisions(path):
    decisions = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"decisions: invalid JSON: {e}") from e
            decisions.append(
                pipeline.FrameDecision(
                    timestamp=float(rec["t"]),
                    assignments=[
                        (a["tag_id"], a["tracklet_id"], tuple(a["box"]), bool(a["keep"]))
                        for a in rec["assignments"]
                    ],
                    unmatched=list(rec.get("unmatched", [])),
                )
            )
    return decisions


def _cmd_sweep(args) -> int:
    rc = _replay_config(args)
    samples = io.read_uwb_jsonl(args.uwb)
    dets = io.read_tracklet_jsonl(args.tracklets)
    gt = io.read_groundtruth_jsonl(args.groundtruth)
    values = [float(v) for v in args.c_th_values.split(",")]
    rows = pipeline.sweep_threshold(samples, dets, gt, rc, values, sweep_u_th=args.sweep_u_th)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("c_th,recall,misid_rate\n")
        for r in rows:
            fh.write(f"{r['c_th']},{r['recall']:.6f},{r['misid_rate']:.6f}\n")
    print(f"AUC {pipeline.pr_auc(rows):.4f} -> {args.out}")
    return 0


def _cmd_mask(args) -> int:
    frame = io.read_ppm(args.frame)
    background = io.read_ppm(args.background)
    decisions = _read_decisions(args.decisions)
    target = min(decisions, key=lambda d: abs(d.timestamp - args.t))
    out = pipeline.compose_mask(frame, background, target)
    io.write_ppm(args.out, out)
    print(f"masked frame at t={target.timestamp} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="optincam", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scene")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--people", type=int, default=8)
    p.add_argument("--tags", type=int, default=1)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-noise", action="store_true")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("calibrate", help="two-stage auto-calibration from a walk")
    p.add_argument("--uwb", required=True)
    p.add_argument("--tracklets", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--detector-out")
    p.add_argument("--config-out")
    p.add_argument("--ransac-iters", type=int, default=30)
    p.add_argument("--inlier-threshold", type=float, default=1.2)
    p.add_argument("--d-th", type=float, default=1.0)
    p.add_argument("--tune-evals", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("train-nlos", help="train the NLoS detector from labeled features")
    p.add_argument("--data", required=True, help="JSON file with 'features' and 'labels'")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_nlos)

    p = sub.add_parser("track", help="filter UWB samples into tag trajectories")
    p.add_argument("--uwb", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--detector")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("match", help="one-shot cost matrix and assignment")
    p.add_argument("--uwb", required=True)
    p.add_argument("--tracklets", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--detector")
    p.add_argument("--c-th", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("replay", help="windowed end-to-end replay")
    p.add_argument("--uwb", required=True)
    p.add_argument("--tracklets", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--detector")
    p.add_argument("--groundtruth")
    p.add_argument("--c-th", type=float)
    p.add_argument("--u-th", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics-out")
    p.add_argument("--scene-id", default="scene")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("evaluate", help="recall metrics from decisions + ground truth")
    p.add_argument("--decisions", required=True)
    p.add_argument("--groundtruth", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="threshold sweep -> PR table CSV")
    p.add_argument("--uwb", required=True)
    p.add_argument("--tracklets", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--detector")
    p.add_argument("--groundtruth", required=True)
    p.add_argument("--c-th-values", default="0.25,0.5,0.75,1.0,1.25,1.5,1.75,2.0,2.5,3.0")
    p.add_argument("--sweep-u-th", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("mask", help="composite kept boxes onto a background image")
    p.add_argument("--frame", required=True)
    p.add_argument("--background", required=True)
    p.add_argument("--decisions", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mask)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as e:
        print(f"schema error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
