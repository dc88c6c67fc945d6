"""Command-line entry point: ``pcroad <command> [options]``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
any other failure. Every random draw is derived from ``--seed``.
"""
from __future__ import annotations

import argparse
import dataclasses
import glob
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .boxes import CLASS_NAMES
from .config import ConfigError, PipelineConfig, load_config, save_config
from .dataset import SynthConfig, read_synth_dir, road_scene, synth_dataset, to_proposal_set, write_synth_dir
from .evaluation import (DEFAULT_IOU, GTBox, ScoredBox, SegScore, average_precision, benchmark,
                         seg_metrics, write_ap_report)
from .ground import GroundMask, read_semantickitti_labels, segment_ground, write_semantickitti_labels
from .kitti import DIFFICULTY, box_to_label_line, frame_id, load_kitti_labels, read_calib
from .networks import EnergyConfig, init_weights
from .pipeline import (Pipeline, Weights, calibrate_gates, format_detection, parse_detection_line,
                       read_scan, write_ply)
from .projection import project_cloud, write_velodyne_bin
from .training import train_network
from .weights_io import save_checkpoint

log = logging.getLogger("pcroad")


class UsageError(Exception):
    pass


def _expand(patterns) -> list[str]:
    out = []
    for p in patterns:
        hits = sorted(glob.glob(p)) if any(ch in p for ch in "*?[") else [p]
        if not hits:
            raise UsageError(f"no files match {p!r}")
        out.extend(hits)
    return out


def _config(args, check_files=True) -> PipelineConfig:
    cfg = load_config(args.config, check_files=check_files) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.replace(pipeline=dataclasses.replace(cfg.pipeline, seed=args.seed),
                          train=dataclasses.replace(cfg.train, seed=args.seed))
    return cfg


def _write_report(values: dict, out=None) -> None:
    text = "".join(f"{k} = {v:.6f}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in values.items())
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)


# --- detect ------------------------------------------------------------------------------

def cmd_detect(args) -> int:
    cfg = _config(args)
    pipe = Pipeline(cfg)
    paths = _expand(args.inputs)
    if args.dump_ply:
        Path(args.dump_ply).mkdir(parents=True, exist_ok=True)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for i, path in enumerate(paths):
            frame = frame_id(path) if Path(path).stem.isdigit() else i
            res = pipe(read_scan(path))
            for det in res.detections:
                out.write(format_detection(frame, det) + "\n")
            if args.dump_ply:
                write_ply(Path(args.dump_ply) / f"{Path(path).stem}.ply", res)
            c = res.counts
            log.info("%s: %d points, %d proposals, %d/%d past gates, %.1f ms", path, c.points, c.proposals,
                     c.gate1, c.gate2, 1e3 * sum(res.timings.values()))
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


# --- train -------------------------------------------------------------------------------

def _training_data(args, seed: int):
    """(training set, held-out ID set for gate calibration)."""
    if args.data:
        samples = read_synth_dir(args.data)
        rng = np.random.default_rng([seed, 1])
        order = rng.permutation(len(samples))
        n_hold = max(1, len(samples) // 5)
        held = [samples[i] for i in order[:n_hold]]
        train = [samples[i] for i in sorted(order[n_hold:])]
    else:
        train = synth_dataset(SynthConfig(n_id=args.n_id, n_ood=args.n_ood), seed)
        held = synth_dataset(SynthConfig(n_id=max(150, args.n_id // 4), n_ood=0), seed + 1)
    held = [s for s in held if s.label >= 0]
    if not held:
        raise UsageError("no held-out ID samples for gate calibration")
    return to_proposal_set(train), to_proposal_set(held)


def cmd_train(args) -> int:
    cfg = _config(args, check_files=False)
    tc = cfg.train
    overrides = {k: v for k, v in (("lr", args.lr), ("lam", args.lam), ("epochs", args.epochs)) if v is not None}
    tc = dataclasses.replace(tc, **overrides)
    cfg = cfg.replace(train=tc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, held = _training_data(args, tc.seed)
    use_pvle = not args.no_pvle
    digest = cfg.digest()

    paths = {}
    weights = {}
    for kind, epochs in (("classifier", tc.epochs), ("box", args.box_epochs or tc.epochs)):
        rng = np.random.default_rng([tc.seed, 0 if kind == "classifier" else 1])
        w, history = train_network(kind, train, tc, use_pvle=use_pvle, epochs=epochs, rng=rng)
        paths[kind] = out / f"{kind}.pcrw"
        save_checkpoint(paths[kind], w, {
            "kind": kind, "epoch": epochs, "config_hash": digest, "seed": tc.seed, "use_pvle": int(use_pvle),
            "final_loss": repr(history[-1]) if history else "nan",
            "rng_state": rng.bit_generator.state})
        weights[kind] = w
        print(f"{kind}: {epochs} epochs, final loss {history[-1] if history else float('nan'):.5f}")

    energy = calibrate_gates(Weights(weights["classifier"], weights["box"]), held.points, held.vox,
                             rate=args.gate_rate, T=cfg.energy.T)
    final = cfg.replace(energy=energy, pipeline=dataclasses.replace(
        cfg.pipeline, classifier_weights=paths["classifier"].name, box_weights=paths["box"].name))
    save_config(out / "pipeline.cfg", final)
    print(f"gamma_c = {energy.gamma_c:.6f}\ngamma_b = {energy.gamma_b:.6f}\nconfig = {out / 'pipeline.cfg'}")
    return 0


# --- eval-ground -------------------------------------------------------------------------

def cmd_eval_ground(args) -> int:
    cfg = _config(args, check_files=False)
    scans, gts = _expand(args.scans), _expand(args.gt)
    preds = _expand(args.pred) if args.pred else None
    if len(scans) != len(gts) or (preds is not None and len(preds) != len(scans)):
        raise UsageError("need one ground-truth (and prediction) file per scan")
    try:
        ids = cfg.pipeline.ground_label_ids
    except ValueError:
        raise ConfigError(f"pipeline.ground_labels: not a list of integers: {cfg.pipeline.ground_labels!r}") from None
    total = SegScore(0, 0, 0, 0)
    rows = []
    for i, (scan_path, gt_path) in enumerate(zip(scans, gts)):
        points = read_scan(scan_path)
        gt = read_semantickitti_labels(gt_path, ids)
        if len(gt) != len(points):
            raise ValueError(f"{gt_path}: {len(gt)} labels for {len(points)} points")
        cloud = project_cloud(points, cfg.projection)
        if preds is not None:
            flags = read_semantickitti_labels(preds[i], ids)
            mask = np.zeros(cloud.valid.shape, dtype=bool)
            mask[cloud.valid] = flags[cloud.index[cloud.valid]]
            pred = GroundMask(mask, cloud.valid)
        else:
            pred, _ = segment_ground(cloud, cfg.ground, rng_seed=cfg.pipeline.seed)
        score = seg_metrics(pred, gt, cloud.index)
        total = total + score
        rows.append((scan_path, score))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("scan,tp,fp,tn,fn,precision,recall,accuracy,iou\n")
            for path, s in rows:
                fh.write(f"{path},{s.tp},{s.fp},{s.tn},{s.fn},{s.precision:.6f},{s.recall:.6f},"
                         f"{s.accuracy:.6f},{s.iou:.6f}\n")
    _write_report({"scans": len(rows), **total.as_dict()}, args.report)
    return 0


# --- eval-detect -------------------------------------------------------------------------

def _read_detections(paths) -> list[ScoredBox]:
    dets = []
    for path in paths:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    frame, name, score, box = parse_detection_line(line)
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
                if name in CLASS_NAMES:
                    dets.append(ScoredBox(CLASS_NAMES.index(name), box, score, frame))
    return dets


def _synthetic_detections(args):
    cfg = _config(args)
    pipe = Pipeline(cfg)
    dets, gts = [], []
    for k in range(args.synthetic):
        scene = road_scene((cfg.pipeline.seed, k), cfg.projection)
        res = pipe(scene.scan.points)
        dets += [ScoredBox(d.label, d.box, d.score, k) for d in res.detections]
        gts += [GTBox(label, box, k) for label, box in scene.gt_boxes]
    return dets, {"all": gts}


def cmd_eval_detect(args) -> int:
    if args.synthetic:
        dets, gt_sets = _synthetic_detections(args)
    else:
        if not args.dets or not args.labels:
            raise UsageError("eval-detect needs --dets and --labels (or --synthetic N)")
        dets = _read_detections(_expand(args.dets))
        labels = _expand(args.labels)
        calibs = {Path(p).stem: p for p in _expand(args.calib)} if args.calib else {}
        levels = [args.difficulty] if args.difficulty else list(DIFFICULTY)
        gt_sets = {lv: [] for lv in levels}
        for path in labels:
            frame = frame_id(path)
            calib = read_calib(calibs[Path(path).stem]) if Path(path).stem in calibs else None
            for lv in levels:
                gt_sets[lv] += load_kitti_labels(path, calib, frame, lv).boxes
    iou = DEFAULT_IOU if args.iou is None else args.iou
    modes = ["11pt", "40pt"] if args.mode == "both" else [args.mode]
    results = {}
    for level, gts in gt_sets.items():
        for mode in modes:
            key = f"{level}/{mode}" if len(modes) > 1 else level
            results[key] = average_precision(dets, gts, iou, mode)
    report = {}
    for key, r in results.items():
        for name, ap in r.ap.items():
            report[f"{key}.{name}"] = ap
        report[f"{key}.mAP"] = r.mAP
    if args.csv:
        write_ap_report(args.csv, results)
    _write_report(report, args.report)
    return 0


# --- bench -------------------------------------------------------------------------------

def cmd_bench(args) -> int:
    cfg = _config(args)
    if not args.scans:
        cfg = cfg.replace(projection=dataclasses.replace(cfg.projection, s_w=args.width))
    if cfg.pipeline.classifier_weights and cfg.pipeline.box_weights:
        pipe = Pipeline(cfg)
        source = "trained"
    else:
        # Latency only: untrained weights with open gates push every proposal through both nets.
        seed = cfg.pipeline.seed
        pipe = Pipeline(cfg.replace(energy=EnergyConfig(cfg.energy.T, math.inf, math.inf)),
                        Weights(init_weights("classifier", seed), init_weights("box", seed + 1)))
        source = "random-init"
    if args.scans:
        scans = [read_scan(p) for p in _expand(args.scans)]
    else:
        scans = [road_scene((cfg.pipeline.seed, k), cfg.projection).scan.points for k in range(args.n_scans)]
    # The headline number is always single-threaded.
    head = benchmark(pipe, scans, repeats=args.repeats, threads=1)
    if args.csv:
        head.write_csv(args.csv)
    report = {"weights": source, "scans": len(scans), "threads": 1, **head.summary(),
              "ground_per_sector_ms": head.median_ms("ground") / cfg.ground.n_sectors}
    if args.threads and args.threads > 1:
        multi = benchmark(pipe, scans, repeats=args.repeats, threads=args.threads)
        report.update({"threads_n": args.threads, "total_median_ms_n": multi.median_ms(), "fps_n": multi.fps})
    _write_report(report, args.report)
    return 0


# --- synth -------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    write_synth_dir(out, synth_dataset(SynthConfig(n_id=args.n_id, n_ood=args.n_ood), seed))
    if args.scenes:
        cfg = _config(args, check_files=False)
        for sub in ("velodyne", "labels", "label_2"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        for k in range(args.scenes):
            scene = road_scene((seed, k), cfg.projection)
            write_velodyne_bin(out / "velodyne" / f"{k:06d}.bin", scene.scan.points)
            # 40 = road, 99 = other-object
            write_semantickitti_labels(out / "labels" / f"{k:06d}.label", np.where(scene.scan.labels == 0, 40, 99))
            lines = [box_to_label_line(CLASS_NAMES[label], box) for label, box in scene.gt_boxes]
            (out / "label_2" / f"{k:06d}.txt").write_text("".join(s + "\n" for s in lines))
    print(f"wrote {args.n_id + args.n_ood} samples{f' and {args.scenes} scenes' if args.scenes else ''} to {out}")
    return 0


# --- argument parsing --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config file (section.key = value)")
    common.add_argument("--seed", type=int, help="seed for every random draw")
    common.add_argument("--threads", type=int, help="BLAS/OpenMP thread limit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pcroad", description="LiDAR road-object detection pipeline")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("detect", parents=[common], help="detect objects in scans")
    p.add_argument("inputs", nargs="+", help="KITTI .bin or .npy scans (globs allowed)")
    p.add_argument("--out", help="detection text file (default stdout)")
    p.add_argument("--dump-ply", metavar="DIR", help="write a colored PLY per scan")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("train", parents=[common], help="train both networks and calibrate the gates")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="directory written by 'synth' (default: generate in memory)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--box-epochs", type=int, help="box network epochs (default: --epochs)")
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float, help="energy loss weight")
    p.add_argument("--n-id", type=int, default=2000)
    p.add_argument("--n-ood", type=int, default=2000)
    p.add_argument("--no-pvle", action="store_true", help="train without the voxel location encoder")
    p.add_argument("--gate-rate", type=float, default=0.98, help="ID pass rate of both gates together")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-ground", parents=[common], help="score ground segmentation")
    p.add_argument("scans", nargs="+")
    p.add_argument("--gt", nargs="+", required=True, help="SemanticKITTI .label files")
    p.add_argument("--pred", nargs="+", help="predicted .label files (default: run segmentation)")
    p.add_argument("--csv", help="per-scan CSV")
    p.add_argument("--report", help="also write the key = value report here")
    p.set_defaults(func=cmd_eval_ground)

    p = sub.add_parser("eval-detect", parents=[common], help="average precision of detections")
    p.add_argument("--dets", nargs="+", help="detection text files")
    p.add_argument("--labels", nargs="+", help="KITTI label_2 files")
    p.add_argument("--calib", nargs="+", help="KITTI calib files (matched by file stem)")
    p.add_argument("--difficulty", choices=list(DIFFICULTY))
    p.add_argument("--synthetic", type=int, default=0, metavar="N", help="evaluate on N generated scenes")
    p.add_argument("--mode", choices=["11pt", "40pt", "both"], default="40pt")
    p.add_argument("--iou", type=float, help="one IoU threshold for every class")
    p.add_argument("--csv")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval_detect)

    p = sub.add_parser("bench", parents=[common], help="per-stage latency")
    p.add_argument("scans", nargs="*", help="scans to time (default: generated road scenes)")
    p.add_argument("--n-scans", type=int, default=3)
    p.add_argument("--width", type=int, default=2048)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--csv")
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-id", type=int, default=2000)
    p.add_argument("--n-ood", type=int, default=2000)
    p.add_argument("--scenes", type=int, default=0, help="also write N full scans with labels")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"pcroad: error: {exc}", file=sys.stderr)
        if isinstance(exc, UsageError):
            parser.print_usage(sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"pcroad: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
