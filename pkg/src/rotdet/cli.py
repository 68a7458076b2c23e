"""Command-line entry point: ``rotdet <command> [options]``.

Data directories hold ``gts.jsonl`` (one box per line with an ``image_id``),
optionally ``dets.jsonl``, and ``maps/<image_id>.f32`` feature grids with
JSON sidecars.  Exit status is 0 on success, 2 for bad input and 3 for a
numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import OrderedDict
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .anchors import AnchorConfig, BatchStats, NoGroundTruthError, bar_stats_arrays, generate_anchors
from .evaluation import (
    from_arrays,
    orientation_deviation,
    pr_curve,
    recall_iou_curve,
    summarize,
)
from .geometry import GeometryError, RotatedBox
from .losses import HyperParams, parse_key_values
from .model import ToyModel, grad_check
from .pipeline import Detector, DivergenceError, PipelineConfig, build_batch, train
from .pooling import ScoreMapStack
from .synth import PlacementError, Scene, SceneSpec, gen_detections, gen_scenes, gen_sequence
from .tracking import SequenceError, TrackerConfig, detect_by_tracking, run_tracker

log = logging.getLogger("rotdet")

EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    pass


class NumericError(Exception):
    pass


# -- file formats -----------------------------------------------------------


def read_jsonl(path) -> list[dict]:
    rows = []
    try:
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        rows.append(json.loads(line))
                    except json.JSONDecodeError as e:
                        raise InputError(f"{path}:{n}: {e.msg}") from None
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    return rows


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def box_record(box, **extra) -> dict:
    cx, cy, w, h, th = (float(v) for v in box)
    rec = dict(extra)
    rec.update({"cx": cx, "cy": cy, "w": w, "h": h, "theta_deg": th})
    return rec


def _box_of(rec: dict, path) -> tuple:
    try:
        return RotatedBox.from_json(rec).as_tuple()
    except KeyError as e:
        raise InputError(f"{path}: record missing field {e}") from None
    except (GeometryError, TypeError, ValueError) as e:
        raise InputError(f"{path}: bad box {rec}: {e}") from None


def group_boxes(rows: list[dict], path, key: str = "image_id") -> "OrderedDict":
    """``{id: (boxes (N, 5), scores (N,) or None, records)}`` in order of first appearance."""
    out = OrderedDict()
    for r in rows:
        if key not in r:
            raise InputError(f"{path}: record without {key!r}")
        out.setdefault(r[key], []).append(r)
    grouped = OrderedDict()
    for k, recs in out.items():
        boxes = np.array([_box_of(r, path) for r in recs], dtype=float).reshape(-1, 5)
        scores = np.array([float(r["score"]) for r in recs]) if all("score" in r for r in recs) else None
        grouped[k] = (boxes, scores, recs)
    return grouped


def load_eval_objects(path, key: str = "image_id", with_scores: bool = False):
    rows = read_jsonl(path)
    ids, boxes, scores, classes = [], [], [], []
    for r in rows:
        if key not in r:
            raise InputError(f"{path}: record without {key!r}")
        ids.append(r[key])
        boxes.append(_box_of(r, path))
        classes.append(r.get("class"))
        if with_scores:
            if "score" not in r:
                raise InputError(f"{path}: detection without score")
            scores.append(float(r["score"]))
    try:
        return from_arrays(ids, np.array(boxes).reshape(-1, 5), scores if with_scores else None, classes)
    except ValueError as e:
        raise InputError(f"{path}: {e}") from None


def map_path(data: Path, image_id) -> Path:
    return data / "maps" / f"{image_id}.f32"


def load_scenes(data) -> list[Scene]:
    data = Path(data)
    gts_path = data / "gts.jsonl"
    if not gts_path.exists():
        raise InputError(f"{gts_path} not found")
    grouped = group_boxes(read_jsonl(gts_path), gts_path)
    # images without objects are listed with an empty box list in index.json
    index = data / "index.json"
    ids = json.loads(index.read_text())["image_ids"] if index.exists() else list(grouped)
    scenes = []
    for image_id in ids:
        boxes = grouped[image_id][0] if image_id in grouped else np.zeros((0, 5))
        try:
            feats = ScoreMapStack.load(map_path(data, image_id)).values
        except (OSError, ValueError, KeyError) as e:
            raise InputError(f"feature map for image {image_id}: {e}") from None
        scenes.append(Scene(boxes, feats, int(image_id) if isinstance(image_id, int) else 0))
    return scenes


def load_spec(path) -> SceneSpec:
    if path is None:
        return SceneSpec()
    try:
        return SceneSpec.from_json(Path(path).read_text())
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    except (json.JSONDecodeError, TypeError, ValueError) as e:
        raise InputError(f"bad scene spec {path}: {e}") from None


# -- configuration ------------------------------------------------------------

HP_FLAGS = {f.name: f.name.replace("_", "-") for f in fields(HyperParams)}
PIPE_FLAGS = {f.name: f.name.replace("_", "-") for f in fields(PipelineConfig)}


def resolve_hyperparams(args) -> HyperParams:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            values.update(parse_key_values(Path(args.config).read_text()))
        except OSError as e:
            raise InputError(f"cannot read {args.config}: {e.strerror}") from None
        except ValueError as e:
            raise InputError(f"{args.config}: {e}") from None
    for name in HP_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        return HyperParams.from_dict(values)
    except KeyError as e:
        raise InputError(str(e.args[0])) from None
    except ValueError as e:
        raise InputError(f"hyper-parameters: {e}") from None


def resolve_pipeline(args, base: PipelineConfig | None = None) -> PipelineConfig:
    values = asdict(base or PipelineConfig())
    for name in PIPE_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    cfg = PipelineConfig(**values)
    if cfg.rpn_top_n < 1 or cfg.rdn_top_n < 1:
        raise InputError("top-N caps must be >= 1")
    return cfg


def add_hp_flags(p) -> None:
    p.add_argument("--config", help="flat 'name = value' hyper-parameter file")
    for name, flag in HP_FLAGS.items():
        typ = int if name in ("lr_step", "batch_size") else float
        p.add_argument(f"--{flag}", dest=name, type=typ, default=None)


def add_detect_flags(p) -> None:
    p.add_argument("--rpn-top-n", dest="rpn_top_n", type=int, default=None)
    p.add_argument("--rdn-top-n", dest="rdn_top_n", type=int, default=None)
    p.add_argument("--score-threshold", dest="score_threshold", type=float, default=None)
    p.add_argument("--nms-threshold", dest="nms_threshold", type=float, default=None)


def load_model(path):
    try:
        model, extra = ToyModel.load(path)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise InputError(f"bad model file {path}: {e}") from None
    if "stats" not in extra:
        raise InputError(f"{path} carries no anchor statistics")
    stats = BatchStats(**extra["stats"])
    pipe = PipelineConfig(**extra.get("pipeline", {}))
    return model, stats, pipe


def training_scenes(args) -> list[Scene]:
    if args.data:
        return load_scenes(args.data)
    spec = load_spec(args.spec)
    return gen_scenes(spec, args.scenes)


# -- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = load_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(spec.to_json() + "\n")
    if args.kind == "scene":
        (out / "maps").mkdir(exist_ok=True)
        gts, dets, ids = [], [], []
        for s in gen_scenes(spec, args.n, args.start):
            ids.append(s.index)
            gts += [box_record(b, image_id=s.index) for b in s.gts]
            boxes, scores, _ = gen_detections(s.gts, spec, np.random.default_rng([spec.seed, s.index, 1]))
            dets += [box_record(b, image_id=s.index, score=float(sc)) for b, sc in zip(boxes, scores)]
            ScoreMapStack(s.features).save(map_path(out, s.index))
        (out / "index.json").write_text(json.dumps({"image_ids": ids}) + "\n")
    else:
        gts, dets = [], []
        for f in gen_sequence(spec, args.frames, args.motion, args.start):
            gts += [box_record(b, frame=f.index, image_id=f.index) for b in f.gts]
            dets += [box_record(b, frame=f.index, image_id=f.index, score=float(sc))
                     for b, sc in zip(f.dets, f.scores)]
    write_jsonl(out / "gts.jsonl", gts)
    write_jsonl(out / "dets.jsonl", dets)
    log.info("wrote %d ground truths and %d detections to %s", len(gts), len(dets), out)
    return 0


def cmd_anchors(args) -> int:
    if args.gt:
        grouped = group_boxes(read_jsonl(args.gt), args.gt)
        try:
            stats = bar_stats_arrays([g[0] for g in grouped.values()])
        except NoGroundTruthError as e:
            raise InputError(str(e)) from None
    elif args.w_hat and args.h_hat:
        stats = BatchStats(args.w_hat, args.h_hat, 0)
    else:
        raise InputError("anchors needs --gt or both --w-hat and --h-hat")
    cfg = AnchorConfig(grid_w=args.grid_w, grid_h=args.grid_h, feature_stride=args.stride)
    if args.action == "stats":
        print(json.dumps({"w_hat": stats.w_hat, "h_hat": stats.h_hat, "count": stats.n_boxes}))
        return 0
    anchors = generate_anchors(cfg, stats)
    rows = [box_record(b, index=i, angle_index=int(a), scale_index=int(s))
            for i, (b, a, s) in enumerate(zip(anchors.boxes, anchors.angle_index, anchors.scale_index))]
    if args.out:
        write_jsonl(args.out, rows)
    print(json.dumps({"anchors": len(anchors), "per_cell": cfg.per_cell, "w_hat": stats.w_hat,
                      "h_hat": stats.h_hat}))
    return 0


def cmd_train(args) -> int:
    hp = resolve_hyperparams(args)
    cfg = resolve_pipeline(args)
    scenes = training_scenes(args)
    if not any(len(s.gts) for s in scenes):
        raise InputError("training data contains no ground truth")
    model = ToyModel.init(np.random.default_rng(args.seed), n_features=scenes[0].features.shape[0])
    stats = bar_stats_arrays([s.gts for s in scenes])

    def progress(it, row):
        if args.verbose and it % max(1, args.log_every) == 0:
            log.info("iteration %d joint %.4g", it, row[3])

    try:
        train(model, scenes, hp, args.iterations, cfg, seed=args.seed, log_path=args.log,
              log_every=args.log_every, callback=progress)
    except DivergenceError as e:
        raise NumericError(str(e)) from None
    extra = {"stats": asdict(stats), "pipeline": asdict(cfg), "hyperparams": hp.to_dict(),
             "iterations": args.iterations, "seed": args.seed}
    model.save(args.out, extra)
    log.info("saved model to %s", args.out)
    return 0


def cmd_detect(args) -> int:
    model, stats, pipe = load_model(args.model)
    cfg = resolve_pipeline(args, pipe)
    det = Detector(model, stats, cfg)
    rows = []
    for s in load_scenes(args.data):
        try:
            r = det.detect(s.features)
        except ValueError as e:
            raise InputError(f"image {s.index}: {e}") from None
        rows += [box_record(b, image_id=s.index, score=float(sc)) for b, sc in zip(r.boxes, r.scores)]
    write_jsonl(args.out, rows)
    log.info("wrote %d detections to %s", len(rows), args.out)
    return 0


def evaluation_report(dets, gts, iou_threshold, score_threshold, iou) -> dict:
    report = summarize(dets, gts, iou_threshold, score_threshold, iou)
    report["n_dets"] = len(dets)
    report["n_gts"] = len(gts)
    return report


def cmd_eval(args) -> int:
    gts = load_eval_objects(args.gts)
    dets = load_eval_objects(args.dets, with_scores=True)
    report = evaluation_report(dets, gts, args.iou_threshold, args.score_threshold, args.iou)
    hist = orientation_deviation(dets, gts, args.iou_threshold, args.bin_width, args.iou)
    report["orientation_within_10"] = hist.mass_within(10.0)
    report["orientation_peak"] = hist.peak if hist.probs.sum() else None
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.pr_csv:
        pr_curve(dets, gts, args.iou_threshold, args.iou).to_csv(args.pr_csv, ("recall", "precision"))
    if args.recall_iou_csv:
        grid = np.round(np.arange(0.05, 1.0001, 0.05), 10)
        recall_iou_curve(dets, gts, grid, args.score_threshold, args.iou).to_csv(args.recall_iou_csv,
                                                                                 ("iou", "recall"))
    if args.orientation_csv:
        with open(args.orientation_csv, "w") as fh:
            fh.write("delta_deg,probability\n")
            for c, p in zip(hist.centers, hist.probs):
                fh.write(f"{c:.6g},{p:.6g}\n")
    return 0


def tracker_config(args) -> TrackerConfig:
    kw = {}
    for name in ("max_age", "min_hits", "iou_threshold"):
        v = getattr(args, name)
        if v is not None:
            kw[name] = v
    try:
        return TrackerConfig(**kw)
    except ValueError as e:
        raise InputError(str(e)) from None


def cmd_track(args) -> int:
    grouped = group_boxes(read_jsonl(args.dets), args.dets, key="frame")
    frames = []
    for frame, (boxes, scores, _) in grouped.items():
        if not isinstance(frame, int):
            raise InputError(f"frame index {frame!r} is not an integer")
        frames.append((frame, boxes, scores))
    try:
        results = run_tracker(frames, tracker_config(args))
    except SequenceError as e:
        raise InputError(str(e)) from None
    rows = [b.to_record(r.frame) for r in results for b in r.boxes]
    write_jsonl(args.out, rows)
    if args.gts:
        gts = load_eval_objects(args.gts, key="frame")
        raw, aug = [], []
        for (frame, boxes, scores), (b2, s2, _) in zip(frames, detect_by_tracking(results)):
            sc = np.ones(len(boxes)) if scores is None else scores
            raw += from_arrays([frame] * len(boxes), boxes, sc)
            aug += from_arrays([frame] * len(b2), b2, s2)
        report = {"raw": evaluation_report(raw, gts, args.iou_eval, 0.0, "axis"),
                  "tracked": evaluation_report(aug, gts, args.iou_eval, 0.0, "axis"),
                  "recovered": int(sum(len(r.recovered()) for r in results)),
                  "tracks": len({b.track_id for r in results for b in r.boxes})}
        text = json.dumps(report, indent=2, sort_keys=True)
        if args.report:
            Path(args.report).write_text(text + "\n")
        print(text)
    return 0


def _recall_ap(det: Detector, scenes, **kw) -> dict:
    dets, gts = [], []
    for s in scenes:
        r = det.detect(s.features, **kw)
        dets += from_arrays([s.index] * len(r.boxes), r.boxes, r.scores)
        gts += from_arrays([s.index] * len(s.gts), s.gts)
    rep = summarize(dets, gts, 0.5, 0.0)
    return {"recall": rep["recall"], "precision": rep["precision"], "ap": rep["ap"], "detections": len(dets)}


def cmd_sweep(args) -> int:
    try:
        values = [float(v) for v in args.values.split(",")]
    except ValueError:
        raise InputError(f"bad --values {args.values!r}") from None
    scenes = load_scenes(args.data)
    rows = []
    if args.param in ("rdn_top_n", "rpn_top_n"):
        if not args.model:
            raise InputError("top-N sweeps need --model")
        model, stats, pipe = load_model(args.model)
        det = Detector(model, stats, resolve_pipeline(args, pipe))
        for v in values:
            if v < 1 or v != int(v):
                raise InputError("top-N values must be integers >= 1")
            rows.append({args.param: int(v), **_recall_ap(det, scenes, **{args.param: int(v)})})
    else:
        train_scenes = load_scenes(args.train_data) if args.train_data else scenes
        stats = bar_stats_arrays([s.gts for s in train_scenes])
        cfg = resolve_pipeline(args)
        for v in values:
            args_hp = resolve_hyperparams(args)
            hp = HyperParams.from_dict({**args_hp.to_dict(), args.param: v})
            model = ToyModel.init(np.random.default_rng(args.seed))
            try:
                train(model, train_scenes, hp, args.iterations, cfg, seed=args.seed)
            except DivergenceError as e:
                raise NumericError(f"{args.param}={v}: {e}") from None
            rows.append({args.param: v, **_recall_ap(Detector(model, stats, cfg), scenes)})
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    return 0


def cmd_gradcheck(args) -> int:
    hp = resolve_hyperparams(args)
    cfg = resolve_pipeline(args)
    scenes = training_scenes(args)
    scenes = [s for s in scenes if len(s.gts)][: hp.batch_size]
    if not scenes:
        raise InputError("no scene with ground truth")
    rng = np.random.default_rng(args.seed)
    model = ToyModel.init(rng, std=0.05, n_features=scenes[0].features.shape[0])
    gts = [s.gts for s in scenes]
    batch = build_batch(model, np.stack([s.features for s in scenes]), gts, bar_stats_arrays(gts), cfg, hp, rng)
    err = float(grad_check(model, batch, hp, args.n_params, rng))
    print(json.dumps({"max_relative_error": err, "n_params": min(args.n_params, model.size),
                      "tolerance": args.tolerance, "ok": err < args.tolerance}))
    if not err < args.tolerance:
        raise NumericError(f"gradient check failed: {err:.3g} >= {args.tolerance:g}")
    return 0


# -- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rotdet", description="Oriented-box detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic scenes or sequences")
    s.add_argument("kind", choices=("scene", "seq"))
    s.add_argument("--spec", help="scene spec JSON (defaults when omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int, default=10, help="number of scenes")
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--motion", choices=("linear", "static"), default="linear")
    s.add_argument("--start", type=int, default=0, help="first scene index, or sequence index")
    s.add_argument("--seed", type=int, default=None, help="overrides the spec seed")
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("anchors", help="anchor statistics or the full anchor set")
    a.add_argument("action", choices=("stats", "gen"))
    a.add_argument("--gt", help="ground-truth JSONL")
    a.add_argument("--w-hat", type=float)
    a.add_argument("--h-hat", type=float)
    a.add_argument("--grid-w", type=int, default=32)
    a.add_argument("--grid-h", type=int, default=32)
    a.add_argument("--stride", type=float, default=4.0)
    a.add_argument("--out", help="anchor JSONL (gen)")
    a.set_defaults(func=cmd_anchors)

    t = sub.add_parser("train", help="train the toy model")
    t.add_argument("--data", help="data directory from 'synth scene'")
    t.add_argument("--spec", help="scene spec used when --data is absent")
    t.add_argument("--scenes", type=int, default=1000)
    t.add_argument("--iterations", type=int, default=5000)
    t.add_argument("--out", required=True, help="model JSON")
    t.add_argument("--log", help="training log CSV")
    t.add_argument("--log-every", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    add_hp_flags(t)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="run a trained model on a data directory")
    d.add_argument("--model", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True, help="detections JSONL")
    add_detect_flags(d)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("--dets", required=True)
    e.add_argument("--gts", required=True)
    e.add_argument("--iou-threshold", type=float, default=0.5)
    e.add_argument("--score-threshold", type=float, default=0.0)
    e.add_argument("--iou", choices=("axis", "rotated"), default="axis")
    e.add_argument("--bin-width", type=float, default=5.0)
    e.add_argument("--out", help="summary JSON")
    e.add_argument("--pr-csv")
    e.add_argument("--recall-iou-csv")
    e.add_argument("--orientation-csv")
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("track", help="track per-frame detections")
    k.add_argument("--dets", required=True, help="detections JSONL with a 'frame' field")
    k.add_argument("--out", required=True, help="tracks JSONL")
    k.add_argument("--gts", help="ground truth with 'frame' for a raw vs tracked report")
    k.add_argument("--report", help="report JSON")
    k.add_argument("--max-age", type=int)
    k.add_argument("--min-hits", type=int)
    k.add_argument("--iou-threshold", type=float)
    k.add_argument("--iou-eval", type=float, default=0.5)
    k.set_defaults(func=cmd_track)

    w = sub.add_parser("sweep", help="recall and AP over a parameter grid")
    w.add_argument("--param", required=True,
                   choices=("rdn_top_n", "rpn_top_n", "eta", "lambda1", "lambda2"))
    w.add_argument("--values", required=True, help="comma-separated values")
    w.add_argument("--data", required=True, help="evaluation data directory")
    w.add_argument("--train-data", help="training data for loss-weight sweeps")
    w.add_argument("--model", help="trained model for top-N sweeps")
    w.add_argument("--iterations", type=int, default=200)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", required=True, help="CSV, one row per value")
    add_hp_flags(w)
    add_detect_flags(w)
    w.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    g.add_argument("--data")
    g.add_argument("--spec")
    g.add_argument("--scenes", type=int, default=4)
    g.add_argument("--n-params", type=int, default=100)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    add_hp_flags(g)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (InputError, PlacementError, NoGroundTruthError) as e:
        print(f"rotdet: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as e:
        print(f"rotdet: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
