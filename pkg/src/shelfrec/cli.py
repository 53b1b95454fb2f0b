"""``shelfrec`` command line: train, build-db, gen-shelf, recognize, evaluate.

Options can also come from a JSON file given with ``--config``; explicit
flags override it.  Exit codes: 0 ok, 2 validation error, 3 I/O error,
4 undefined metric, 1 anything else.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import detection, embedder, evaluation, pipeline, store, synth
from .errors import (ConfigError, IOFailure, ShelfRecError, UndefinedMetricError,
                     ValidationError)
from .imaging import read_image, write_image
from .refinement import MatchWeightParams, parse_stages

log = logging.getLogger("shelfrec")

# stage combinations scored by --ablation: plain, +th, +lf, +mc, full
ABLATION = (("none", ()), ("th", ("th",)), ("lf", ("lf",)), ("mc", ("mc",)),
            ("full", ("lf", "mc", "th")))

DEFAULTS = {
    "lf_kernel": embedder.LF_KERNEL, "lf_stride": embedder.LF_STRIDE, "k": 5, "tau_d": 0.9, "conf_mc": 0.1, "epsilon": 1e-6,
    "stages": "lf,mc,th", "seed": 0, "input_size": 64, "protocol": "management", "iou": 0.5,
    "noise_jitter": 0.0, "noise_drop": 0.0, "noise_fp": 0.0,
}


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _resolve(args, *keys):
    """Fill unset options from --config, then from DEFAULTS."""
    cfg = _load_json(args.config) if getattr(args, "config", None) else {}
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    for k in keys:
        if getattr(args, k, None) is None:
            setattr(args, k, cfg.get(k, DEFAULTS.get(k)))
    return cfg


def _write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _load_refs(manifest):
    entries = store.read_manifest(manifest)
    return entries, [read_image(e.image_path) for e in entries]


def cmd_defaults(args):
    _write_text(args.out, json.dumps(embedder.TrainConfig().to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_train(args):
    cfg = embedder.TrainConfig.from_json(args.config) if args.config else embedder.TrainConfig()
    for k in ("alpha", "lr", "steps", "batch", "seed", "input_size", "descriptor_dim"):
        v = getattr(args, k)
        if v is not None:
            setattr(cfg, k, v)
    entries, images = _load_refs(args.manifest)
    net = embedder.EmbedderNet.init(cfg.descriptor_dim, seed=cfg.seed, input_size=cfg.input_size)
    history = []
    net = embedder.train(net, images, cfg, history)
    embedder.save_checkpoint(net, args.out)
    loss_log = args.loss_log or str(args.out) + ".loss.csv"
    _write_text(loss_log, "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(history)))
    log.info("trained %d steps on %d products -> %s", cfg.steps, len(entries), args.out)


def cmd_build_db(args):
    _resolve(args, "lf_kernel", "lf_stride", "input_size")
    net = embedder.load_checkpoint(args.weights, args.input_size)
    entries = store.read_manifest(args.manifest)
    db = store.build(entries, net, args.lf_kernel, args.lf_stride)
    store.save(db, args.out)
    log.info("wrote %d records to %s", len(db), args.out)


def _distortion(spec):
    if spec in (None, "none"):
        return None
    if spec == "default":
        return embedder.AugmentConfig()
    return embedder.AugmentConfig.from_dict(_load_json(spec))


def cmd_gen_shelf(args):
    entries, images = _load_refs(args.manifest)
    refs = [(e.product_id, e.category_id, img) for e, img in zip(entries, images)]
    if args.category is not None:
        refs = [r for r in refs if r[1] == args.category]
        if not refs:
            raise ValidationError(f"no products in category {args.category!r}")
    rng = np.random.default_rng(args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = detection.gen_shelf(refs, args.rows, args.cols, rng, _distortion(args.distortion),
                                args.mode, jitter_frac=args.jitter, name=f"{args.name}.png")
    write_image(out / scene.name, scene.image)
    detection.write_ground_truth(scene, out / f"{args.name}.gt.jsonl")


def _params(args):
    return MatchWeightParams(epsilon=float(args.epsilon), tau_d=float(args.tau_d),
                             conf_mc=float(args.conf_mc), k=int(args.k))


def cmd_recognize(args):
    _resolve(args, "stages", "k", "tau_d", "conf_mc", "epsilon", "lf_kernel", "lf_stride",
             "seed", "input_size", "protocol", "iou", "noise_jitter", "noise_drop", "noise_fp")
    params = _params(args)
    net = embedder.load_checkpoint(args.weights, args.input_size)
    db = store.load(args.db)
    scenes = {Path(p).name: read_image(p) for p in args.scene}
    gt = detection.load_ground_truth(args.gt) if args.gt else None
    if args.detections:
        bounds = {n: (im.shape[1], im.shape[0]) for n, im in scenes.items()}
        proposals = detection.load_proposals(args.detections, bounds)
    elif gt is not None:
        proposals = {}
        noise = detection.DetectorNoise(args.noise_jitter, args.noise_drop, args.noise_fp)
        for i, (name, image) in enumerate(sorted(scenes.items())):
            boxes = gt.get(name, (None, []))[1]
            scene = detection.ShelfScene(image, boxes, boxes, name=name)
            proposals[name] = detection.stub_detect(scene, noise, np.random.default_rng([args.seed, i]))
    else:
        raise ValidationError("recognize needs --detections or --gt (stub detector fallback)")

    combos = ABLATION if args.ablation else (("", tuple(parse_stages(args.stages))),)
    if args.ablation and gt is None:
        raise ValidationError("--ablation needs --gt to score each stage combination")
    rows = []
    for tag, stages in combos:
        recs = []
        for name in sorted(scenes):
            recs += pipeline.recognize(scenes[name], proposals.get(name, []), net, db, params,
                                       stages, args.lf_kernel, args.lf_stride)
        if not args.ablation:
            pipeline.write_recognitions(recs, args.out, db)
            continue
        out_dir = Path(args.out_dir or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        pipeline.write_recognitions(recs, out_dir / f"recognitions_{tag}.jsonl", db)
        report = _score(recs, gt, args.protocol, args.iou)
        evaluation.write_report(report, out_dir / f"report_{tag}.json", out_dir / f"pr_curve_{tag}.csv")
        rows.append((tag, report.map, report.pr, report.mamca))
    if args.ablation:
        lines = ["stages,map,pr,mamca"] + [f"{t},{m!r},{p!r},{a!r}" for t, m, p, a in rows]
        _write_text(Path(args.out_dir or ".") / "ablation.csv", "\n".join(lines) + "\n")


def _score(recs, gt, protocol, iou):
    preds = pipeline.group_by_image(pipeline.to_predictions(recs))
    gt_boxes = {name: boxes for name, (_, boxes) in gt.items()}
    return evaluation.evaluate(preds, gt_boxes, evaluation.MatchProtocol(protocol, float(iou)))


def cmd_evaluate(args):
    _resolve(args, "protocol", "iou")
    recs = pipeline.read_recognitions(args.recognitions)
    gt = detection.load_ground_truth(args.gt)
    report = _score(recs, gt, args.protocol, args.iou)
    curve = args.pr_curve or str(Path(args.out).with_suffix("")) + ".pr_curve.csv"
    evaluation.write_report(report, args.out, curve)
    print(f"mAP {report.map:.4f}  PR {report.pr:.4f}  mAMCA {report.mamca:.4f}")


def cmd_make_catalog(args):
    cat = synth.make_catalog(args.n_products, args.n_categories, args.seed, args.size)
    print(synth.write_catalog(cat, args.out_dir))


def build_parser():
    p = argparse.ArgumentParser(prog="shelfrec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("defaults", help="write the default training config as JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_defaults)

    s = sub.add_parser("train", help="train the embedder on reference images")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--loss-log")
    s.add_argument("--alpha", type=float)
    s.add_argument("--lr", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--input-size", type=int)
    s.add_argument("--descriptor-dim", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("build-db", help="describe reference images into a database file")
    s.add_argument("--manifest", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--lf-kernel", type=int)
    s.add_argument("--lf-stride", type=int)
    s.add_argument("--input-size", type=int)
    s.set_defaults(func=cmd_build_db)

    s = sub.add_parser("gen-shelf", help="render a synthetic shelf scene with ground truth")
    s.add_argument("--manifest", required=True)
    s.add_argument("--rows", type=int, default=5)
    s.add_argument("--cols", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--name", default="scene")
    s.add_argument("--mode", choices=detection.MODES, default="management")
    s.add_argument("--distortion", default="none", help="none, default, or an augmentation JSON file")
    s.add_argument("--jitter", type=float, default=0.1)
    s.add_argument("--category", help="only use products of this category")
    s.set_defaults(func=cmd_gen_shelf)

    s = sub.add_parser("recognize", help="recognise products in scene images")
    s.add_argument("--scene", action="append", required=True)
    s.add_argument("--db", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--detections")
    s.add_argument("--gt", help="ground truth; drives the stub detector when --detections is absent")
    s.add_argument("--out", default="recognitions.jsonl")
    s.add_argument("--config")
    s.add_argument("--stages", help="comma-separated subset of lf,mc,th ('' for none)")
    s.add_argument("--k", type=int)
    s.add_argument("--tau-d", type=float)
    s.add_argument("--conf-mc", type=float)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--lf-kernel", type=int)
    s.add_argument("--lf-stride", type=int)
    s.add_argument("--input-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--noise-jitter", type=float)
    s.add_argument("--noise-drop", type=float)
    s.add_argument("--noise-fp", type=float)
    s.add_argument("--ablation", action="store_true",
                   help="run every stage combination and write one report per combination")
    s.add_argument("--out-dir")
    s.add_argument("--protocol", choices=("customer", "management"))
    s.add_argument("--iou", type=float)
    s.set_defaults(func=cmd_recognize)

    s = sub.add_parser("evaluate", help="score recognitions against ground truth")
    s.add_argument("--recognitions", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--protocol", choices=("customer", "management"))
    s.add_argument("--iou", type=float)
    s.add_argument("--config")
    s.add_argument("--out", default="report.json")
    s.add_argument("--pr-curve")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("make-catalog", help="write a procedural product catalogue and manifest")
    s.add_argument("--n-products", type=int, default=50)
    s.add_argument("--n-categories", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_make_catalog)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IOFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except UndefinedMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ShelfRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
