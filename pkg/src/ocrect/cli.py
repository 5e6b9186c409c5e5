"""Command-line entry point: ``ocrect <subcommand> ...``.

Exit codes: 0 success, 1 check failure, 2 input/validation error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .corr import CorrelationMatrix, build_correlation, read_correlation, write_correlation
from .data import (FormatError, GenerationError, SynthParams, ValidationError, generate_synthetic,
                   load_dataset, read_mask, read_tags, write_dataset, write_logits, write_mask)
from .gradcheck import TOLERANCE, run_gradcheck
from .metrics import evaluate, oc_error_stats, oc_pixel_counts
from .ocr import OcrConfig, PixelSelect, Split, oc_mask, rect_loss_pixel, split_groups
from .train import TrainConfig, TrainingDiverged, load_model, save_model, train

EXIT_CHECK_FAILED = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    pass


# ---------------------------------------------------------------- config files

_OCR_KEYS = {f.name for f in fields(OcrConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"ocr"}


def _parse_bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _coerce(key, value):
    types = {f.name: f.type for f in fields(TrainConfig)} | {f.name: f.type for f in fields(OcrConfig)}
    t = str(types[key])
    if key == "split":
        return Split(value.strip().lower())
    if key == "pixel_select":
        return PixelSelect(value.strip().lower())
    if t == "bool":
        return _parse_bool(value)
    if t == "int":
        return int(value)
    return float(value)


def read_config(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _OCR_KEYS | _TRAIN_KEYS:
            raise InputError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def build_train_config(file_values: dict, overrides: dict) -> TrainConfig:
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    ocr = OcrConfig(**{k: v for k, v in merged.items() if k in _OCR_KEYS})
    return TrainConfig(ocr=ocr, **{k: v for k, v in merged.items() if k in _TRAIN_KEYS})


# ---------------------------------------------------------------- helpers

def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=False, allow_nan=False, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _int_list(s: str) -> list[int]:
    return [int(v) for v in s.replace(" ", "").split(",") if v]


def _float_list(s: str) -> list[float]:
    return [float(v) for v in s.replace(" ", "").split(",") if v]


def _mask_files(d) -> dict[str, Path]:
    d = Path(d)
    if not d.is_dir():
        raise InputError(f"{d}: not a directory")
    return {p.stem: p for p in sorted(d.glob("*.pgm"))}


def _infer_classes(tag_sets, masks) -> int:
    c = max(max(t.tags) for t in tag_sets) if tag_sets else 1
    for m in masks:
        v = m[m != 255]
        if v.size:
            c = max(c, int(v.max()))
    return max(c, 1)


def _nan_to_none(x):
    return None if x is None or (isinstance(x, float) and x != x) else x


# ---------------------------------------------------------------- subcommands

def cmd_build_corr(args):
    tag_sets = read_tags(args.tags, args.classes)
    m = build_correlation(tag_sets, args.classes)
    write_correlation(m, args.out)
    print(f"wrote {args.classes + 1}x{args.classes + 1} correlation matrix from {m.num_images} images to {args.out}")
    return 0


def cmd_synth_gen(args):
    params = SynthParams()
    samples = generate_synthetic(args.seed, args.images + args.eval_images, args.classes, args.features,
                                 args.height, args.width, args.noise_rate, params)
    meta = {"seed": args.seed, "num_classes": args.classes, "num_features": args.features,
            "height": args.height, "width": args.width, "noise_rate": args.noise_rate,
            "generator": asdict(params)}
    write_dataset(samples, args.out_dir, meta, num_eval=args.eval_images)
    oc_seeded = sum(bool(set(np.unique(s.pseudo_mask)) - {0, 255} - set(s.tags.tags)) for s in samples)
    print(f"wrote {len(samples)} samples ({args.eval_images} eval) to {args.out_dir}; "
          f"{oc_seeded} pseudo masks contain out-of-tag classes")
    return 0


_TRAIN_FLAGS = {
    "epochs": int, "batch_size": int, "learning_rate": float, "momentum": float, "weight_decay": float,
    "lr_decay_gamma": float, "seed": int, "ocr_warmup": int,
    "alpha": float, "delta": float, "t": float,
}


def cmd_train(args):
    file_values = read_config(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in _TRAIN_FLAGS}
    overrides["split"] = Split(args.split) if args.split else None
    overrides["pixel_select"] = PixelSelect(args.pixel_select) if args.pixel_select else None
    overrides["standardize"] = False if args.no_standardize else None
    cfg = build_train_config(file_values, overrides)
    if args.no_ocr:
        cfg = replace(cfg, ocr=replace(cfg.ocr, pixel_select=PixelSelect.NONE))
    meta, train_set, eval_set = load_dataset(args.data)
    c = int(meta["num_classes"])
    corr = read_correlation(args.corr) if args.corr else build_correlation([s.tags for s in train_set], c)
    if corr.num_classes != c:
        raise InputError(f"correlation matrix covers {corr.num_classes} classes, data has {c}")
    model, log = train(train_set, corr, cfg, eval_set or None)
    save_model(model, args.out)
    with open(args.log, "w") as fh:
        for rec in log:
            rec = {k: _nan_to_none(rec.get(k)) for k in
                   ("epoch", "lr", "l_seg", "l_rec", "miou", "oc_image_error_rate", "oc_pixel_fraction")}
            fh.write(json.dumps(rec) + "\n")
    last = log[-1]
    print(f"trained {cfg.epochs} epochs; final l_seg={last['l_seg']:.6f} l_rec={last['l_rec']:.6f}"
          + (f" miou={last['miou']:.4f} oc_image_error_rate={last['oc_image_error_rate']:.4f}"
             if "miou" in last else ""))
    return 0


def cmd_predict(args):
    meta, train_set, eval_set = load_dataset(args.data)
    model = load_model(args.model)
    samples = {"train": train_set, "eval": eval_set, "all": train_set + eval_set}[args.split]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.logits_dir:
        Path(args.logits_dir).mkdir(parents=True, exist_ok=True)
    for s in samples:
        z = model.logits(s.features)
        write_mask(np.argmax(z, axis=0).astype(np.uint8), out / f"{s.image_id}.pgm")
        if args.logits_dir:
            write_logits(z, Path(args.logits_dir) / f"{s.image_id}.ocrl")
    print(f"wrote {len(samples)} predictions to {out}")
    return 0


def cmd_eval(args):
    preds = _mask_files(args.pred_dir)
    gts = _mask_files(args.gt_dir)
    tags = {t.image_id: t for t in read_tags(args.tags, args.classes)}
    if not preds:
        raise InputError(f"{args.pred_dir}: no .pgm predictions")
    missing = [i for i in preds if i not in gts or i not in tags]
    if missing:
        raise InputError(f"no ground truth or tags for: {', '.join(missing[:5])}")
    ids = list(preds)
    p = [read_mask(preds[i], args.classes) for i in ids]
    g = [read_mask(gts[i], args.classes) for i in ids]
    t = [tags[i] for i in ids]
    c = args.classes or _infer_classes(t, p + g)
    rep = evaluate(p, g, t, c + 1)
    d = rep.to_dict()
    d["miou"] = _nan_to_none(d["miou"])
    d["pixel_accuracy"] = _nan_to_none(d["pixel_accuracy"])
    d = {"num_images": len(ids), "num_classes": c, **d}
    if args.report:
        Path(args.report).write_text(_dump(d) + "\n")
    print(f"images: {len(ids)}  classes: {c}")
    print(f"mIoU: {d['miou']:.6f}  pixel accuracy: {d['pixel_accuracy']:.6f}")
    print(f"OC image error rate: {d['oc_image_error_rate']:.6f}  OC pixel fraction: {d['oc_pixel_fraction']:.6f}")
    for k, v in enumerate(d["per_class_iou"]):
        print(f"  class {k:3d}: " + ("undefined" if v is None else f"{v:.6f}"))
    return 0


def cmd_audit(args):
    preds = _mask_files(args.pred_dir)
    tags = {t.image_id: t for t in read_tags(args.tags, args.classes)}
    missing = [i for i in preds if i not in tags]
    if missing:
        raise InputError(f"no tags for: {', '.join(missing[:5])}")
    ids = list(preds)
    masks = [read_mask(preds[i], args.classes) for i in ids]
    t = [tags[i] for i in ids]
    c = args.classes or _infer_classes(t, masks)
    findings = []
    for i, m, ts in zip(ids, masks, t):
        counts = oc_pixel_counts(m, ts, c + 1)
        if counts:
            findings.append({"id": i, "oc_pixels": sum(counts.values()),
                             "classes": {str(k): v for k, v in counts.items()}})
    rate, frac = oc_error_stats(masks, t, c + 1)
    report = {"images": len(ids), "images_with_oc": len(findings),
              "oc_pixels": sum(f["oc_pixels"] for f in findings),
              "oc_image_error_rate": rate, "oc_pixel_fraction": frac, "findings": findings}
    if args.report:
        Path(args.report).write_text(_dump(report) + "\n")
    for f in findings:
        cls = ", ".join(f"{k}:{v}" for k, v in f["classes"].items())
        print(f"{f['id']}: {f['oc_pixels']} OC pixels ({cls})")
    print(f"total: {report['images_with_oc']}/{report['images']} images with OC pixels, "
          f"{report['oc_pixels']} OC pixels; image rate {rate:.6f}, pixel fraction {frac:.6f}")
    return 0


def cmd_gradcheck(args):
    rep = run_gradcheck(trials=args.trials, max_classes=args.classes, seed=args.seed, perturb=args.perturb)
    for name, err in rep.max_error.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:9s} max relative error {err:.3e}  {status}")
    print(f"trials={rep.trials} classes<={args.classes} seed={args.seed} tolerance={TOLERANCE:g}: "
          + ("PASS" if rep.passed else "FAIL"))
    return 0 if rep.passed else EXIT_CHECK_FAILED


def cmd_loss(args):
    z = np.asarray(_float_list(args.logits), dtype=np.float64)
    if z.size < 2 or not np.isfinite(z).all():
        raise InputError("--logits needs at least two finite values (background first)")
    c = z.size - 1
    from .data import TagSet
    tags = TagSet("cli", tuple(_int_list(args.tags))).validate(c)
    if args.corr:
        m = read_correlation(args.corr)
        if m.num_classes != c:
            raise InputError(f"correlation matrix covers {m.num_classes} classes, logits cover {c}")
    else:
        m = CorrelationMatrix(np.zeros((c + 1, c + 1)), 0)
    cfg = OcrConfig(delta=args.delta, t=args.t, split=Split(args.split))
    split = split_groups(z, tags, m, cfg)
    res = rect_loss_pixel(z, split, cfg.delta)
    print(f"m_oc: {oc_mask(z, tags)}")
    print(f"anchor: {split.anchor}")
    print(f"ic: {list(split.ic)}")
    print(f"oc: {list(split.oc)}")
    print(f"loss: {res.value!r}")
    print("grad: [" + ", ".join(repr(float(g)) for g in res.grad) + "]")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ocrect", description="Out-of-candidate rectification toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("build-corr", help="build the class co-occurrence matrix from a tag file")
    s.add_argument("--tags", required=True, help="JSON-lines tag file")
    s.add_argument("--classes", type=int, required=True, help="number of foreground classes C")
    s.add_argument("--out", required=True, help="output CSV path")
    s.set_defaults(func=cmd_build_corr)

    s = sub.add_parser("synth-gen", help="generate a synthetic dataset with noisy pseudo masks")
    s.add_argument("--seed", type=int, required=True, help="random seed")
    s.add_argument("--images", type=int, required=True, help="number of training images")
    s.add_argument("--classes", type=int, required=True, help="number of foreground classes C")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.add_argument("--noise-rate", type=float, default=0.3, help="fraction of object sub-regions relabeled (default 0.3)")
    s.add_argument("--eval-images", type=int, default=0, help="extra held-out images (default 0)")
    s.add_argument("--features", type=int, default=16, help="feature channels F (default 16)")
    s.add_argument("--height", type=int, default=48, help="image height (default 48)")
    s.add_argument("--width", type=int, default=48, help="image width (default 48)")
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("train", help="train the linear pixel model on a synthetic dataset")
    s.add_argument("--data", required=True, help="dataset directory written by synth-gen")
    s.add_argument("--config", help="key=value config file; flags override it")
    s.add_argument("--no-ocr", action="store_true", help="disable rectification (pixel_select=none)")
    s.add_argument("--out", required=True, help="output model file (OCRM)")
    s.add_argument("--log", required=True, help="output JSON-lines training log")
    s.add_argument("--corr", help="correlation CSV (default: built from the training tags)")
    for name, typ in _TRAIN_FLAGS.items():
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None,
                       help=f"override {name} ({typ.__name__})")
    s.add_argument("--split", choices=[v.value for v in Split], default=None, help="override split strategy")
    s.add_argument("--pixel-select", dest="pixel_select", choices=[v.value for v in PixelSelect], default=None,
                   help="override rectified pixel selection")
    s.add_argument("--no-standardize", action="store_true", help="optimize on raw rather than standardized features")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="write prediction masks for a dataset split")
    s.add_argument("--model", required=True, help="model file (OCRM)")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out-dir", required=True, help="directory for <id>.pgm predictions")
    s.add_argument("--split", choices=["eval", "train", "all"], default="eval", help="which images (default eval)")
    s.add_argument("--logits-dir", help="also write <id>.ocrl logits here")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="mIoU and OC error statistics of prediction masks")
    s.add_argument("--pred-dir", required=True, help="directory of <id>.pgm predictions")
    s.add_argument("--gt-dir", required=True, help="directory of <id>.pgm ground truth")
    s.add_argument("--tags", required=True, help="JSON-lines tag file")
    s.add_argument("--report", help="write the report as JSON here")
    s.add_argument("--classes", type=int, help="number of foreground classes C (default: inferred)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("audit", help="list predicted pixels outside each image's tag set")
    s.add_argument("--pred-dir", required=True, help="directory of <id>.pgm predictions")
    s.add_argument("--tags", required=True, help="JSON-lines tag file")
    s.add_argument("--report", help="write findings as JSON here")
    s.add_argument("--classes", type=int, help="number of foreground classes C (default: inferred)")
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    s.add_argument("--trials", type=int, default=100, help="random problems (default 100)")
    s.add_argument("--classes", type=int, default=10, help="max foreground classes (default 10)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    s.add_argument("--perturb", type=float, default=0.0, help="add this to analytic gradients (negative control)")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("loss", help="single-pixel rectification loss calculator")
    s.add_argument("--logits", required=True, help="comma-separated logits, background first (use --logits=-1,2,...)")
    s.add_argument("--tags", required=True, help="comma-separated tag classes")
    s.add_argument("--corr", help="correlation CSV (default: all zeros)")
    s.add_argument("--delta", type=float, default=2.0, help="margin (default 2)")
    s.add_argument("--t", type=float, default=0.2, help="IC filter threshold (default 0.2)")
    s.add_argument("--split", choices=[v.value for v in Split], default="ada", help="split strategy (default ada)")
    s.set_defaults(func=cmd_loss)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FormatError, ValidationError, GenerationError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
