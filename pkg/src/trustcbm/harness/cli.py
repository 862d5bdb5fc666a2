"""Command-line entry point: ``trustcbm <command> ...``.

Commands: gen-data, train, eval, trust, patch-drop, benchmark, report.
Run ``trustcbm <command> --help`` for the flags of each.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..attribution import METHODS, concept_cams, model_localizer, save_heatmap
from ..backbone import to_tensor
from ..data import GeneratorSpec, generate_synthetic_dataset, load_cub_annotations, load_dataset, save_dataset
from ..losses import LossWeights
from ..metric import BoxSpec, trust_score
from ..models import PrototypeCBM, VanillaCBM
from .benchmark import BenchmarkReport, BenchmarkSpec, default_benchmark, run_benchmark
from .config import ConfigError, TrainConfig, load_config
from .patchdrop import MODES, patch_drop_experiment
from .training import evaluate, load_checkpoint, load_data, train

log = logging.getLogger("trustcbm")

# TrainConfig fields exposed as flags, with their argparse types
_TRAIN_FLAGS = {
    "model": str, "name": str, "epochs": int, "warmup_epochs": int, "lr": float, "head_lr": float,
    "batch_size": int, "num_prototypes": int, "dim": int, "levels": int, "top_n": int,
    "similarity": str, "localization": str,
}
_WEIGHT_FLAGS = ("concept", "task", "cla", "cia", "pa", "div_margin_sq")


def _add_data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--data", help="saved dataset directory (from gen-data)")
    g.add_argument("--cub", help="CUB-format annotation root")
    p.add_argument("--image-size", type=int, default=224, help="square size for --cub images")
    p.add_argument("--no-crop", action="store_true", help="do not crop --cub images to the bounding box")


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (TrainConfig field names as keys)")
    p.add_argument("--seed", type=int, required=True)
    for name, typ in _TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), type=typ, dest=name)
    p.add_argument("--modules", help="comma-separated subset of cla,cia,pa")
    for name in _WEIGHT_FLAGS:
        p.add_argument(f"--w-{name.replace('_', '-')}", type=float, dest=f"w_{name}")


def _dataset(args, spec: dict | None = None):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    if getattr(args, "cub", None):
        return load_cub_annotations(args.cub, crop_to_bbox=not args.no_crop, image_size=args.image_size)
    return load_data(spec or TrainConfig().dataset)


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    kw = {k: getattr(args, k) for k in _TRAIN_FLAGS if getattr(args, k) is not None}
    if args.modules is not None:
        kw["modules"] = tuple(m for m in args.modules.split(",") if m)
    weights = {n: getattr(args, f"w_{n}") for n in _WEIGHT_FLAGS if getattr(args, f"w_{n}") is not None}
    if weights:
        kw["weights"] = LossWeights(**{**cfg.weights.to_dict(), **weights})
    kw["seed"] = args.seed
    return cfg.with_overrides(**kw)


def _box(args) -> BoxSpec:
    if args.box_pixels is not None:
        return BoxSpec(fraction=None, height=args.box_pixels, width=args.box_pixels)
    return BoxSpec(fraction=args.box_fraction)


def _add_box_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--box-fraction", type=float, default=BoxSpec().fraction, help="box side / image side")
    p.add_argument("--box-pixels", type=int, help="absolute box side in pixels (overrides --box-fraction)")


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    spec = GeneratorSpec()
    if args.config:
        spec = GeneratorSpec.from_dict({**GeneratorSpec().to_dict(), **json.loads(Path(args.config).read_text())})
    over = {k: getattr(args, k) for k in ("seed", "samples_per_category", "test_samples_per_category",
                                          "num_categories", "image_size") if getattr(args, k) is not None}
    if over:
        spec = GeneratorSpec.from_dict({**spec.to_dict(), **over})
    ds = generate_synthetic_dataset(spec)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = _dataset(args, cfg.dataset)
    _, rec = train(cfg, ds, args.out, _box(args))
    _print({k: v for k, v in rec.to_dict().items() if k not in ("history", "config")})
    return 0


def cmd_eval(args) -> int:
    ds = _dataset(args)
    model, _ = load_checkpoint(args.checkpoint, ds)
    split = ds.split(args.split) if args.split != "all" else ds
    c_acc, k_acc = evaluate(model, split)
    _print({"concept_accuracy": c_acc, "class_accuracy": k_acc, "split": args.split, "images": len(split)})
    return 0


def cmd_trust(args) -> int:
    ds = _dataset(args)
    model, cfg = load_checkpoint(args.checkpoint, ds)
    split = ds.split(args.split) if args.split != "all" else ds
    if isinstance(model, PrototypeCBM):
        loc, source = model_localizer(model), "prototype"
    elif isinstance(model, VanillaCBM):
        method = args.method or cfg.localization
        loc, source = model_localizer(model, method), method
    else:
        print("trust is undefined for a model without a concept head (n/a)", file=sys.stderr)
        return 2
    report = trust_score(loc, split, _box(args), target=args.target, source=source)
    if args.out:
        report.save(args.out)
    if args.records:
        report.save_records_csv(args.records)
    if args.heatmaps:
        _heatmaps(model, split, args.heatmaps, args.heatmap_count, source)
    _print({"score": report.score, "rates": report.rates(), "excluded": report.excluded})
    return 0


def _heatmaps(model, dataset, out_dir, count: int, source: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = dataset.images()[:count]
    if isinstance(model, PrototypeCBM):
        maps = model_localizer(model)(images)
    else:
        maps = concept_cams(model, to_tensor(images), None, source).detach().double().numpy()
    for s, img, m in zip(dataset.samples[:count], images, maps):
        for c in np.flatnonzero(s.concept_labels):
            save_heatmap(img, m[c], out / f"{s.sample_id}_c{c}.png")


def cmd_patch_drop(args) -> int:
    ds = _dataset(args)
    model, _ = load_checkpoint(args.checkpoint, ds)
    split = ds.split(args.split) if args.split != "all" else ds
    report = patch_drop_experiment(model, split, modes=tuple(args.modes.split(",")), seed=args.seed,
                                   point_radius=args.point_radius)
    if args.out:
        report.save(args.out)
    if args.csv:
        report.save_csv(args.csv)
    _print({"aggregate": report.aggregate, "reduction": {m: report.reduction(m) for m in report.aggregate if m != "none"}})
    return 0


def cmd_benchmark(args) -> int:
    spec = BenchmarkSpec.load(args.config) if args.config else default_benchmark()
    configs = spec.configs(args.seed)
    ds = _dataset(args, spec.dataset_spec())
    box = BoxSpec(fraction=spec.box_fraction) if args.box_pixels is None else _box(args)
    report = run_benchmark(configs, ds, box, args.out)
    print(report.markdown(), end="")
    if report.failed:
        print(f"{len(report.failed)} run(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    report = BenchmarkReport.load(args.benchmark)
    text = report.markdown()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 1 if report.failed else 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trustcbm", description="Concept trustworthiness benchmark for CBMs")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and save the synthetic part-annotated dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of generator fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples-per-category", type=int)
    p.add_argument("--test-samples-per-category", type=int)
    p.add_argument("--num-categories", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _add_train_args(p)
    _add_data_args(p)
    _add_box_args(p)
    p.add_argument("--out", required=True, help="output directory for checkpoint and run record")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("eval", cmd_eval, "concept and class accuracy of a checkpoint"),
        ("trust", cmd_trust, "concept trustworthiness score of a checkpoint"),
        ("patch-drop", cmd_patch_drop, "accuracy after zeroing part regions"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        _add_data_args(p)
        p.add_argument("--split", default="test", choices=("train", "test", "all"))
        p.set_defaults(func=func)
        if name == "trust":
            _add_box_args(p)
            p.add_argument("--method", choices=METHODS, help="CAM method for vanilla models")
            p.add_argument("--target", default="point", choices=("point", "region"))
            p.add_argument("--out", help="write the TrustReport JSON here")
            p.add_argument("--records", help="write per-image box records (CSV) here")
            p.add_argument("--heatmaps", help="directory for heatmap PNGs")
            p.add_argument("--heatmap-count", type=int, default=4)
        if name == "patch-drop":
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--modes", default=",".join(MODES))
            p.add_argument("--point-radius", type=float, help="drop radius around point-only annotations")
            p.add_argument("--out", help="JSON report path")
            p.add_argument("--csv", help="CSV table path")

    p = sub.add_parser("benchmark", help="train and score the model suite")
    p.add_argument("--config", help="benchmark JSON (default: the shipped desk-scale suite)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_data_args(p)
    _add_box_args(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("report", help="render a saved benchmark as a table")
    p.add_argument("--benchmark", required=True, help="benchmark output directory")
    p.add_argument("--out", help="write the markdown table here")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
