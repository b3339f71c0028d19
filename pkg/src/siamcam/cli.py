"""Command line entry point: ``siamcam <command> ...``.

Every command writes a run manifest (``run_manifest.json`` in its output
directory, or one JSON line on stderr for commands without one). Errors are
reported as a single ``error[<code>]: message`` line with exit status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import SiamCamError

log = logging.getLogger("siamcam")

OVERRIDES = {
    # flag: (config field, type)
    "--seed": ("seed", int),
    "--epochs": ("epochs", int),
    "--batch-size": ("batch_size", int),
    "--lr": ("learning_rate", float),
    "--image-size": ("image_size", int),
    "--backbone": ("backbone_id", str),
    "--pretrained-weights": ("pretrained_weights", str),
    "--embedding-dim": ("embedding_dim", int),
    "--margin": ("margin", float),
    "--threshold": ("threshold", float),
    "--loss-on": ("loss_on", str),
    "--gate": ("crop_similarity_gate", float),
    "--bbox-fraction": ("bbox_fraction", float),
}


def _add_overrides(p: argparse.ArgumentParser, *flags: str) -> None:
    for flag in flags:
        name, typ = OVERRIDES[flag]
        p.add_argument(flag, dest=name, type=typ, default=None, help=f"override {name}")


def _overrides(args: argparse.Namespace) -> dict:
    return {name: getattr(args, name) for name, _ in OVERRIDES.values() if getattr(args, name, None) is not None}


def _config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = _overrides(args)
    if getattr(args, "data", None) is not None:
        overrides["dataset_root"] = str(args.data)
    return load_config(getattr(args, "config", None), overrides)


class Run:
    def __init__(self, command: str, argv: list[str]):
        self.command, self.argv = command, argv
        self.start = time.perf_counter()
        self.config: ExperimentConfig | None = None
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def manifest(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "tool_version": __version__,
            "config": None if self.config is None else self.config.to_dict(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seconds": round(time.perf_counter() - self.start, 3),
        }

    def write(self, out_dir: Path | None) -> None:
        text = json.dumps(self.manifest(), sort_keys=True)
        if out_dir is None:
            print(f"manifest: {text}", file=sys.stderr)
        else:
            (out_dir / "run_manifest.json").write_text(text + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args, run: Run) -> Path:
    from .train import fit

    config = run.config = _config(args)
    if not Path(args.data).is_dir():
        raise SiamCamError(f"dataset not found: {args.data}", code="dataset_not_found")
    out = _out_dir(args.out)
    run.inputs = {"data": str(args.data)}
    _, history = fit(config, args.data, out)
    run.outputs = {"checkpoint": str(out / "model.pt"), "history": str(out / "history.json")}
    print(f"best epoch {history.best_epoch}: val_loss {history.val_loss[history.best_epoch - 1]:.5f} "
          f"val_accuracy {history.val_accuracy[history.best_epoch - 1]:.3f}" if history.best_epoch else
          "no epochs run")
    return out


def _load(args, run: Run):
    from .model import load_model

    model = load_model(args.model)
    overrides = _overrides(args)
    config = model.config.replace(**overrides) if overrides else model.config
    model.config = config
    run.config = config
    run.inputs["model"] = str(args.model)
    return model, config


def format_prediction(d: float, threshold: float) -> str:
    from .model import SAME_CLASS, decide, similarity

    verdict = "same class" if decide(d, threshold) == SAME_CLASS else "different class"
    return f"d {d:.4f}, similarity {100 * similarity(d):.1f}%, {verdict}"


def cmd_predict(args, run: Run) -> None:
    from .data import preprocess
    from .model import forward_pair

    model, config = _load(args, run)
    run.inputs.update(a=str(args.a), b=str(args.b))
    trace = forward_pair(model, preprocess(args.a, config.image_size), preprocess(args.b, config.image_size))
    print(format_prediction(float(trace.d), config.threshold))


def cmd_explain(args, run: Run) -> Path:
    import numpy as np

    from .data import load_image, preprocess, resize_rgb
    from .gradcam import BRANCHES, MODES, explain_pair, overlay

    model, config = _load(args, run)
    run.inputs.update(a=str(args.a), b=str(args.b))
    out = _out_dir(args.out)
    images = {"a": args.a, "b": args.b}
    prepared = {k: preprocess(p, config.image_size) for k, p in images.items()}
    bundle = explain_pair(model, prepared["a"], prepared["b"], config)
    files = {}
    for branch in BRANCHES:
        source = np.asarray(resize_rgb(load_image(images[branch]), config.image_size))
        for mode in MODES:
            name = f"{mode}_{branch}.png"
            (out / name).write_bytes(overlay(source, bundle.heatmap(mode, branch), config.overlay_alpha))
            files[f"{mode}_{branch}"] = name
    record = {**bundle.summary(), "threshold": config.threshold, "image_a": str(args.a),
              "image_b": str(args.b), "files": files}
    (out / "bundle.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    run.outputs = {k: str(out / v) for k, v in files.items()} | {"bundle": str(out / "bundle.json")}
    print(format_prediction(bundle.d, config.threshold))
    return out


def cmd_crop_dataset(args, run: Run) -> Path:
    from .crop import crop_split_records
    from .data import index_dataset, stratified_split, write_split_manifest

    model, config = _load(args, run)
    run.inputs["data"] = str(args.data)
    out = Path(args.out)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    records = stratified_split(index_dataset(args.data).records, config.train_fraction,
                               config.val_fraction_of_train, config.seed)
    moved, rows = crop_split_records(model, records, out, config)
    for r in moved:
        if r.split == "test":  # test images are copied untouched
            (out / r.id).parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(r.path, out / r.id)
    write_split_manifest(records, out / "split.tsv")
    n_crop = sum(row.status == "cropped" for row in rows)
    run.outputs = {"dataset": str(out), "audit": str(out / "audit.tsv")}
    print(f"cropped {n_crop} of {len(rows)} train/val images (gate {config.crop_similarity_gate})")
    return out


def cmd_compare(args, run: Run) -> Path:
    from .crop import compare_original_vs_cropped

    config = run.config = _config(args)
    run.inputs = {"data": str(args.data)}
    out = _out_dir(args.out)
    result = compare_original_vs_cropped(config, out, args.data)
    run.outputs = {"report": str(out / "report.json"), "table": str(out / "report.txt"),
                   "audit": str(out / "cropped" / "audit.tsv")}
    print(result.table())
    return out


def cmd_evaluate(args, run: Run) -> None:
    from .data import index_dataset, pairs_by_split, stratified_split
    from .metrics import evaluate, format_table

    model, config = _load(args, run)
    run.inputs["data"] = str(args.data)
    records = stratified_split(index_dataset(args.data).records, config.train_fraction,
                               config.val_fraction_of_train, config.seed)
    pairs = pairs_by_split(records, config.seed)[args.split]
    report = evaluate(model, pairs, config.threshold, average=args.average)
    print(report.to_json())
    print(format_table({args.split: report}))


def cmd_synth(args, run: Run) -> Path:
    from .data import generate_synthetic_dataset

    run.inputs = {}
    out = generate_synthetic_dataset(args.out, args.classes, args.per_class,
                                     (args.image_size, args.image_size), args.seed)
    run.outputs = {"dataset": str(out), "boxes": str(out / "boxes.tsv")}
    print(f"wrote {args.classes * args.per_class} images to {out}")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siamcam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a Siamese model")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_overrides(p, "--seed", "--epochs", "--batch-size", "--lr", "--image-size", "--backbone",
                   "--pretrained-weights", "--embedding-dim", "--margin", "--threshold", "--loss-on")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in [("predict", cmd_predict, "score a pair"),
                              ("explain", cmd_explain, "score a pair and write Grad-CAM overlays")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--model", type=Path, required=True)
        p.add_argument("--a", type=Path, required=True)
        p.add_argument("--b", type=Path, required=True)
        if name == "explain":
            p.add_argument("--out", type=Path, required=True)
        _add_overrides(p, "--threshold")
        p.set_defaults(func=func)

    p = sub.add_parser("crop-dataset", help="write the heatmap-cropped copy of a dataset")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_overrides(p, "--gate", "--bbox-fraction")
    p.set_defaults(func=cmd_crop_dataset)

    p = sub.add_parser("compare", help="original vs cropped training, same test pairs")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_overrides(p, "--seed", "--epochs", "--batch-size", "--lr", "--image-size", "--backbone",
                   "--pretrained-weights", "--embedding-dim", "--margin", "--threshold", "--gate",
                   "--bbox-fraction", "--loss-on")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("evaluate", help="accuracy/AUC/precision/recall on a split's pairs")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--average", choices=("binary", "macro"), default="binary")
    _add_overrides(p, "--threshold")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate the synthetic localized-object dataset")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args.command, argv)
    try:
        out = args.func(args, run)
    except SiamCamError as exc:
        print(exc.one_line(), file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error[{type(exc).__name__.lower()}]: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    run.write(out if isinstance(out, Path) else None)
    return 0


if __name__ == "__main__":
    sys.exit(main())
