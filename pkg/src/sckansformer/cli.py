"""Command-line surface: train, eval, predict, gradcheck, synth, ablate.

Run configuration is a JSON file with "model" and "train" sections plus
dataset/output paths; unknown keys are rejected at every level and CLI
flags override file values. Exit codes: 0 success, 1 verification failure,
2 usage/config error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .data import Dataset, SynthConfig, generate_synthetic, load_folder_dataset, split_dataset
from .gradcheck import run_gradcheck
from .metrics import compute_metrics, confusion, confusion_csv, confusion_svg, report_json
from .model import ModelConfig, SCKansformerModel, ablation_variant, forward
from .serialize import load_checkpoint
from .tensor import ConfigError, ContractError, ShapeError, Tensor, no_grad
from .train import (
    DivergenceError,
    TrainConfig,
    evaluate,
    forward_in_chunks,
    predict_labels,
    preprocess_eval,
    rng_for,
    train_loop,
)

_RUN_FIELDS = ("model", "train", "dataset", "out_dir")


class RunConfig:
    def __init__(self, model=None, train=None, dataset=None, out_dir="run_out"):
        self.model = ModelConfig(**(model or {}))
        self.train = TrainConfig(**(train or {}))
        self.dataset = dataset
        self.out_dir = out_dir

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "dataset": self.dataset,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(_RUN_FIELDS)
        if unknown:
            raise ConfigError(f"unknown run config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(payload)

    def apply_set(self, assignment: str) -> None:
        """Apply one 'section.key=value' override; values parse as JSON."""
        if "=" not in assignment:
            raise ConfigError(f"--set needs section.key=value, got {assignment!r}")
        target, raw = assignment.split("=", 1)
        parts = target.split(".")
        if len(parts) != 2 or parts[0] not in ("model", "train"):
            raise ConfigError(f"--set target must be model.<key> or train.<key>, got {target!r}")
        section, key = parts
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings pass through
        d = getattr(self, section).to_dict()
        if key not in d:
            raise ConfigError(f"unknown {section} config field {key!r}")
        d[key] = value
        setattr(self, section, (ModelConfig if section == "model" else TrainConfig)(**d))


def _load_run_config(args) -> RunConfig:
    run = RunConfig.from_file(args.config) if args.config else RunConfig()
    for assignment in args.set or []:
        run.apply_set(assignment)
    if getattr(args, "dataset", None):
        run.dataset = args.dataset
    if getattr(args, "out_dir", None):
        run.out_dir = args.out_dir
    if getattr(args, "epochs", None) is not None:
        run.apply_set(f"train.epochs={args.epochs}")
    if getattr(args, "seed", None) is not None:
        run.apply_set(f"train.seed={args.seed}")
    return run


def _require_dataset(run: RunConfig) -> Dataset:
    if not run.dataset:
        raise ConfigError("no dataset path given (config field 'dataset' or --dataset)")
    ds = load_folder_dataset(run.dataset)
    k = len(ds.class_names)
    if k != run.model.num_classes:
        raise ConfigError(
            f"dataset has {k} classes but model.num_classes={run.model.num_classes}; "
            f"override with --set model.num_classes={k}"
        )
    return ds


def _write_reports(out_dir: Path, cm, report, class_names) -> None:
    (out_dir / "metrics.json").write_text(report_json(report, class_names))
    (out_dir / "confusion.csv").write_text(confusion_csv(cm, class_names))
    (out_dir / "confusion.svg").write_text(confusion_svg(cm, class_names))


def _eval_artifacts(model, x_eval, y_eval, out_dir: Path, class_names, batch_size: int):
    cm, report = evaluate(model, x_eval, y_eval, len(class_names), batch_size)
    _write_reports(out_dir, cm, report, class_names)
    return report


def _preprocess_stack(images, resize: int, target: int, mean, std) -> np.ndarray:
    return np.stack([preprocess_eval(img, resize, target, mean, std) for img in images])


def cmd_train(args) -> int:
    run = _load_run_config(args)
    ds = _require_dataset(run)
    train_ds, eval_ds = split_dataset(
        ds, run.train.split_ratio,
        seed=int(rng_for(run.train.seed, "split").integers(0, 2 ** 31)),
    )
    model = SCKansformerModel(run.model, rng=rng_for(run.train.seed, "init"))
    out_dir = Path(run.out_dir)
    summary = train_loop(model, train_ds, eval_ds, run.train, out_dir,
                         stop_at_train_acc=args.stop_at_train_acc)
    # report with the best checkpoint, not whatever the last epoch left behind
    tensors, ckpt_cfg = load_checkpoint(summary["checkpoint"])
    best = SCKansformerModel(ModelConfig(**ckpt_cfg["model"]))
    best.load_state(tensors)
    x_eval, y_eval = eval_ds.as_arrays()
    x_eval = _preprocess_stack(x_eval, run.train.eval_resize, run.model.image_h,
                               np.array(ckpt_cfg["norm_mean"]), np.array(ckpt_cfg["norm_std"]))
    report = _eval_artifacts(best, x_eval, y_eval, out_dir, ds.class_names, run.train.batch_size)
    print(json.dumps({
        "epochs_run": summary["epochs_run"],
        "best_epoch": summary["best_epoch"],
        "eval_acc": report["accuracy"],
        "eval_f1": report["macro_f1"],
        "out_dir": str(out_dir),
    }, sort_keys=True))
    return 0


def _load_checkpoint_model(path):
    tensors, cfg = load_checkpoint(path)
    for key in ("model", "train", "class_names", "norm_mean", "norm_std"):
        if key not in cfg:
            raise ContractError(f"checkpoint config lacks {key!r}")
    model = SCKansformerModel(ModelConfig(**cfg["model"]))
    model.load_state(tensors)
    return model, cfg


def cmd_eval(args) -> int:
    model, cfg = _load_checkpoint_model(args.checkpoint)
    ds = load_folder_dataset(args.dataset)
    if ds.class_names != cfg["class_names"]:
        raise ContractError(
            f"dataset classes {ds.class_names} do not match checkpoint classes {cfg['class_names']}"
        )
    x, y = ds.as_arrays()
    x = _preprocess_stack(x, cfg["train"]["eval_resize"], cfg["model"]["image_h"],
                          np.array(cfg["norm_mean"]), np.array(cfg["norm_std"]))
    out_dir = Path(args.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    report = _eval_artifacts(model, x, y, out_dir, ds.class_names,
                             cfg["train"]["batch_size"])
    print(json.dumps({"accuracy": report["accuracy"], "macro_f1": report["macro_f1"],
                      "out_dir": str(out_dir)}, sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    model, cfg = _load_checkpoint_model(args.checkpoint)
    root = Path(args.images)
    if root.is_dir():
        paths = sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".ppm"))
    elif root.is_file():
        paths = [root]
    else:
        raise ContractError(f"{root} is neither an image nor a directory")
    if not paths:
        raise ContractError(f"{root} holds no PNG/PPM images")
    from .data import _decode

    images, kept = [], []
    for p in paths:
        arr = _decode(p)
        if arr is None:
            print(f"skipping unreadable {p}", file=sys.stderr)
            continue
        images.append(arr)
        kept.append(p)
    if not images:
        raise ContractError("no readable images to predict on")
    x = _preprocess_stack(images, cfg["train"]["eval_resize"], cfg["model"]["image_h"],
                          np.array(cfg["norm_mean"]), np.array(cfg["norm_std"]))
    logits = forward_in_chunks(model, x, cfg["train"]["batch_size"])
    # softmax over the last axis, minus the max for stability
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = shifted / shifted.sum(axis=1, keepdims=True)
    labels = predict_labels(logits)
    names = cfg["class_names"]
    for i, (path, label) in enumerate(zip(kept, labels)):
        print(f"{path}\t{names[label]}\t{probs[i][label]:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    ok, _ = run_gradcheck(scope=args.scope, inject_fault=args.inject_fault)
    if not ok:
        print("gradcheck FAILED", file=sys.stderr)
        return 1
    print("gradcheck ok")
    return 0


def cmd_synth(args) -> int:
    longtail = None
    if args.longtail:
        try:
            longtail = [int(v) for v in args.longtail.split(",")]
        except ValueError:
            raise ConfigError(f"--longtail wants comma-separated integers, got {args.longtail!r}")
    cfg = SynthConfig(num_classes=args.classes, samples_per_class=args.per_class,
                      image_h=args.size, image_w=args.size, seed=args.seed,
                      longtail=longtail)
    ds = generate_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    indices = {}
    for img, label in ds.samples:
        name = ds.class_names[label]
        (out / name).mkdir(exist_ok=True)
        i = indices.get(label, 0)
        indices[label] = i + 1
        pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(np.transpose(pixels, (1, 2, 0))).save(out / name / f"{i:05d}.png")
    print(f"wrote {len(ds)} images across {len(ds.class_names)} classes to {out}")
    return 0


_ABLATION_ROWS = (
    ("full", {}),
    ("wo_scconv", {"scconv": False}),
    ("wo_glae", {"glae": False}),
    ("wo_kan", {"kan": False}),
)


def cmd_ablate(args) -> int:
    run = _load_run_config(args)
    ds = _require_dataset(run)
    train_ds, eval_ds = split_dataset(
        ds, run.train.split_ratio,
        seed=int(rng_for(run.train.seed, "split").integers(0, 2 ** 31)),
    )
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, toggles in _ABLATION_ROWS:
        model = ablation_variant(run.model, rng=rng_for(run.train.seed, "init"), **toggles)
        sub = out_dir / name
        summary = train_loop(model, train_ds, eval_ds, run.train, sub)
        tensors, ckpt_cfg = load_checkpoint(summary["checkpoint"])
        best = SCKansformerModel(ModelConfig(**ckpt_cfg["model"]))
        best.load_state(tensors)
        x_eval, y_eval = eval_ds.as_arrays()
        x_eval = _preprocess_stack(x_eval, run.train.eval_resize, run.model.image_h,
                                   np.array(ckpt_cfg["norm_mean"]),
                                   np.array(ckpt_cfg["norm_std"]))
        _, report = evaluate(best, x_eval, y_eval, len(ds.class_names), run.train.batch_size)
        rows.append((name, report))
    lines = ["variant,precision,recall,f1,accuracy"]
    for name, report in rows:
        lines.append(
            f"{name},{report['macro_precision']:.6f},{report['macro_recall']:.6f},"
            f"{report['macro_f1']:.6f},{report['accuracy']:.6f}"
        )
    table = "\n".join(lines) + "\n"
    (out_dir / "ablation.csv").write_text(table)
    print(table, end="")
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config file")
    p.add_argument("--dataset", help="class-per-folder dataset root")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config field, e.g. --set model.hidden=32")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sckansformer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a class-per-folder dataset")
    _add_config_flags(p)
    p.add_argument("--stop-at-train-acc", type=float, default=None,
                   help="stop once train accuracy reaches this value")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("predict", help="predict classes for images")
    p.add_argument("checkpoint")
    p.add_argument("images", help="an image file or a directory of images")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference verification suites")
    p.add_argument("scope", nargs="?", default="all")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic class-per-folder dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--longtail", help="comma-separated per-class counts")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("ablate", help="train the full model and each single-module ablation")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, ContractError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
