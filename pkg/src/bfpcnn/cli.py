"""Command-line entry point: synthetic data generation, preprocessing,
training, evaluation and single-image prediction.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import errors
from .data import CLASS_NAMES, gen_synthetic, ingest, load_dataset
from .model import (
    ModelConfig,
    build_model,
    forward,
    load_checkpoint,
    read_kv_file,
    save_checkpoint,
)
from .preprocess import (
    DEFAULT_TARGET,
    DEFAULT_WINDOW,
    histogram_equalize,
    median_filter,
    normalize,
    preprocess_pipeline,
    read_pgm,
    resize,
    write_pgm,
)
from .tensor import Tensor
from .train import (
    TrainConfig,
    compute_metrics,
    confusion_matrix,
    evaluate,
    history_csv,
    stratified_split,
    train,
)

DATA_ERRORS = (
    errors.MissingClassDir,
    errors.UnreadableImage,
    errors.BadMagic,
    errors.VersionMismatch,
    errors.TruncatedFile,
    errors.ShapeConflict,
    errors.ShapeMismatch,
    errors.ShapeUnderflow,
    errors.EmptyClass,
    errors.EmptyMatrix,
    errors.LabelOutOfRange,
    errors.LengthMismatch,
    OSError,
)


@dataclass
class RunSpec:
    """Fully resolved run settings: defaults, then config file, then flags."""

    model: ModelConfig
    train: TrainConfig
    preprocess_full: bool
    window: int

    def to_kv(self) -> dict[str, str]:
        kv = dict(self.model.to_kv())
        kv.update({
            "train.lr": repr(self.train.learning_rate),
            "train.epochs": str(self.train.epochs),
            "train.batch": str(self.train.batch_size),
            "train.optimizer": self.train.optimizer,
            "train.seed": str(self.train.seed),
            "train.val_fraction": repr(self.train.val_fraction),
            "preprocess.full": "true" if self.preprocess_full else "false",
            "preprocess.window": str(self.window),
        })
        return kv

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "RunSpec":
        known = {"train.lr", "train.epochs", "train.batch", "train.optimizer",
                 "train.seed", "train.val_fraction", "preprocess.full",
                 "preprocess.window"}
        unknown = [k for k in kv if not (k in known or k.startswith("model."))]
        if unknown:
            raise errors.ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        model = ModelConfig.from_kv(kv)
        base = TrainConfig()
        try:
            train_cfg = TrainConfig(
                learning_rate=float(kv.get("train.lr", base.learning_rate)),
                epochs=int(kv.get("train.epochs", base.epochs)),
                batch_size=int(kv.get("train.batch", base.batch_size)),
                optimizer=kv.get("train.optimizer", base.optimizer),
                seed=int(kv.get("train.seed", base.seed)),
                val_fraction=float(kv.get("train.val_fraction", base.val_fraction)),
            )
            full = _parse_bool(kv.get("preprocess.full", "false"))
            window = int(kv.get("preprocess.window", DEFAULT_WINDOW))
        except ValueError as exc:
            raise errors.ConfigError(f"bad configuration value: {exc}") from exc
        return cls(model, train_cfg, full, window)


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("true", "1", "yes"):
        return True
    if value in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def resolve_run_spec(config_path, lr, epochs, batch, seed) -> RunSpec:
    kv: dict[str, str] = {}
    if config_path is not None:
        kv.update(read_kv_file(config_path))
    if lr is not None:
        kv["train.lr"] = repr(lr)
    if epochs is not None:
        kv["train.epochs"] = str(epochs)
    if batch is not None:
        kv["train.batch"] = str(batch)
    if seed is not None:
        kv["train.seed"] = str(seed)
        kv.setdefault("model.seed", str(seed))
    return RunSpec.from_kv(kv)


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1; argparse's default of 2 is reserved for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="bfpcnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", help="write a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--per-class", type=int, required=True)
    gen.add_argument("--size", type=int, required=True)
    gen.add_argument("--seed", type=int, required=True)

    prep = sub.add_parser("preprocess", help="equalize, filter and resize a tree")
    prep.add_argument("--in", dest="in_root", required=True)
    prep.add_argument("--out", required=True)
    prep.add_argument("--target", type=int, default=DEFAULT_TARGET)
    prep.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    prep.add_argument("--stages", action="store_true",
                      help="also write per-stage intermediate images")

    tr = sub.add_parser("train", help="train a model into a run directory")
    tr.add_argument("--data", required=True)
    tr.add_argument("--config")
    tr.add_argument("--lr", type=float)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)

    pred = sub.add_parser("predict", help="classify one PGM image")
    pred.add_argument("--ckpt", required=True)
    pred.add_argument("--image", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "gen": cmd_gen,
        "preprocess": cmd_preprocess,
        "train": cmd_train,
        "eval": cmd_eval,
        "predict": cmd_predict,
    }
    try:
        return handlers[args.command](args)
    except errors.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def cmd_gen(args) -> int:
    manifest = gen_synthetic(args.out, args.per_class, args.size, args.seed)
    for name, count in zip(manifest.class_names, manifest.counts):
        print(f"{name}: {count}")
    print(f"wrote {sum(manifest.counts)} images under {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    manifest = ingest(args.in_root)
    out_root = Path(args.out)
    written = 0
    for name in manifest.class_names:
        (out_root / name).mkdir(parents=True, exist_ok=True)
        if args.stages:
            for stage in ("equalized", "filtered", "resized"):
                (out_root / "stages" / stage / name).mkdir(parents=True, exist_ok=True)
        for path in manifest.files[name]:
            equalized = histogram_equalize(read_pgm(path))
            filtered = median_filter(equalized, args.window)
            resized = resize(filtered, args.target)
            write_pgm(resized, out_root / name / path.name)
            if args.stages:
                write_pgm(equalized, out_root / "stages" / "equalized" / name / path.name)
                write_pgm(filtered, out_root / "stages" / "filtered" / name / path.name)
                write_pgm(resized, out_root / "stages" / "resized" / name / path.name)
            written += 1
    print(f"preprocessed {written} images into {out_root}")
    return 0


def _write_confusion_csvs(cm, class_names, raw_path: Path, norm_path: Path) -> None:
    header = ",".join(class_names)
    raw_lines = [header] + [",".join(str(v) for v in row) for row in cm.counts]
    raw_path.write_text("\n".join(raw_lines) + "\n")
    norm = cm.normalized()
    norm_lines = [header] + [",".join(f"{v:.6f}" for v in row) for row in norm]
    norm_path.write_text("\n".join(norm_lines) + "\n")


def _metrics_text(metrics, class_names) -> str:
    lines = [f"accuracy {metrics.accuracy:.6f}"]
    for i, name in enumerate(class_names):
        lines.append(f"{name} precision {metrics.precision[i]:.6f} "
                     f"recall {metrics.recall[i]:.6f} f1 {metrics.f1[i]:.6f}")
    lines.append(f"macro precision {metrics.macro_precision:.6f} "
                 f"recall {metrics.macro_recall:.6f} f1 {metrics.macro_f1:.6f}")
    return "\n".join(lines) + "\n"


def _write_kv(path: Path, kv: dict[str, str]) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in sorted(kv.items())))


class _StagingDir:
    """Build run artifacts in a sibling temp dir, renamed into place last."""

    def __init__(self, final: Path):
        self.final = Path(final)
        if self.final.exists():
            raise errors.ConfigError(f"output directory {final} already exists")
        self.tmp = self.final.with_name(f"{self.final.name}.partial{os.getpid()}")

    def __enter__(self) -> Path:
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            os.rename(self.tmp, self.final)
        else:
            for child in sorted(self.tmp.rglob("*"), reverse=True):
                child.unlink() if child.is_file() else child.rmdir()
            self.tmp.rmdir()
        return False


def cmd_train(args) -> int:
    spec = resolve_run_spec(args.config, args.lr, args.epochs, args.batch, args.seed)
    manifest = ingest(args.data)
    dataset = load_dataset(manifest, target=spec.model.input_size,
                           window=spec.window, full_pipeline=spec.preprocess_full)
    model = build_model(spec.model)
    report = train(model, dataset, spec.train)

    split_rng = np.random.default_rng(np.random.SeedSequence(spec.train.seed).spawn(3)[0])
    train_idx, val_idx = stratified_split(dataset.labels, spec.train.val_fraction,
                                          split_rng)
    preds, _ = evaluate(model, dataset.images[val_idx], dataset.labels[val_idx],
                        spec.train.batch_size)
    cm = confusion_matrix(preds, dataset.labels[val_idx], len(dataset.class_names))

    files = [path for path, _ in manifest.labelled_files()]
    with _StagingDir(args.out) as staging:
        _write_kv(staging / "config.txt", spec.to_kv())
        save_checkpoint(model, staging / "model.ckpt")
        (staging / "history.csv").write_text(history_csv(report.history))
        _write_confusion_csvs(cm, dataset.class_names,
                              staging / "confusion.csv",
                              staging / "confusion_normalized.csv")
        (staging / "metrics.txt").write_text(
            _metrics_text(report, dataset.class_names))
        (staging / "train_files.txt").write_text(
            "".join(f"{files[i]}\n" for i in train_idx))
        (staging / "val_files.txt").write_text(
            "".join(f"{files[i]}\n" for i in val_idx))
    print(f"run complete: {args.out} (val accuracy {report.accuracy:.4f})")
    return 0


def _load_run(ckpt_path):
    ckpt_path = Path(ckpt_path)
    spec_kv = read_kv_file(ckpt_path.parent / "config.txt")
    spec = RunSpec.from_kv(spec_kv)
    model = load_checkpoint(ckpt_path, spec.model)
    return model, spec


def cmd_eval(args) -> int:
    model, spec = _load_run(args.ckpt)
    manifest = ingest(args.data)
    dataset = load_dataset(manifest, target=spec.model.input_size,
                           window=spec.window, full_pipeline=spec.preprocess_full)
    preds, loss = evaluate(model, dataset.images, dataset.labels,
                           spec.train.batch_size)
    cm = confusion_matrix(preds, dataset.labels, len(dataset.class_names))
    metrics = compute_metrics(cm)
    with _StagingDir(args.out) as staging:
        (staging / "metrics.txt").write_text(
            f"loss {loss:.6f}\n" + _metrics_text(metrics, dataset.class_names))
        _write_confusion_csvs(cm, dataset.class_names,
                              staging / "confusion.csv",
                              staging / "confusion_normalized.csv")
    print(f"eval complete: {args.out} (accuracy {metrics.accuracy:.4f})")
    return 0


def cmd_predict(args) -> int:
    model, spec = _load_run(args.ckpt)
    img = read_pgm(args.image)
    if spec.preprocess_full:
        processed = preprocess_pipeline(img, target=spec.model.input_size,
                                        window=spec.window)
    else:
        processed = normalize(resize(img, spec.model.input_size))
    batch = Tensor([1, 1, spec.model.input_size, spec.model.input_size],
                   processed.values.reshape(-1))
    probs = forward(model, batch, "infer").data.reshape(-1)
    for name, p in zip(CLASS_NAMES, probs):
        print(f"{name} {p:.6f}")
    print(f"predicted: {CLASS_NAMES[int(probs.argmax())]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
