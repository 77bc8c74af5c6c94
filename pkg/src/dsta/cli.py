"""Command-line entry point: generate, train, eval, bench, gradcheck.

Configuration is resolved from defaults, then an optional JSON config file
(--config), then command-line flags (highest precedence). Every command
echoes the fully resolved configuration before doing work and writes its
outputs under a per-run directory named by timestamp and seed (or --out).

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import backend
from .attention import AttentionScheme
from .bench import backend_table, format_backend_table, format_scheme_table, scheme_table
from .data import Dataset, SyntheticSpec, SyntheticTask, generate, load_dataset, save_dataset
from .errors import DataError, DstaError, NumericError, UsageError
from .inference import evaluate
from .model import (
    ModelConfig,
    VideoTransformer,
    gradcheck_config,
    gradcheck_parameters,
    load_checkpoint,
    model_from_checkpoint,
    random_clip,
    save_checkpoint,
)
from .tensor import corrupt_backward_for_testing
from .training import TrainConfig, train

GRADCHECK_TOLERANCE = 1e-4

DATASET_FORMAT_DOC = """\
dataset file layout (all multi-byte values little-endian):
  line 1:   "DSTADATA 1"
  lines:    height/width/channels/frames <int>, classes <name...>, count <int>
  items:    "item <id> <label> <split> <payload-byte-offset> <n-float32-values>"
            offsets are strictly increasing; splits are train/val/test
  "end" line, then the payload: each item's pixels as raw float32,
  flat row-major [height, width, channels, frames]."""


@dataclass
class ExperimentConfig:
    """Merged model + training + synthetic-data settings for one run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    seed: int = 0
    threads: int = 1
    deterministic_crops: bool = False
    count: int = 1200
    val_fraction: float = 1 / 6
    test_fraction: float = 0.0

    def resolved(self) -> "ExperimentConfig":
        """Push the experiment seed into every sub-config."""
        return replace(
            self,
            train=replace(self.train, seed=self.seed),
            synthetic=replace(self.synthetic, seed=self.seed),
        )

    def echo_lines(self) -> list[str]:
        lines = []
        for key, value in sorted(self.model.to_dict().items()):
            lines.append(f"model.{key}={value}")
        for f in fields(self.train):
            lines.append(f"train.{f.name}={getattr(self.train, f.name)}")
        for f in fields(self.synthetic):
            v = getattr(self.synthetic, f.name)
            if isinstance(v, SyntheticTask):
                v = v.value
            lines.append(f"synthetic.{f.name}={v}")
        for key in ("seed", "threads", "deterministic_crops", "count",
                    "val_fraction", "test_fraction"):
            lines.append(f"{key}={getattr(self, key)}")
        return lines


def _config_from_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _build_config(args) -> ExperimentConfig:
    doc = _config_from_file(args.config) if args.config else {}
    try:
        model_kw = dict(doc.get("model", {}))
        train_kw = dict(doc.get("train", {}))
        synth_kw = dict(doc.get("synthetic", {}))
        if "task" in synth_kw:
            synth_kw["task"] = SyntheticTask.parse(synth_kw["task"])
        for key in ("blob_radius", "ramp"):
            if key in synth_kw:
                synth_kw[key] = tuple(synth_kw[key])
        if "decay_epochs" in train_kw:
            train_kw["decay_epochs"] = tuple(train_kw["decay_epochs"])
        cfg = ExperimentConfig(
            model=ModelConfig.from_dict(model_kw) if model_kw else ModelConfig(),
            train=TrainConfig(**train_kw),
            synthetic=SyntheticSpec(**synth_kw),
            seed=int(doc.get("seed", 0)),
            threads=int(doc.get("threads", 1)),
            deterministic_crops=bool(doc.get("deterministic_crops", False)),
            count=int(doc.get("count", 1200)),
            val_fraction=float(doc.get("val_fraction", 1 / 6)),
            test_fraction=float(doc.get("test_fraction", 0.0)),
        )
    except TypeError as e:
        raise UsageError(f"bad config file field: {e}") from e
    # flag overrides
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "scheme", None):
        cfg = replace(cfg, model=cfg.model.with_scheme(AttentionScheme.parse(args.scheme)))
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 1:
            raise UsageError("--epochs must be at least 1")
        decay = tuple(e for e in cfg.train.decay_epochs if e <= args.epochs)
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs, decay_epochs=decay))
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        cfg = replace(cfg, threads=args.threads)
    if getattr(args, "deterministic_crops", False):
        cfg = replace(cfg, deterministic_crops=True)
    if getattr(args, "count", None) is not None:
        cfg = replace(cfg, count=args.count)
    return cfg.resolved()


def _echo_config(cfg: ExperimentConfig) -> None:
    print(f"backend={backend.name()}")
    for line in cfg.echo_lines():
        print(f"config {line}")


def _run_dir(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        run = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run = Path("runs") / f"run-{stamp}-seed{cfg.seed}"
    run.mkdir(parents=True, exist_ok=True)
    with open(run / "config.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "model": cfg.model.to_dict(),
                "train": {f.name: list(v) if isinstance(v := getattr(cfg.train, f.name), tuple) else v
                          for f in fields(cfg.train)},
                "synthetic": {
                    f.name: (v.value if isinstance(v := getattr(cfg.synthetic, f.name), SyntheticTask)
                             else list(v) if isinstance(v, tuple) else v)
                    for f in fields(cfg.synthetic)
                },
                "seed": cfg.seed,
                "threads": cfg.threads,
                "deterministic_crops": cfg.deterministic_crops,
                "count": cfg.count,
                "val_fraction": cfg.val_fraction,
                "test_fraction": cfg.test_fraction,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    return run


def _load_dataset_arg(args) -> Dataset:
    if not args.data:
        raise UsageError("--data <dataset file> is required")
    return load_dataset(args.data)


# -- commands ------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.format:
        print(DATASET_FORMAT_DOC)
        return 0
    cfg = _build_config(args)
    if cfg.count < 1:
        raise UsageError("--count must be at least 1")
    if not args.out:
        raise UsageError("generate needs --out <dataset file>")
    _echo_config(cfg)
    ds = generate(
        cfg.synthetic,
        cfg.count,
        val_fraction=cfg.val_fraction,
        test_fraction=cfg.test_fraction,
    )
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    splits = {name: len(ds.split(name)) for name in ("train", "val", "test")}
    print(f"wrote {len(ds.videos)} items to {out} "
          f"(train={splits['train']} val={splits['val']} test={splits['test']})")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    _echo_config(cfg)
    dataset = _load_dataset_arg(args)
    run = _run_dir(args, cfg)
    model = VideoTransformer(cfg.model, seed=cfg.seed)
    log_path = run / "metrics.log"
    with open(log_path, "w", encoding="utf-8") as log_fh:

        def log(line: str) -> None:
            print(line)
            log_fh.write(line + "\n")

        result = train(model, dataset, cfg.train, log=log)
    ckpt_path = run / "model.ckpt"
    save_checkpoint(result.checkpoint, ckpt_path)
    print(f"best_epoch={result.best_epoch} best_val_acc={result.best_val_acc:.4f}")
    print(f"checkpoint={ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    _echo_config(cfg)
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint <file>")
    dataset = _load_dataset_arg(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    videos = dataset.split(args.split)
    if not videos:
        raise DataError(f"dataset has no items in split {args.split!r}")
    run = _run_dir(args, cfg)
    result = evaluate(
        videos,
        model,
        ckpt.config,
        seed=cfg.seed,
        deterministic=cfg.deterministic_crops,
        threads=cfg.threads,
    )
    report = run / "report.txt"
    lines = result.report_lines()
    with open(report, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"report={report}")
    print(lines[-1])
    return 0


def cmd_bench(args) -> int:
    cfg = _build_config(args)
    _echo_config(cfg)
    run = _run_dir(args, cfg)
    sections = [
        format_scheme_table(scheme_table(cfg.model, seed=cfg.seed), cfg.model),
        format_backend_table(backend_table(seed=cfg.seed)),
    ]
    text = "\n\n".join(sections)
    print(text)
    with open(run / "bench.txt", "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _build_config(args)
    _echo_config(cfg)
    run = _run_dir(args, cfg)
    schemes = (
        [AttentionScheme.parse(args.scheme)] if args.scheme else list(AttentionScheme)
    )
    lines = []
    worst_overall = 0.0
    for scheme in schemes:
        mcfg = gradcheck_config(scheme)
        model = VideoTransformer(mcfg, seed=cfg.seed)
        clip = random_clip(mcfg, seed=cfg.seed)
        if args.corrupt:
            with corrupt_backward_for_testing("gelu", 1.5):
                errors = gradcheck_parameters(model, clip)
        else:
            errors = gradcheck_parameters(model, clip)
        for name, err in errors.items():
            lines.append(f"{scheme.value} {name} {err:.3e}")
            worst_overall = max(worst_overall, err)
        scheme_worst = max(errors.values())
        lines.append(f"{scheme.value} WORST {scheme_worst:.3e}")
    lines.append(f"tolerance {GRADCHECK_TOLERANCE:.1e}")
    verdict = "PASS" if worst_overall <= GRADCHECK_TOLERANCE else "FAIL"
    lines.append(f"gradcheck {verdict} worst={worst_overall:.3e}")
    text = "\n".join(lines)
    print(text)
    with open(run / "gradcheck.txt", "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    if verdict == "FAIL":
        raise NumericError(
            f"gradient check failed: worst relative error {worst_overall:.3e} "
            f"exceeds {GRADCHECK_TOLERANCE:.1e}"
        )
    return 0


# -- parser ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="experiment seed (drives all randomness)")
    p.add_argument("--scheme", choices=[s.value for s in AttentionScheme],
                   help="attention scheme")
    p.add_argument("--epochs", type=int, help="training epochs (drops beyond it are removed)")
    p.add_argument("--threads", type=int, help="worker cap for parallel sections")
    p.add_argument("--deterministic-crops", action="store_true",
                   dest="deterministic_crops",
                   help="use evenly spaced windows and left/center/right crops at inference")
    p.add_argument("--out", help="run directory (default: runs/run-<timestamp>-seed<seed>)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="dsta",
        description="Video transformer with divided space-time attention: "
        "synthetic data, training, ensemble evaluation, cost model, gradient checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset file")
    _add_common(p)
    p.add_argument("--count", type=int, help="number of items (default 1200)")
    p.add_argument("--format", action="store_true",
                   help="print the dataset file layout and exit")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset file")
    _add_common(p)
    p.add_argument("--data", help="dataset file from 'generate'")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="nine-clip ensemble evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--data", help="dataset file")
    p.add_argument("--checkpoint", help="checkpoint file from 'train'")
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="attention cost table and backend benchmark")
    _add_common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    _add_common(p)
    p.add_argument("--corrupt", action="store_true",
                   help="negative control: corrupt one backward rule on purpose")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except DstaError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
