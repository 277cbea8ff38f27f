"""Command-line entry point: generate, preprocess, train, evaluate, predict, report.

Every command reads the same YAML config tree (all keys optional)::

    corpus:     {runs_per_class, duration_s, signal_rate_hz, magnitude, onset_fraction,
                 noise_scale, missing_fraction, seed, templates}
    preprocess: {T, window, stride}
    model:      {kind, transformer: {...}, rnn: {...}}
    train:      {epochs, batch_size, lr, ..., split_seed, split_ratios}
    paths:      {corpus, store, run}

Exit status: 0 success, 1 usage or config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import nn
from .dataset import LabeledWindowSet, Split, StoreError, StratificationError, split
from .models import (
    ConfigError,
    RnnConfig,
    Rule,
    TransformerConfig,
    build_model,
    detection_latency,
    stream_trace,
)
from .preprocess import PreprocessError, discover_class_dirs, merge_run, preprocess_corpus, read_raw_run
from .testbed_sim import (
    DEFAULT_TEMPLATES,
    CorpusConfig,
    CorpusWriteError,
    FaultTemplate,
    InvalidArgument,
    Shape,
    Site,
    generate_dataset,
)
from .train_eval import NonFiniteLoss, TrainConfig, fit, load_checkpoint, metrics_from_csv, test_report

log = logging.getLogger("enginefault")

COMMANDS = ("generate", "preprocess", "train", "evaluate", "predict", "report")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CONFIG_NAME = "config.yaml"


class ConfigValidationError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


# --------------------------------------------------------------------------
# config tree

@dataclass
class CorpusSettings:
    runs_per_class: int = 40
    duration_s: int = 300
    signal_rate_hz: float = 2.0
    magnitude: float = 2.0
    onset_fraction: list = field(default_factory=lambda: [0.4, 0.75])
    noise_scale: float = 1.0
    missing_fraction: float = 0.002
    seed: int = 0
    templates: list | None = None  # None -> built-in taxonomy

    def to_corpus_config(self) -> CorpusConfig:
        templates = DEFAULT_TEMPLATES if self.templates is None else tuple(
            FaultTemplate(int(t["fault_id"]), Site(t["site"]), int(t["channel"]), Shape(t["shape"]),
                          math.inf if t.get("duration_s") is None else float(t["duration_s"]))
            for t in self.templates)
        return CorpusConfig(self.runs_per_class, self.duration_s, self.signal_rate_hz, self.magnitude,
                            tuple(self.onset_fraction), self.noise_scale, self.missing_fraction,
                            self.seed, templates)


@dataclass
class PreprocessSettings:
    T: int = 300
    window: int = 64
    stride: int = 32


@dataclass
class ModelSettings:
    kind: str = "transformer"
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    rnn: RnnConfig = field(default_factory=RnnConfig)

    def config(self):
        return self.transformer if self.kind == "transformer" else self.rnn


@dataclass
class TrainSettings(TrainConfig):
    split_seed: int = 0
    split_ratios: list = field(default_factory=lambda: [0.7, 0.15, 0.15])

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})


@dataclass
class PathSettings:
    corpus: str = "corpus"
    store: str = "store"
    run: str = "run"


@dataclass
class RunConfig:
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    preprocess: PreprocessSettings = field(default_factory=PreprocessSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build(cls, tree, path: str, problems: list[str]):
    """Instantiate dataclass ``cls`` from a mapping, recording every bad field."""
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        problems.append(f"{path or '<root>'}: expected a mapping, got {type(tree).__name__}")
        return cls()
    defaults = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in tree:
        if key not in known:
            problems.append(f"{_join(path, key)}: unknown key")
    kwargs = {}
    for name in known:
        if name not in tree:
            continue
        value, default, where = tree[name], getattr(defaults, name), _join(path, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, where, problems)
            continue
        ok, coerced = _coerce(value, default)
        if ok:
            kwargs[name] = coerced
        else:
            problems.append(f"{where}: expected {type(default).__name__}, got {value!r}")
    return cls(**kwargs)


def _coerce(value, default):
    if default is None:
        return True, value
    if isinstance(default, bool):
        return isinstance(value, bool), value
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool), value
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return True, float(value)
        return False, value
    if isinstance(default, (list, tuple)):
        return isinstance(value, (list, tuple)), list(value) if isinstance(value, (list, tuple)) else value
    if isinstance(default, str):
        return isinstance(value, str), value
    return True, value


def _join(path: str, key) -> str:
    return f"{path}.{key}" if path else str(key)


def validate_config(tree) -> RunConfig:
    """Fill defaults, check types and cross-field rules; raise with field paths on failure."""
    problems: list[str] = []
    cfg = _build(RunConfig, tree, "", problems)
    c, p, m, t = cfg.corpus, cfg.preprocess, cfg.model, cfg.train
    if c.runs_per_class < 3:
        problems.append("corpus.runs_per_class: need >= 3 runs per class for a stratified split")
    if c.duration_s < 10:
        problems.append("corpus.duration_s: must be >= 10")
    if c.signal_rate_hz <= 0:
        problems.append("corpus.signal_rate_hz: must be > 0")
    if c.magnitude < 0:
        problems.append("corpus.magnitude: must be >= 0")
    if len(c.onset_fraction) != 2 or not 0 <= c.onset_fraction[0] <= c.onset_fraction[1] < 1:
        problems.append("corpus.onset_fraction: must be [lo, hi] with 0 <= lo <= hi < 1")
    if not 0 <= c.missing_fraction < 0.5:
        problems.append("corpus.missing_fraction: must be in [0, 0.5)")
    if c.templates is not None:
        try:
            c.to_corpus_config()
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"corpus.templates: {exc}")
    if not 1 <= p.stride <= p.window <= p.T:
        problems.append(f"preprocess: need 1 <= stride <= window <= T, got stride={p.stride}, "
                        f"window={p.window}, T={p.T}")
    if m.kind not in ("transformer", "rnn"):
        problems.append(f"model.kind: must be transformer or rnn, got {m.kind!r}")
    for name in ("transformer", "rnn"):
        try:
            getattr(m, name).validate()
        except ConfigError as exc:
            problems.append(f"model.{name}: {exc}")
    try:
        t.validate()
    except (ConfigError, ValueError) as exc:
        problems.append(f"train: {exc}")
    r = t.split_ratios
    if len(r) != 3 or min(r) <= 0 or abs(sum(r) - 1) > 1e-9:
        problems.append("train.split_ratios: must be 3 positive numbers summing to 1")
    if problems:
        raise ConfigValidationError(problems)
    # the model sees windows of the preprocess length
    m.transformer.window = p.window
    m.rnn.window = p.window
    return cfg


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigValidationError([f"--config: cannot read {path} ({exc.strerror})"]) from None
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigValidationError([f"--config: {path} is not valid YAML ({exc})"]) from None
    return tree or {}


def apply_flags(tree: dict, args) -> dict:
    """Overlay command-line flags onto a raw config tree."""
    tree = json.loads(json.dumps(tree))  # deep copy of plain data
    if args.seed is not None:
        tree.setdefault("corpus", {})["seed"] = args.seed
        tr = tree.setdefault("train", {})
        for key in ("init_seed", "shuffle_seed", "split_seed"):
            tr[key] = args.seed
    if args.model is not None:
        tree.setdefault("model", {})["kind"] = args.model
    if args.epochs is not None:
        tree.setdefault("train", {})["epochs"] = args.epochs
    if args.out is not None:
        out = Path(args.out)
        paths = tree.setdefault("paths", {})
        for key, default in dataclasses.asdict(PathSettings()).items():
            paths[key] = str(out / paths.get(key, default))
    return tree


def echo_config(cfg: RunConfig, directory) -> Path:
    path = Path(directory) / CONFIG_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_yaml())
    return path


# --------------------------------------------------------------------------
# commands

def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ConfigValidationError([f"paths.{what}: {path} does not exist"])
    return path


def cmd_generate(cfg: RunConfig, args) -> int:
    root = Path(cfg.paths.corpus)
    written = generate_dataset(cfg.corpus.to_corpus_config(), root)
    echo_config(cfg, root)
    print(f"generated {len(written)} runs under {root}")
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig, args) -> int:
    root = _require(cfg.paths.corpus, "corpus")
    classes = discover_class_dirs(root)
    p = cfg.preprocess
    report = preprocess_corpus(classes, cfg.paths.store, p.T, p.window, p.stride, root=root)
    echo_config(cfg, cfg.paths.store)
    print(report.summary())
    return EXIT_OK


def _load_split(cfg: RunConfig, data: LabeledWindowSet, run_dir: Path) -> Split:
    path = run_dir / "split.json"
    if path.exists():
        return Split.load(path)
    return split(data, cfg.train.split_ratios, cfg.train.split_seed)


def cmd_train(cfg: RunConfig, args) -> int:
    data = LabeledWindowSet.from_store(_require(cfg.paths.store, "store"))
    run_dir = Path(cfg.paths.run)
    run_dir.mkdir(parents=True, exist_ok=True)
    sp = split(data, cfg.train.split_ratios, cfg.train.split_seed)
    sp.save(run_dir / "split.json")
    echo_config(cfg, run_dir)
    model = build_model(cfg.model.kind, cfg.model.config(), seed=cfg.train.init_seed)
    report = fit(model, data, sp, cfg.train.train_config(), run_dir)
    print(f"best epoch {report.best_epoch}; test window accuracy {report.test_accuracy:.4f}; "
          f"checkpoint {report.best_checkpoint}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    run_dir = Path(cfg.paths.run)
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir / "best.ckpt"
    if not ckpt.exists():
        raise ConfigValidationError([f"--checkpoint: {ckpt} does not exist"])
    data = LabeledWindowSet.from_store(_require(cfg.paths.store, "store"))
    sp = _load_split(cfg, data, run_dir)
    model = load_checkpoint(ckpt)
    report = test_report(model, data, sp, args.split, cfg.train.latency_rule)
    out = run_dir / "eval" / args.split
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    echo_config(cfg, out)
    print(f"{args.split}: window accuracy {report['window_accuracy']:.4f}, "
          f"step accuracy {report['step_accuracy']:.4f} -> {out / 'report.json'}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    if not args.run_dir:
        raise ConfigValidationError(["predict: a run directory argument is required"])
    run_path = Path(args.run_dir)
    if not run_path.is_dir():
        raise ConfigValidationError([f"predict: {run_path} is not a directory"])
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.paths.run) / "best.ckpt"
    if not ckpt.exists():
        raise ConfigValidationError([f"--checkpoint: {ckpt} does not exist"])
    model = load_checkpoint(ckpt)
    frame = merge_run(read_raw_run(run_path), cfg.preprocess.T)
    trace = stream_trace(model, frame.values.astype(np.float32), cfg.preprocess.window)
    classes = trace.classes
    rule = Rule.parse(cfg.train.latency_rule)
    verdict = trace.verdict(rule)
    truth = int(frame.labels.max())
    onset = np.flatnonzero(frame.labels != 0)
    latency = None
    if truth and len(onset):
        latency = detection_latency(trace, int(onset[0]), rule, truth)
    out = Path(args.trace_out) if args.trace_out else Path(cfg.paths.run) / "predict" / f"{run_path.name}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time_s", "label", "predicted", "confidence"])
        for t in range(len(classes)):
            w.writerow([t, f"{frame.times[t]:.6g}", int(frame.labels[t]), int(classes[t]),
                        f"{trace.probs[t, classes[t]]:.6f}"])
    print(json.dumps({"run": str(run_path), "verdict": int(verdict), "rule": str(rule),
                      "true_class": truth, "latency_steps": latency, "trace": str(out)}))
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    run_dir = Path(cfg.paths.run)
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.exists():
        raise ConfigValidationError([f"paths.run: {metrics_path} does not exist"])
    rows = metrics_from_csv(metrics_path)
    seconds = {}
    timing = run_dir / "timing.csv"
    if timing.exists():
        with open(timing, newline="") as fh:
            seconds = {int(r["epoch"]): r["seconds"] for r in csv.DictReader(fh)}
    out = run_dir / "curves.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"])
        for r in rows:
            w.writerow([r["epoch"], r["train_loss"], r["train_acc"], r["val_loss"], r["val_acc"],
                        seconds.get(r["epoch"], "")])
    print(f"wrote {len(rows)} epochs to {out}")
    return EXIT_OK


HANDLERS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "report": cmd_report,
}


# --------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file (all keys optional)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help="base directory for corpus/store/run paths")
    common.add_argument("--model", choices=("transformer", "rnn"))
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="enginefault", description="Synthetic engine fault classification pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("generate", parents=[common], help="write a synthetic run corpus")
    sub.add_parser("preprocess", parents=[common], help="window a corpus into binary stores")
    sub.add_parser("train", parents=[common], help="fit a model and write metrics and checkpoints")
    ev = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    ev.add_argument("--checkpoint")
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")
    pr = sub.add_parser("predict", parents=[common], help="per-step trace for one run directory")
    pr.add_argument("run_dir", nargs="?")
    pr.add_argument("--checkpoint")
    pr.add_argument("--trace-out")
    sub.add_parser("report", parents=[common], help="write plot-ready loss/accuracy curves")
    return parser


def run(command: str, config: dict | None = None, flags: list[str] | None = None) -> int:
    """Programmatic entry point mirroring ``enginefault <command> [flags]``."""
    argv = [command, *(flags or [])]
    return main(argv, config_tree=config)


def main(argv=None, config_tree: dict | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.epochs is not None and args.epochs < 1:
        print("enginefault: error: --epochs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        tree = config_tree if config_tree is not None else load_config(args.config)
        cfg = validate_config(apply_flags(tree, args))
        return HANDLERS[args.command](cfg, args)
    except ConfigValidationError as exc:
        print(f"enginefault: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, PreprocessError, StoreError, StratificationError, NonFiniteLoss, nn.CheckpointError,
            CorpusWriteError, InvalidArgument, ConfigError) as exc:
        print(f"enginefault {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
