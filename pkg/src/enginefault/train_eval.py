"""Training epochs, evaluation passes, the fit loop and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import nn
from .dataset import Batch, LabeledWindowSet, Split, batches
from .models import (
    NOT_DETECTED,
    ConfigError,
    Rule,
    build_model,
    config_from_dict,
    config_to_dict,
    detection_latency,
    stream_trace,
)
from .nn.tensor import no_grad
from .testbed_sim import NUM_CLASSES

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "enginefault-checkpoint/1"
METRICS_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_seed: int = 0
    shuffle_seed: int = 0
    clip_grad_norm: float | None = None
    lr_schedule: str = "constant"  # or "cosine"
    early_stopping_patience: int | None = None
    latency_rule: str = "first_persistent:3"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        Rule.parse(self.latency_rule)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    wall_seconds: float = 0.0


@dataclass
class PassResult:
    """Totals of one pass over a set of batches."""

    loss: float
    accuracy: float
    steps: int = 0
    correct: int = 0
    tallies: list[tuple[int, int]] = field(default_factory=list)  # per batch (correct, total)
    window_correct: int = 0
    windows: int = 0

    @property
    def window_accuracy(self) -> float:
        return self.window_correct / self.windows if self.windows else 0.0

    def __iter__(self):
        yield self.loss
        yield self.accuracy


@dataclass
class FitReport:
    epochs: list[EpochMetrics]
    best_checkpoint: str
    best_epoch: int
    test: dict
    run_dir: str

    @property
    def test_accuracy(self) -> float:
        return self.test["window_accuracy"]


def step_loss(model, batch: Batch):
    """Per-step cross-entropy averaged over steps and batch; returns (loss, logits)."""
    logits = model(batch.features)
    flat = logits.reshape(-1, logits.shape[-1])
    return nn.cross_entropy(flat, batch.step_labels.reshape(-1)), logits


def train_epoch(model, criterion, optimizer: nn.Adam, train_batches: Iterable[Batch],
                clip: float | None = None) -> PassResult:
    """One pass of zero-grad / forward / loss / backward / step over ``train_batches``."""
    model.train()
    loss_sum = 0.0
    res = PassResult(0.0, 0.0)
    for bi, batch in enumerate(train_batches):
        optimizer.zero_grad()
        loss, logits = criterion(model, batch)
        value = float(loss.data)
        if not math.isfinite(value):
            norms = {n: float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0
                     for n, p in model.named_parameters()}
            worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
            raise NonFiniteLoss(f"non-finite loss {value} at batch {bi}; largest grad norms {worst}")
        loss.backward()
        if clip:
            nn.clip_grad_norm(model.parameters(), clip)
        optimizer.step()
        _tally(res, logits.data, batch)
        loss_sum += value * batch.step_labels.size
    res.loss = loss_sum / res.steps if res.steps else 0.0
    res.accuracy = res.correct / res.steps if res.steps else 0.0
    return res


def evaluate(model, criterion, eval_batches: Iterable[Batch]) -> PassResult:
    """Loss and accuracy without touching parameters; dropout is disabled."""
    model.eval()
    loss_sum = 0.0
    res = PassResult(0.0, 0.0)
    with no_grad():
        for batch in eval_batches:
            loss, logits = criterion(model, batch)
            loss_sum += float(loss.data) * batch.step_labels.size
            _tally(res, logits.data, batch)
    res.loss = loss_sum / res.steps if res.steps else 0.0
    res.accuracy = res.correct / res.steps if res.steps else 0.0
    return res


def _tally(res: PassResult, logits: np.ndarray, batch: Batch) -> None:
    pred = logits.argmax(axis=-1)
    correct = int((pred == batch.step_labels).sum())
    total = int(batch.step_labels.size)
    res.tallies.append((correct, total))
    res.correct += correct
    res.steps += total
    res.window_correct += int((pred[:, -1] == batch.labels).sum())
    res.windows += len(batch.labels)


def predict_windows(model, data: LabeledWindowSet, indices, batch_size: int = 64) -> np.ndarray:
    """Last-step class of each window (the window-level verdict)."""
    model.eval()
    out = []
    with no_grad():
        for b in batches(data, indices, batch_size):
            out.append(model(b.features).data[:, -1].argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def confusion_matrix(truth, pred, n: int = NUM_CLASSES) -> np.ndarray:
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth), np.asarray(pred)), 1)
    return cm


# --------------------------------------------------------------------------
# run reconstruction and latency

def stitch_run(data: LabeledWindowSet, run_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild the covered rows of a run's frame (values, labels) from its windows."""
    idx = data.run_windows(run_index)
    w = data.window
    starts = data.ids[idx, 1]
    length = int(starts.max()) + w
    values = np.zeros((length, data.features.shape[-1]), dtype=data.features.dtype)
    labels = np.zeros(length, dtype=np.int64)
    for i, st in zip(idx, starts):
        values[st:st + w] = data.features[i]
        labels[st:st + w] = data.step_labels[i]
    return values, labels


def latency_stats(model, data: LabeledWindowSet, run_indices, rule) -> dict:
    """Detection latency on every faulty run in ``run_indices``."""
    rule = Rule.parse(rule)
    per_run = []
    for r in run_indices:
        cls = int(data.runs[r]["class"])
        if cls == 0:
            continue
        values, labels = stitch_run(data, r)
        onset = np.flatnonzero(labels != 0)
        if len(onset) == 0:
            continue
        trace = stream_trace(model, values)
        lat = detection_latency(trace, int(onset[0]), rule, cls)
        per_run.append({"run": data.runs[r]["id"], "class": cls, "onset_step": int(onset[0]),
                        "latency": lat})
    lats = [p["latency"] for p in per_run]
    detected = [x for x in lats if x is not NOT_DETECTED]
    hist: dict[str, int] = {}
    for x in lats:
        key = "not_detected" if x is NOT_DETECTED else str(x)
        hist[key] = hist.get(key, 0) + 1
    return {
        "rule": str(rule),
        "runs": len(lats),
        "detected": len(detected),
        "false_early": sum(1 for x in detected if x < 0),
        "mean": float(np.mean(detected)) if detected else None,
        "median": median_latency(lats),
        "histogram": dict(sorted(hist.items(), key=lambda kv: (kv[0] == "not_detected", _as_int(kv[0])))),
        "per_run": per_run,
    }


def _as_int(key: str) -> int:
    try:
        return int(key)
    except ValueError:
        return 0


def median_latency(lats) -> float | None:
    """Median with undetected runs counted as infinitely late."""
    if not lats:
        return None
    vals = sorted(math.inf if x is NOT_DETECTED else float(x) for x in lats)
    n = len(vals)
    mid = vals[n // 2] if n % 2 else 0.5 * (vals[n // 2 - 1] + vals[n // 2])
    return None if math.isinf(mid) else mid


def test_report(model, data: LabeledWindowSet, split: Split, part: str = "test",
                rule="first_persistent:3", batch_size: int = 64) -> dict:
    idx = split.part(part)
    res = evaluate(model, step_loss, batches(data, idx, batch_size))
    pred = predict_windows(model, data, idx, batch_size)
    truth = data.labels[np.sort(idx)]
    cm = confusion_matrix(truth, pred)
    return {
        "split": part,
        "windows": int(len(idx)),
        "loss": res.loss,
        "step_accuracy": res.accuracy,
        "window_accuracy": float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0,
        "confusion_matrix": cm.tolist(),
        "latency": latency_stats(model, data, split.runs(part), rule),
    }


# --------------------------------------------------------------------------
# fit loop

def overfit_batch(model, batch: Batch, steps: int = 200, lr: float = 1e-3, every: int = 10) -> list[dict]:
    """Repeated Adam steps on a single batch.

    Every ``every`` steps the loss is re-measured in eval mode (dropout off)
    next to the train-mode loss of the step just taken.
    """
    optimizer = nn.Adam(model.parameters(), lr)
    trace = []
    for i in range(1, steps + 1):
        model.train()
        optimizer.zero_grad()
        loss, _ = step_loss(model, batch)
        loss.backward()
        optimizer.step()
        if i % every == 0 or i == steps:
            model.eval()
            with no_grad():
                ev = float(step_loss(model, batch)[0].data)
            trace.append({"step": i, "train_loss": float(loss.data), "eval_loss": ev})
            log.info("step %d train loss %.4f eval loss %.4f", i, trace[-1]["train_loss"], ev)
    return trace


def train_statistics(data: LabeledWindowSet, indices) -> tuple[np.ndarray, np.ndarray]:
    feats = data.features[np.asarray(indices)].astype(np.float64)
    flat = feats.reshape(-1, feats.shape[-1])
    return flat.mean(axis=0), flat.std(axis=0)


def fit(model, data: LabeledWindowSet, split: Split, config: TrainConfig, out_dir) -> FitReport:
    """Train for ``config.epochs`` epochs, logging metrics and keeping the best-val checkpoint."""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mean, std = train_statistics(data, split.train)
    model.set_normalization(mean, std)
    optimizer = nn.Adam(model.parameters(), config.lr, config.beta1, config.beta2, config.eps)
    metrics_path = out_dir / "metrics.csv"
    timing_path = out_dir / "timing.csv"
    best_path = out_dir / "best.ckpt"
    history: list[EpochMetrics] = []
    best_val, best_epoch, stale = -1.0, 0, 0
    try:
        mf = open(metrics_path, "w", newline="")
        tf = open(timing_path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot open metrics files in {out_dir}: {exc}") from exc
    with mf, tf:
        mw, tw = csv.writer(mf, lineterminator="\n"), csv.writer(tf, lineterminator="\n")
        mw.writerow(METRICS_COLUMNS)
        tw.writerow(["epoch", "seconds"])
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            optimizer.lr = _scheduled_lr(config, epoch)
            tr = train_epoch(
                model, step_loss, optimizer,
                batches(data, split.train, config.batch_size, shuffle=True,
                        seed=[config.shuffle_seed, epoch]),
                clip=config.clip_grad_norm,
            )
            va = evaluate(model, step_loss, batches(data, split.val, config.batch_size))
            seconds = time.perf_counter() - t0
            m = EpochMetrics(epoch, tr.loss, tr.accuracy, va.loss, va.accuracy, seconds)
            history.append(m)
            mw.writerow([epoch, repr(m.train_loss), repr(m.train_accuracy), repr(m.val_loss),
                         repr(m.val_accuracy)])
            tw.writerow([epoch, f"{seconds:.3f}"])
            mf.flush()
            tf.flush()
            log.info("epoch %d train loss %.4f acc %.4f | val loss %.4f acc %.4f | %.1fs",
                     epoch, tr.loss, tr.accuracy, va.loss, va.accuracy, seconds)
            if va.accuracy > best_val:
                best_val, best_epoch, stale = va.accuracy, epoch, 0
                save_checkpoint(model, best_path)
            else:
                stale += 1
            if config.early_stopping_patience and stale >= config.early_stopping_patience:
                log.info("early stopping after epoch %d", epoch)
                break
    save_checkpoint(model, out_dir / "last.ckpt")
    best = load_checkpoint(best_path)
    report = test_report(best, data, split, "test", config.latency_rule)
    report["best_epoch"] = best_epoch
    report["model"] = model.kind
    (out_dir / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    return FitReport(history, str(best_path), best_epoch, report, str(out_dir))


def _scheduled_lr(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "cosine":
        return 0.5 * config.lr * (1 + math.cos(math.pi * (epoch - 1) / config.epochs))
    return config.lr


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model, path) -> None:
    """Parameters as float32 plus config and normalisation statistics in the header."""
    extra = {
        "schema": CHECKPOINT_SCHEMA,
        "kind": model.kind,
        "config": config_to_dict(model.config),
        "norm_mean": [float(v) for v in model.norm_mean],
        "norm_std": [float(v) for v in model.norm_std],
        "dtype": np.dtype(model.dtype).name,
    }
    nn.write_params(path, model.state_dict(), extra)


def load_checkpoint(path):
    arrays, extra = nn.read_params(path)
    if extra.get("schema") != CHECKPOINT_SCHEMA:
        raise nn.CheckpointError(f"{path}: unsupported checkpoint schema {extra.get('schema')!r}")
    try:
        config = config_from_dict(extra["kind"], extra["config"])
        model = build_model(extra["kind"], config, seed=0, dtype=np.dtype(extra.get("dtype", "float32")))
        model.load_state_dict(arrays)
    except (KeyError, TypeError, ValueError) as exc:
        raise nn.CheckpointError(f"{path}: checkpoint does not match model schema ({exc})") from None
    model.norm_mean = np.asarray(extra["norm_mean"], dtype=model.dtype)
    model.norm_std = np.asarray(extra["norm_std"], dtype=model.dtype)
    model.eval()
    return model


def metrics_from_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def history_to_dicts(history: list[EpochMetrics]) -> list[dict]:
    return [asdict(m) for m in history]
