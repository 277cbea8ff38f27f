"""Run directories -> fixed-length 27-channel frames -> sliding-window stores.

Canonical column order of a merged frame::

    input 0-4 | output 0-8 | states 0-12

The omega/torque reference tables are read, validated and set the time span
of the grid, but engine speed and torque already appear as input channel 2
and output channel 8, so they are not repeated as model columns.

Stores written by :func:`preprocess_corpus`:

``features.bin``  little-endian float32, row-major, shape (N, w, 27)
``labels.bin``    little-endian int32, row-major, shape (N, w) per-step labels
``manifest.json`` shapes, counts, class histogram, run list and window origins
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .testbed_sim import NUM_CLASSES, TABLES, worker_count

log = logging.getLogger(__name__)

TABLE_ORDER = ["omega", "torque", "input_signal", "output_signal", "states_signal"]
FEATURE_TABLES = ["input_signal", "output_signal", "states_signal"]
COLUMNS = [f"{name}.{col}" for name in FEATURE_TABLES for col in TABLES[name]]
NUM_CHANNELS = len(COLUMNS)
STORE_VERSION = 1
MAX_SKIP_FRACTION = 0.10

assert NUM_CHANNELS == 27


class PreprocessError(ValueError):
    pass


class UnrecoverableColumn(PreprocessError):
    pass


class MalformedRun(PreprocessError):
    pass


@dataclass
class RawRun:
    tables: dict[str, tuple[np.ndarray, np.ndarray]]
    label: int
    onset_s: float | None
    source: str

    def span(self) -> tuple[float, float]:
        firsts = [t[0] for t, _ in self.tables.values()]
        lasts = [t[-1] for t, _ in self.tables.values()]
        return float(min(firsts)), float(max(lasts))


@dataclass
class MergedFrame:
    times: np.ndarray
    values: np.ndarray
    labels: np.ndarray
    run_id: str = ""

    @property
    def length(self) -> int:
        return len(self.times)


@dataclass
class WindowSet:
    windows: np.ndarray  # (N, w, 27)
    window_labels: np.ndarray  # (N,)
    step_labels: np.ndarray  # (N, w)
    origins: list[tuple[str, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.window_labels)


# --------------------------------------------------------------------------
# column repair and resampling

def fix_missing(column, name: str = "column", run: str = "?") -> np.ndarray:
    """Fill NaN gaps: linear between finite neighbours, nearest value at the edges."""
    col = np.asarray(column, dtype=np.float64)
    finite = np.isfinite(col)
    if not finite.any():
        raise UnrecoverableColumn(f"run {run}: column {name} has no finite values")
    if finite.all():
        return col.copy()
    idx = np.arange(len(col))
    out = col.copy()
    out[~finite] = np.interp(idx[~finite], idx[finite], col[finite])
    return out


def resample_linear(times, values, target_times) -> np.ndarray:
    """Linear interpolation of ``values`` (rows indexed by ``times``) at ``target_times``.

    Targets outside ``[times[0], times[-1]]`` clamp to the edge value.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    target_times = np.asarray(target_times, dtype=np.float64)
    if len(times) < 2:
        raise ValueError(f"need at least 2 source points to resample, got {len(times)}")
    if np.any(np.diff(times) <= 0):
        raise ValueError("source times must be strictly increasing")
    if values.ndim == 1:
        return np.interp(target_times, times, values)
    return np.column_stack([np.interp(target_times, times, values[:, j]) for j in range(values.shape[1])])


# --------------------------------------------------------------------------
# reading runs

def read_raw_run(run_dir) -> RawRun:
    """Read the five tables and meta.json of one run directory, repairing gaps."""
    run_dir = Path(run_dir)
    meta_path = run_dir / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, ValueError) as exc:
        raise MalformedRun(f"{run_dir}: unreadable meta.json ({exc})") from None
    tables = {}
    for name in TABLE_ORDER:
        path = run_dir / f"{name}.csv"
        try:
            with open(path) as fh:
                header = fh.readline().strip().split(",")
            expected = ["time_s", *TABLES[name]]
            if header != expected:
                raise MalformedRun(f"{path}: header {header} does not match {expected}")
            data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64, ndmin=2)
        except OSError as exc:
            raise MalformedRun(f"{path}: {exc}") from None
        except ValueError as exc:
            raise MalformedRun(f"{path}: {exc}") from None
        if data.shape[0] < 2 or data.shape[1] != len(expected):
            raise MalformedRun(f"{path}: expected >=2 rows of {len(expected)} columns, got {data.shape}")
        times = data[:, 0]
        if not np.all(np.isfinite(times)) or np.any(np.diff(times) <= 0):
            raise MalformedRun(f"{path}: timestamps must be finite and strictly increasing")
        values = np.column_stack([
            fix_missing(data[:, j + 1], TABLES[name][j], str(run_dir)) for j in range(len(expected) - 1)
        ])
        tables[name] = (times, values)
    label = int(meta.get("fault_id", 0))
    if not 0 <= label < NUM_CLASSES:
        raise MalformedRun(f"{meta_path}: fault_id {label} outside [0, {NUM_CLASSES})")
    onset = meta.get("onset_s") if label else None
    return RawRun(tables, label, None if onset is None else float(onset), str(run_dir))


def merge_run(raw: RawRun, T: int = 300) -> MergedFrame:
    """Resample all tables onto one uniform T-point grid and label every step."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    start, end = raw.span()
    grid = np.linspace(start, end, T)
    parts = {}
    for name in TABLE_ORDER:
        times, values = raw.tables[name]
        try:
            parts[name] = resample_linear(times, values, grid)
        except ValueError as exc:
            raise PreprocessError(f"{raw.source}/{name}: {exc}") from None
    merged = np.concatenate([parts[name] for name in FEATURE_TABLES], axis=1)
    labels = np.zeros(T, dtype=np.int64)
    if raw.label and raw.onset_s is not None:
        labels[grid >= raw.onset_s] = raw.label
    return MergedFrame(grid, merged, labels, raw.source)


def window_count(T: int, w: int, s: int) -> int:
    return (T - w) // s + 1


def sliding_window(frame: MergedFrame, w: int = 64, s: int = 32) -> WindowSet:
    """Overlapping windows of ``w`` rows every ``s`` rows; a window takes its last row's label."""
    T = frame.length
    if w > T:
        raise ValueError(f"window length {w} exceeds frame length {T}")
    if not 1 <= s <= w:
        raise ValueError(f"stride must satisfy 1 <= s <= w, got s={s}, w={w}")
    starts = np.arange(window_count(T, w, s)) * s
    idx = starts[:, None] + np.arange(w)
    step_labels = frame.labels[idx]
    return WindowSet(
        windows=frame.values[idx],
        window_labels=step_labels[:, -1].copy(),
        step_labels=step_labels,
        origins=[(frame.run_id, int(st)) for st in starts],
    )


# --------------------------------------------------------------------------
# corpus -> store

@dataclass
class PreprocessReport:
    runs: int = 0
    skipped: list[str] = field(default_factory=list)
    windows: int = 0
    class_histogram: list[int] = field(default_factory=lambda: [0] * NUM_CLASSES)
    runs_per_class: list[int] = field(default_factory=lambda: [0] * NUM_CLASSES)

    def summary(self) -> str:
        if self.runs == 0 and not self.skipped:
            return "0 runs found, 0 windows written"
        return (f"{self.runs} runs ({len(self.skipped)} skipped), {self.windows} windows; "
                f"windows per class {self.class_histogram}")


def discover_class_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        return []
    dirs = [p for p in root.iterdir() if p.is_dir() and p.name.isdigit()]
    return sorted(dirs, key=lambda p: int(p.name))


def list_runs(fault_paths) -> list[tuple[int, Path]]:
    runs = []
    for class_dir in sorted((Path(p) for p in fault_paths), key=lambda p: (int(p.name), str(p))):
        for run_dir in sorted(p for p in class_dir.iterdir() if p.is_dir() and not p.name.endswith(".partial")):
            runs.append((int(class_dir.name), run_dir))
    return runs


def _process_run(args):
    class_id, run_dir, rel, T, w, s = args
    try:
        raw = read_raw_run(run_dir)
        if raw.label != class_id:
            raise MalformedRun(f"{run_dir}: meta fault_id {raw.label} disagrees with class folder {class_id}")
        frame = merge_run(raw, T)
        frame.run_id = rel
        return sliding_window(frame, w, s), raw.onset_s, None
    except PreprocessError as exc:
        return None, None, str(exc)


def preprocess_corpus(fault_paths, out_dir, T: int = 300, w: int = 64, s: int = 32,
                      workers: int | None = None, root=None) -> PreprocessReport:
    """Window every run under ``fault_paths`` and write the binary stores to ``out_dir``."""
    if not 1 <= s <= w <= T:
        raise ValueError(f"need 1 <= s <= w <= T, got s={s}, w={w}, T={T}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = list_runs(fault_paths)
    base = Path(root) if root is not None else (Path(fault_paths[0]).parent if fault_paths else Path("."))
    jobs = [(cid, rd, _relative(rd, base), T, w, s) for cid, rd in runs]
    n = worker_count(workers)
    if n <= 1 or len(jobs) < 2:
        results = [_process_run(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_process_run, jobs, chunksize=8))

    report = PreprocessReport()
    features, labels, origins, run_records = [], [], [], []
    for (cid, run_dir, rel, *_), (ws, onset, err) in zip(jobs, results):
        if ws is None:
            log.warning("skipping %s: %s", run_dir, err)
            report.skipped.append(rel)
            continue
        run_index = len(run_records)
        run_records.append({"id": rel, "class": cid, "onset_s": onset, "n_windows": len(ws)})
        report.runs += 1
        report.runs_per_class[cid] += 1
        features.append(ws.windows)
        labels.append(ws.step_labels)
        origins.extend([run_index, start] for _, start in ws.origins)
        for lab in ws.window_labels:
            report.class_histogram[int(lab)] += 1
    total = len(jobs)
    if total and len(report.skipped) / total > MAX_SKIP_FRACTION:
        raise PreprocessError(
            f"{len(report.skipped)} of {total} runs were malformed (limit {MAX_SKIP_FRACTION:.0%})")

    feats = np.concatenate(features) if features else np.zeros((0, w, NUM_CHANNELS))
    labs = np.concatenate(labels) if labels else np.zeros((0, w), dtype=np.int64)
    report.windows = len(feats)
    feats.astype("<f4").tofile(out_dir / "features.bin")
    labs.astype("<i4").tofile(out_dir / "labels.bin")
    manifest = {
        "version": STORE_VERSION,
        "T": T,
        "window": w,
        "stride": s,
        "columns": COLUMNS,
        "features": {"file": "features.bin", "dtype": "<f4", "shape": [len(feats), w, NUM_CHANNELS]},
        "labels": {"file": "labels.bin", "dtype": "<i4", "shape": [len(labs), w]},
        "num_windows": len(feats),
        "num_runs": report.runs,
        "class_histogram": report.class_histogram,
        "runs_per_class": report.runs_per_class,
        "skipped_runs": report.skipped,
        "runs": run_records,
        "origins": origins,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    log.info("preprocess: %s", report.summary())
    return report


def _relative(path: Path, base: Path) -> str:
    try:
        return Path(path).relative_to(base).as_posix()
    except ValueError:
        return Path(path).as_posix()
