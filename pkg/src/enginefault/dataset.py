"""Indexable window dataset over a preprocess store, with run-level splits and batching."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .preprocess import NUM_CHANNELS
from .testbed_sim import NUM_CLASSES


class StoreError(ValueError):
    pass


class StratificationError(ValueError):
    pass


@dataclass
class LabeledWindowSet:
    """Windows, their labels and the run each one came from.

    ``labels`` holds one label per window (the label of its last step);
    ``step_labels`` keeps the full per-step sequence used as training target.
    """

    features: np.ndarray  # (N, w, 27)
    labels: np.ndarray  # (N,)
    step_labels: np.ndarray  # (N, w)
    ids: np.ndarray  # (N, 2): run index, start row
    runs: list[dict]

    def __post_init__(self):
        n = len(self.features)
        if not (len(self.labels) == len(self.step_labels) == len(self.ids) == n):
            raise StoreError("features, labels and ids disagree in length")
        if n and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise StoreError("labels outside [0, 12)")

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, idx: int):
        return get_sample(self, idx)

    @property
    def window(self) -> int:
        return self.features.shape[1]

    def run_classes(self) -> np.ndarray:
        return np.array([r["class"] for r in self.runs], dtype=np.int64)

    def run_windows(self, run_index: int) -> np.ndarray:
        """Window indices of one run, ordered by start row."""
        idx = np.flatnonzero(self.ids[:, 0] == run_index)
        return idx[np.argsort(self.ids[idx, 1], kind="stable")]

    def subset(self, indices) -> "LabeledWindowSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledWindowSet(self.features[indices], self.labels[indices],
                                self.step_labels[indices], self.ids[indices], self.runs)

    @classmethod
    def from_store(cls, store_dir) -> "LabeledWindowSet":
        store_dir = Path(store_dir)
        try:
            manifest = json.loads((store_dir / "manifest.json").read_text())
        except (OSError, ValueError) as exc:
            raise StoreError(f"{store_dir}: unreadable manifest ({exc})") from None
        fshape = tuple(manifest["features"]["shape"])
        lshape = tuple(manifest["labels"]["shape"])
        if fshape[-1] != NUM_CHANNELS:
            raise StoreError(f"{store_dir}: store has {fshape[-1]} channels, expected {NUM_CHANNELS}")
        feats = np.fromfile(store_dir / manifest["features"]["file"], dtype="<f4")
        labs = np.fromfile(store_dir / manifest["labels"]["file"], dtype="<i4")
        if feats.size != int(np.prod(fshape)) or labs.size != int(np.prod(lshape)):
            raise StoreError(f"{store_dir}: binary store size does not match manifest")
        step_labels = labs.reshape(lshape).astype(np.int64)
        ids = np.asarray(manifest["origins"], dtype=np.int64).reshape(-1, 2)
        return cls(feats.reshape(fshape), step_labels[:, -1].copy() if len(step_labels) else
                   np.zeros(0, dtype=np.int64), step_labels, ids, manifest["runs"])


def get_sample(data: LabeledWindowSet, idx: int):
    """The ``idx``-th (window, label) pair."""
    n = len(data)
    if not -n <= idx < n or n == 0:
        raise IndexError(f"sample index {idx} out of range for {n} windows")
    return data.features[idx], int(data.labels[idx])


# --------------------------------------------------------------------------
# splits

@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    train_runs: tuple[int, ...] = ()
    val_runs: tuple[int, ...] = ()
    test_runs: tuple[int, ...] = ()

    def part(self, name: str) -> np.ndarray:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def runs(self, name: str) -> tuple[int, ...]:
        return {"train": self.train_runs, "val": self.val_runs, "test": self.test_runs}[name]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "runs": {k: list(map(int, self.runs(k))) for k in ("train", "val", "test")},
            "windows": {k: self.part(k).tolist() for k in ("train", "val", "test")},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "Split":
        d = json.loads(Path(path).read_text())
        w, r = d["windows"], d["runs"]
        return cls(*(np.asarray(w[k], dtype=np.int64) for k in ("train", "val", "test")),
                   seed=d["seed"], ratios=tuple(d["ratios"]),
                   train_runs=tuple(r["train"]), val_runs=tuple(r["val"]), test_runs=tuple(r["test"]))


def allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer part sizes summing to ``n``, each within 1 of ``n * ratio`` and at least 1."""
    exact = np.asarray(ratios, dtype=np.float64) * n
    sizes = np.floor(exact).astype(int)
    remainder = n - sizes.sum()
    order = np.argsort(-(exact - sizes), kind="stable")
    for i in order[:remainder]:
        sizes[i] += 1
    for i in range(len(sizes)):
        if sizes[i] == 0:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes.tolist()


def split(data: LabeledWindowSet, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> Split:
    """Stratified train/val/test split at run granularity.

    All windows of a run land in the same part, so overlapping windows never
    straddle the train/test boundary.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be 3 positive numbers summing to 1, got {ratios}")
    run_classes = data.run_classes()
    rng = np.random.default_rng([seed, 0x5917])
    parts: list[list[int]] = [[], [], []]
    for cls in np.unique(run_classes):
        members = np.flatnonzero(run_classes == cls)
        if len(members) < 3:
            raise StratificationError(
                f"class {cls} has {len(members)} runs; at least 3 are needed for a 3-way stratified split")
        members = rng.permutation(members)
        sizes = allocate(len(members), ratios)
        bounds = np.cumsum([0, *sizes])
        for k in range(3):
            parts[k].extend(members[bounds[k]:bounds[k + 1]].tolist())
    run_parts = [tuple(sorted(p)) for p in parts]
    run_of_window = data.ids[:, 0]
    windows = [np.flatnonzero(np.isin(run_of_window, p)) for p in run_parts]
    return Split(*windows, seed=seed, ratios=ratios,
                 train_runs=run_parts[0], val_runs=run_parts[1], test_runs=run_parts[2])


# --------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    features: np.ndarray  # (B, w, 27)
    labels: np.ndarray  # (B,)
    step_labels: np.ndarray  # (B, w)
    indices: np.ndarray  # (B,)

    def __iter__(self):
        # unpacks like the (data, target) pairs of a torch DataLoader
        yield self.features
        yield self.labels


def batches(data: LabeledWindowSet, indices, batch_size: int = 32, shuffle: bool = False,
            seed=0) -> Iterator[Batch]:
    """Yield batches covering ``indices`` exactly once; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.asarray(indices, dtype=np.int64)
    if shuffle:
        order = np.random.default_rng(seed).permutation(order)
    else:
        order = np.sort(order)
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        yield Batch(data.features[idx], data.labels[idx], data.step_labels[idx], idx)
