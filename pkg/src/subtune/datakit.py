"""Synthetic source/shift tasks, vector corruptions, subsampling and CSV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

from .netcore import DTYPE

SHIFT_KINDS = ("gaussian_noise", "impulse", "smooth", "quantize", "label_permute")

# Severity tables, index = severity - 1.
GAUSSIAN_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
IMPULSE_FRACTION = (0.01, 0.03, 0.06, 0.1, 0.17)
SMOOTH_WINDOW = (2, 3, 4, 5, 6)

CLAMP = 3.0


class CSVFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class Dataset:
    x: np.ndarray  # (n, d)
    y: np.ndarray  # (n,) int
    classes: int
    name: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=DTYPE)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2:
            self.x = self.x.reshape(len(self.y), -1)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"{self.x.shape[0]} rows but {self.y.shape[0]} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.y)

    @property
    def width(self) -> int:
        return self.x.shape[1]

    def take(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.classes, self.name if name is None else name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.classes)


@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    severity: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")
        if not 1 <= self.severity <= 5:
            raise ValueError("severity must be in 1..5")


def _warp(x: np.ndarray, depth: int, rng: np.random.Generator, gain: float) -> np.ndarray:
    d = x.shape[1]
    for _ in range(depth):
        q, r = np.linalg.qr(rng.normal(size=(d, d)))
        a = gain * q * np.sign(np.diag(r))
        b = rng.normal(0.0, 0.1, size=d)
        x = np.tanh(x @ a.T + b)
    return x


def gen_source_task(d: int, classes: int, n: int, depth_of_warp: int, seed, *,
                    sample_seed=None, noise: float = 0.3, gain: float = 2.0,
                    modes_per_class: int = 1, name: str = "source") -> Dataset:
    """Gaussian class clusters on the unit sphere pushed through a random tanh warp.

    ``seed`` fixes the task (class means and warp). ``sample_seed`` picks an
    independent draw of samples from that same task; it defaults to ``seed``.
    """
    if d < 2 or classes < 2:
        raise ValueError("need d >= 2 and at least 2 classes")
    task_rng = np.random.default_rng([int(seed), 0])
    means = task_rng.normal(size=(classes * modes_per_class, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    sample_rng = np.random.default_rng([int(seed), 1, int(seed if sample_seed is None else sample_seed)])
    y = np.arange(n) % classes
    sample_rng.shuffle(y)
    mode = sample_rng.integers(0, modes_per_class, size=n)
    x = means[y * modes_per_class + mode] + noise * sample_rng.normal(size=(n, d))
    x = _warp(x, depth_of_warp, task_rng, gain)
    return Dataset(x, y, classes, name)


def corrupt(x, spec: ShiftSpec, index: int = 0) -> np.ndarray:
    """Corrupt one feature vector. Deterministic in ``(spec.seed, index)``."""
    x = np.asarray(x, dtype=DTYPE)
    s = spec.severity - 1
    rng = np.random.default_rng([int(spec.seed), int(index), SHIFT_KINDS.index(spec.kind)])
    if spec.kind == "gaussian_noise":
        out = x + GAUSSIAN_SIGMA[s] * rng.normal(size=x.shape)
    elif spec.kind == "impulse":
        mask = rng.random(x.shape) < IMPULSE_FRACTION[s]
        signs = np.where(rng.random(x.shape) < 0.5, -1.0, 1.0)
        out = np.where(mask, signs, x)
    elif spec.kind == "smooth":
        out = uniform_filter1d(x, size=SMOOTH_WINDOW[s], mode="nearest")
    elif spec.kind == "quantize":
        step = 2.0 / 2 ** (7 - spec.severity)
        out = np.round(np.clip(x, -1.0, 1.0) / step) * step
    else:  # label_permute leaves inputs alone
        out = x.copy()
    return np.clip(out, -CLAMP, CLAMP)


def label_permutation(classes: int, spec: ShiftSpec) -> np.ndarray:
    """Cyclic relabelling of ``min(classes, 2*severity)`` seeded classes."""
    rng = np.random.default_rng([int(spec.seed), 99])
    k = min(classes, 2 * spec.severity)
    chosen = np.sort(rng.choice(classes, size=k, replace=False))
    perm = np.arange(classes)
    perm[chosen] = np.roll(chosen, 1)
    return perm


def make_shift(source: Dataset, spec: ShiftSpec, *, n_train: int | None = None,
               train_fraction: float = 0.1, permutation=None, split_seed=None):
    """Corrupt every sample of ``source`` and split into (train, test).

    The default split is 1:9. ``permutation`` overrides the label mapping for
    ``label_permute``.
    """
    if spec.kind == "label_permute":
        x = np.clip(source.x, -CLAMP, CLAMP)
        perm = label_permutation(source.classes, spec) if permutation is None else np.asarray(permutation)
        y = perm[source.y]
    else:
        x = np.stack([corrupt(row, spec, i) for i, row in enumerate(source.x)]) if len(source) else source.x.copy()
        y = source.y.copy()
    n = len(source)
    if n_train is None:
        n_train = int(round(train_fraction * n))
    if not 0 <= n_train <= n:
        raise ValueError(f"n_train={n_train} outside 0..{n}")
    order = np.random.default_rng([int(spec.seed if split_seed is None else split_seed), 7]).permutation(n)
    shifted = Dataset(x, y, source.classes, f"{source.name}:{spec.kind}{spec.severity}")
    return shifted.take(order[:n_train], shifted.name + ":train"), shifted.take(order[n_train:], shifted.name + ":test")


def subsample(ds: Dataset, m: int, stratified: bool = True, seed=0) -> Dataset:
    """Draw ``m`` samples; stratified draws keep class proportions (largest remainder)."""
    n = len(ds)
    if m > n:
        raise ValueError(f"cannot draw {m} samples from {n}")
    rng = np.random.default_rng([int(seed), 11])
    if not stratified:
        return ds.take(rng.permutation(n)[:m])
    counts = ds.class_counts()
    exact = m * counts / max(n, 1)
    quota = np.floor(exact).astype(int)
    rem = m - quota.sum()
    # largest remainder first, ties toward the lower class index
    order = sorted(range(ds.classes), key=lambda c: (-(exact[c] - quota[c]), c))
    for c in order:
        if rem == 0:
            break
        if quota[c] < counts[c]:
            quota[c] += 1
            rem -= 1
    picked = []
    for c in range(ds.classes):
        idx = np.flatnonzero(ds.y == c)
        picked.append(rng.permutation(idx)[:quota[c]])
    picked = np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)
    return ds.take(rng.permutation(picked))


def save_csv(ds: Dataset, path, label_column: str = "label") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(ds.width)] + [label_column])
        for row, label in zip(ds.x, ds.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path, label_column: str = "label", classes: int | None = None) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError("missing header row", 1) from None
        if label_column not in header:
            raise CSVFormatError(f"label column {label_column!r} not in header", 1)
        li = header.index(label_column)
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CSVFormatError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                ys.append(int(row[li]))
                xs.append([float(v) for j, v in enumerate(row) if j != li])
            except ValueError as exc:
                raise CSVFormatError(f"non-numeric cell ({exc})", lineno) from None
    width = len(header) - 1
    x = np.asarray(xs, dtype=DTYPE).reshape(len(xs), width)
    y = np.asarray(ys, dtype=np.int64)
    if classes is None:
        classes = int(y.max()) + 1 if len(y) else 1
    return Dataset(x, y, classes, Path(path).stem)
