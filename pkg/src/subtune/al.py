"""Pool-based active learning with smallest-margin queries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datakit import Dataset
from .model import BlockNetwork
from .netcore import softmax
from .train import TrainConfig, evaluate, finetune

# labelled-set schedule at full scale: 100 random, then these budgets out of 50k
PAPER_INITIAL = 100
PAPER_BUDGETS = (500, 1000, 2500, 5000, 10000)
PAPER_POOL = 50000


def classification_margin(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if p.shape[-1] < 2:
        raise ValueError("margin needs at least two classes")
    top2 = np.sort(p)[-2:]
    return float(top2[1] - top2[0])


def margins(probs: np.ndarray) -> np.ndarray:
    """Row-wise top-1 minus top-2 probability."""
    if probs.shape[1] < 2:
        raise ValueError("margin needs at least two classes")
    part = np.partition(probs, -2, axis=1)
    return part[:, -1] - part[:, -2]


@dataclass
class LabeledPool:
    dataset: Dataset
    labeled: np.ndarray = None
    history: list = field(default_factory=list)  # (round, acquired indices)

    def __post_init__(self):
        if self.labeled is None:
            self.labeled = np.zeros(len(self.dataset), dtype=bool)

    @property
    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.labeled)

    @property
    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labeled)

    def acquire(self, round_no: int, idx) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        if self.labeled[idx].any() or len(np.unique(idx)) != len(idx):
            raise ValueError("attempt to re-acquire labelled samples")
        self.labeled[idx] = True
        self.history.append((round_no, idx.tolist()))

    def labeled_set(self) -> Dataset:
        return self.dataset.take(self.labeled_indices)


@dataclass(frozen=True)
class ALConfig:
    initial_random: int
    budgets: tuple
    strategy: str = "margin"
    seed: int = 0
    train: TrainConfig = TrainConfig(epochs=50)
    subset: tuple = ()

    def __post_init__(self):
        if self.strategy not in ("margin", "random"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        b = tuple(int(v) for v in self.budgets)
        if any(y <= x for x, y in zip(b, b[1:])):
            raise ValueError("budgets must be strictly increasing")
        if b and self.initial_random > b[0]:
            raise ValueError("initial_random must not exceed the first budget")
        object.__setattr__(self, "budgets", b)


def scaled_schedule(pool_size: int, minimum: int = 10):
    """The full-scale labelling schedule shrunk by pool_size/50000, at least ``minimum`` per round."""
    ratio = pool_size / PAPER_POOL
    initial = max(minimum, int(round(PAPER_INITIAL * ratio)))
    budgets, last = [], initial
    for b in PAPER_BUDGETS:
        v = max(int(round(b * ratio)), last + minimum)
        if v > pool_size:
            break
        budgets.append(v)
        last = v
    return initial, tuple(budgets)


def select_queries(net: BlockNetwork, pool: LabeledPool, n: int) -> np.ndarray:
    """The ``n`` unlabelled indices with the smallest margin; ties go to the lower index."""
    cand = pool.unlabeled_indices
    if n > len(cand):
        raise ValueError(f"asked for {n} queries but only {len(cand)} unlabelled samples remain")
    m = margins(softmax(net.logits(pool.dataset.x[cand])))
    order = np.lexsort((cand, m))
    return cand[order[:n]]


@dataclass(frozen=True)
class ALRecord:
    round: int
    budget: int
    strategy: str
    seed: int
    test_acc: float


def al_loop(pretrained: BlockNetwork, pool: LabeledPool | Dataset, test: Dataset, cfg: ALConfig) -> list:
    """Label, retrain from the pretrained snapshot, evaluate, acquire; repeat.

    Round 0 labels ``initial_random`` samples uniformly at random (the same
    draw for every strategy given the seed). Each later round first grows
    the labelled set to the next budget.
    """
    if isinstance(pool, Dataset):
        pool = LabeledPool(pool)
    n = len(pool.dataset)
    if cfg.budgets and cfg.budgets[-1] > n:
        raise ValueError(f"budget {cfg.budgets[-1]} exceeds pool size {n}")
    rng = np.random.default_rng([int(cfg.seed), 23])
    pool.acquire(0, np.sort(rng.choice(n, size=cfg.initial_random, replace=False)))
    records = []
    targets = list(cfg.budgets)
    round_no = 0
    while True:
        tcfg = cfg.train.with_(seed=int(cfg.seed) * 100 + round_no)
        net, _ = finetune(pretrained, cfg.subset, pool.labeled_set(), tcfg)
        records.append(ALRecord(round_no, int(pool.labeled.sum()), cfg.strategy, cfg.seed,
                                evaluate(net, test).accuracy))
        if not targets:
            return records
        need = targets.pop(0) - int(pool.labeled.sum())
        round_no += 1
        if cfg.strategy == "margin":
            idx = select_queries(net, pool, need)
        else:
            r = np.random.default_rng([int(cfg.seed), 29, round_no])
            idx = r.choice(pool.unlabeled_indices, size=need, replace=False)
        pool.acquire(round_no, np.sort(idx))
