"""Finetuning profiles, greedy block selection and the norm-constrained trainer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .datakit import Dataset, subsample
from .model import BlockNetwork, SubsetSpec
from .train import TrainConfig, cv_score, evaluate, finetune, kfold_split, parallel_map

DEFAULT_EPSILON = 0.002


@dataclass
class ProfileEntry:
    subset: SubsetSpec
    mean: float
    std: float
    scores: list

    @property
    def l_start(self) -> int:
        return min(self.subset.blocks)

    @property
    def l_end(self) -> int:
        return max(self.subset.blocks)


@dataclass
class ProfileResult:
    group_size: int
    entries: list = field(default_factory=list)
    snapshot_digests: list = field(default_factory=list)

    def argmax(self) -> ProfileEntry:
        return max(self.entries, key=lambda e: (e.mean, -e.l_start))


def holdout_split(ds: Dataset, fraction: float = 0.2, seed=0):
    """Stratified (fit, held-out) split using the first fold of a k-fold partition."""
    k = max(2, int(round(1 / fraction)))
    held = kfold_split(len(ds), k, ds.y, seed)[0]
    fit = np.setdiff1d(np.arange(len(ds)), held)
    return ds.take(fit), ds.take(held)


def score_subset(pretrained: BlockNetwork, subset, ds: Dataset, cfg: TrainConfig, *, eval_mode="cv",
                 test: Dataset | None = None, k: int = 5, head_kind="subtune", prepare=None) -> float:
    """Accuracy of tuning ``subset`` (+ head) from the pretrained snapshot.

    ``cv``: mean k-fold accuracy on ``ds``. ``holdout``: train on ``ds`` and
    score on ``test`` (or on a stratified 20% split of ``ds`` if no test set).
    """
    if eval_mode == "cv":
        return cv_score(pretrained, subset, ds, cfg, k, head_kind=head_kind, prepare=prepare).mean
    if eval_mode != "holdout":
        raise ValueError(f"unknown eval_mode {eval_mode!r}")
    if test is None:
        ds, test = holdout_split(ds, 0.2, cfg.seed)
    net, _ = finetune(pretrained, subset, ds, cfg, head_kind=head_kind, prepare=prepare)
    return evaluate(net, test).accuracy


def _profile_entries(pretrained, windows, ds, cfg, seeds, eval_mode, test, k):
    digests = []

    def run(window):
        digest = pretrained.snapshot_digest()
        scores = [score_subset(pretrained, window, ds, cfg.with_(seed=s), eval_mode=eval_mode, test=test, k=k)
                  for s in seeds]
        return digest, ProfileEntry(pretrained.subset(window), float(np.mean(scores)),
                                    float(np.std(scores)), scores)

    out = parallel_map(run, windows)
    for digest, _ in out:
        digests.append(digest)
    return [e for _, e in out], digests


def finetune_profile(pretrained: BlockNetwork, ds: Dataset, group_size: int = 1, eval_mode: str = "cv",
                     cfg: TrainConfig | None = None, seeds=(0,), *, test: Dataset | None = None,
                     k: int = 5) -> ProfileResult:
    """Score every window of ``group_size`` consecutive blocks."""
    n = pretrained.n_blocks
    if not 1 <= group_size <= n:
        raise ValueError(f"group_size must be in 1..{n}")
    cfg = cfg or TrainConfig()
    windows = [tuple(range(i, i + group_size)) for i in range(1, n - group_size + 2)]
    entries, digests = _profile_entries(pretrained, windows, ds, cfg, seeds, eval_mode, test, k)
    return ProfileResult(group_size, entries, digests)


def pairwise_profile(pretrained: BlockNetwork, ds: Dataset, cfg: TrainConfig | None = None, *,
                     eval_mode: str = "holdout", seeds=(0,), test: Dataset | None = None, k: int = 5):
    """Symmetric N x N matrix: [i, j] tunes blocks {i+1, j+1}; the diagonal tunes one block."""
    n = pretrained.n_blocks
    if n < 2:
        raise ValueError("pairwise profile needs at least two blocks")
    cfg = cfg or TrainConfig()
    windows = [(i,) for i in range(1, n + 1)] + [(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)]
    entries, _ = _profile_entries(pretrained, windows, ds, cfg, seeds, eval_mode, test, k)
    mat = np.zeros((n, n))
    for e in entries:
        ids = e.subset.blocks
        i, j = ids[0] - 1, ids[-1] - 1
        mat[i, j] = mat[j, i] = e.mean
    return mat


# --- greedy selection ------------------------------------------------------

class LookupEvaluator:
    """Scores subsets from a fixed table keyed by frozenset of block ids. Counts calls."""

    def __init__(self, table: dict):
        self.table = {frozenset(k): float(v) for k, v in table.items()}
        self.calls = 0

    def __call__(self, subset) -> float:
        self.calls += 1
        return self.table[frozenset(subset)]


class CVEvaluator:
    """k-fold CV accuracy of tuning a subset, with a memo so repeated subsets are free."""

    def __init__(self, pretrained: BlockNetwork, ds: Dataset, cfg: TrainConfig, k: int = 5, **kw):
        self.pretrained, self.ds, self.cfg, self.k, self.kw = pretrained, ds, cfg, k, kw
        self.calls = 0
        self._memo = {}

    def __call__(self, subset) -> float:
        self.calls += 1
        key = frozenset(subset)
        if key not in self._memo:
            self._memo[key] = cv_score(self.pretrained, tuple(sorted(key)), self.ds, self.cfg, self.k, **self.kw).mean
        return self._memo[key]


@dataclass
class GreedyStep:
    candidates: list  # (block id, score) in evaluation order
    best_block: int | None
    best_score: float
    accepted: bool


@dataclass
class GreedyTrace:
    steps: list
    final: tuple
    epsilon: float
    baseline: float  # A_best before the first step
    init: str  # "linear_probe" or "zero"
    budget_r: int | None = None
    k_max: int | None = None
    final_param_count: int | None = None

    @property
    def candidate_evaluations(self) -> int:
        return sum(len(s.candidates) for s in self.steps)

    @property
    def accepted_scores(self) -> list:
        return [s.best_score for s in self.steps if s.accepted]


def _greedy(blocks, evaluator, epsilon, k_max, budget_r, params_of, init, force=False) -> GreedyTrace:
    blocks = sorted(blocks)
    if init == "linear_probe":
        best = evaluator(())
    elif init == "zero":
        best = 0.0
    else:
        raise ValueError(f"unknown init {init!r}")
    baseline = best
    chosen = []
    steps = []
    limit = len(blocks) if k_max is None else min(k_max, len(blocks))
    while len(chosen) < limit:
        cands = []
        it_best, it_block = -math.inf, None
        for b in blocks:
            if b in chosen:
                continue
            score = evaluator(tuple(chosen) + (b,))
            cands.append((b, score))
            if score > it_best:  # strict: ties keep the smaller id
                it_best, it_block = score, b
        within = budget_r is None or params_of(tuple(chosen) + (it_block,)) <= budget_r
        ok = within and (force or it_best > best + epsilon)
        steps.append(GreedyStep(cands, it_block, it_best, ok))
        if not ok:
            break
        chosen.append(it_block)
        best = it_best
    return GreedyTrace(steps, tuple(chosen), epsilon, baseline, init, budget_r, k_max,
                       params_of(tuple(chosen)) if params_of else None)


def greedy_subtune(pretrained: BlockNetwork | None, ds: Dataset | None = None, epsilon: float = DEFAULT_EPSILON,
                   k_max: int | None = None, budget_r: int | None = None, cfg: TrainConfig | None = None, *,
                   evaluator=None, n_blocks: int | None = None, init: str = "linear_probe", k: int = 5) -> GreedyTrace:
    """Greedy forward selection of blocks to tune.

    Each round scores every unselected block added to the current set and
    takes the best one if it improves on the running best by more than
    ``epsilon`` and keeps the parameter count within ``budget_r``.
    ``init="linear_probe"`` starts the running best at the empty-subset
    score; ``init="zero"`` starts it at 0.

    ``evaluator(subset) -> accuracy`` may be injected (then ``pretrained``
    and ``ds`` are only needed for parameter counting / default scoring).
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if evaluator is None:
        evaluator = CVEvaluator(pretrained, ds, cfg or TrainConfig(), k)
    if pretrained is not None:
        n_blocks = pretrained.n_blocks
        params_of = pretrained.param_count
    else:
        if n_blocks is None:
            raise ValueError("need a network or n_blocks")
        if budget_r is not None:
            raise ValueError("a parameter budget needs a network to count parameters")
        params_of = None
    return _greedy(range(1, n_blocks + 1), evaluator, epsilon, k_max, budget_r, params_of, init)


def greedy_order(pretrained: BlockNetwork, evaluator, size: int) -> tuple:
    """The first ``size`` greedy picks, accepting the best block every round."""
    trace = _greedy(range(1, pretrained.n_blocks + 1), evaluator, 0.0, size, None,
                    pretrained.param_count, "zero", force=True)
    return trace.final


# --- norm-constrained training --------------------------------------------

@dataclass
class LinearizedResult:
    train_loss: float
    test_loss: float | None
    train_acc: float
    test_acc: float | None
    delta: float
    displacement: float  # ||theta_S - theta_S_init||_2 at exit


def _subset_arrays(net: BlockNetwork, subset):
    return [arr for i in subset for _, layer in net.block(i).layers() for arr in (layer.weight, layer.bias)]


def project_to_ball(arrays, init, delta: float) -> float:
    """Project the concatenated displacement onto the L2 ball of radius ``delta``, in place."""
    sq = math.fsum(float(np.sum((a - a0) ** 2)) for a, a0 in zip(arrays, init))
    norm = math.sqrt(sq)
    if norm > delta:
        scale = delta / norm
        for a, a0 in zip(arrays, init):
            a[...] = a0 + (a - a0) * scale
        sq = math.fsum(float(np.sum((a - a0) ** 2)) for a, a0 in zip(arrays, init))
    return math.sqrt(sq)


def linearized_evaluate(pretrained: BlockNetwork, subset, ds: Dataset, delta: float,
                        cfg: TrainConfig | None = None, *, test: Dataset | None = None) -> LinearizedResult:
    """Tune ``subset`` with its displacement from init kept inside a ``delta`` ball.

    The head trains unconstrained. The projection runs after every
    optimizer step, so the bound holds at exit.
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    cfg = cfg or TrainConfig()
    subset = tuple(subset)
    state = {}

    def prepare(net):
        state["arrays"] = _subset_arrays(net, subset)
        state["init"] = [a.copy() for a in state["arrays"]]

    def project(net):
        project_to_ball(state["arrays"], state["init"], delta)

    net, rec = finetune(pretrained, subset, ds, cfg, prepare=prepare, after_step=project)
    disp = math.sqrt(math.fsum(float(np.sum((a - a0) ** 2)) for a, a0 in zip(state["arrays"], state["init"])))
    te = evaluate(net, test) if test is not None else None
    return LinearizedResult(rec.loss, te.loss if te else None, rec.accuracy, te.accuracy if te else None,
                            delta, disp)


# --- generalization gap ----------------------------------------------------

@dataclass(frozen=True)
class GapExperimentConfig:
    subset_sizes: tuple = (0, 1, 2, 4, 8)  # number of tuned blocks
    delta: float = 0.5
    m: int = 100
    seeds: tuple = (0, 1, 2, 3, 4)
    train: TrainConfig = TrainConfig(epochs=50)

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if self.m < 1:
            raise ValueError("m must be >= 1")


@dataclass
class GapRecord:
    r_prime: int
    blocks: tuple
    delta: float
    m: int
    seed: int
    train_acc: float
    test_acc: float

    @property
    def gap(self) -> float:
        return self.train_acc - self.test_acc


def gap_experiment(pretrained: BlockNetwork, pool: Dataset, test: Dataset, cfg: GapExperimentConfig) -> list:
    """Train/test accuracy of norm-constrained SubTuning for growing greedy subsets.

    For each seed, ``m`` samples are drawn from ``pool``; the greedy block
    order is chosen on a holdout split of those samples, and the first
    ``size`` picks are then tuned with :func:`linearized_evaluate`.
    """
    sizes = sorted(cfg.subset_sizes)
    if sizes[-1] > pretrained.n_blocks or sizes[0] < 0:
        raise ValueError("subset sizes must lie in 0..n_blocks")
    records = []
    for seed in cfg.seeds:
        tcfg = cfg.train.with_(seed=seed)
        train_ds = subsample(pool, cfg.m, stratified=True, seed=seed)
        fit, held = holdout_split(train_ds, 0.2, seed)

        def heval(sub, fit=fit, held=held, tcfg=tcfg):
            return linearized_evaluate(pretrained, sub, fit, cfg.delta, tcfg, test=held).test_acc

        n = pretrained.n_blocks
        order = greedy_order(pretrained, heval, max([s for s in sizes if s < n], default=0))
        for size in sizes:
            blocks = tuple(range(1, n + 1)) if size == n else tuple(sorted(order[:size]))
            res = linearized_evaluate(pretrained, blocks, train_ds, cfg.delta, tcfg, test=test)
            records.append(GapRecord(pretrained.param_count(blocks), blocks, cfg.delta, cfg.m, seed,
                                     res.train_acc, res.test_acc))
    return records


def gap_trend(records) -> float:
    """Spearman correlation between sqrt(r') and the seed-averaged gap."""
    by_r = {}
    for rec in records:
        by_r.setdefault(rec.r_prime, []).append(rec.gap)
    rs = sorted(by_r)
    gaps = [float(np.mean(by_r[r])) for r in rs]
    return float(spearmanr(np.sqrt(rs), gaps).statistic)
