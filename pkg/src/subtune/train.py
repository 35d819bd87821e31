"""AdamW with cosine annealing, evaluation, stratified k-fold CV and LR sweeps."""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .datakit import Dataset
from .model import BlockNetwork, HeadSpec
from .netcore import backward, forward, loss_and_grad, softmax

# lr values tried by lr_sweep when none are given
DEFAULT_LRS = (1e-3, 5e-4, 1e-4, 5e-5, 1e-5)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    head_lr: float | None = None  # defaults to lr
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class EvalRecord:
    accuracy: float
    loss: float
    n: int


@dataclass
class CVResult:
    mean: float
    folds: list = field(default_factory=list)  # held-out EvalRecord per fold
    train: list = field(default_factory=list)  # final training EvalRecord per fold


def worker_count() -> int:
    env = os.environ.get("SUBTUNE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parallel_map(fn, items) -> list:
    """``[fn(x) for x in items]``, fanned out over SUBTUNE_THREADS workers, results in input order."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine annealing from ``base`` at step 0 towards 0 at step ``total``."""
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _first_trainable(net: BlockNetwork) -> int:
    for i, b in enumerate(net.blocks):
        if not b.frozen:
            return i
    return net.n_blocks


def _prepare_inputs(net: BlockNetwork, x: np.ndarray, start: int):
    """Push ``x`` through the frozen prefix once; frozen activations never change."""
    h = x
    for b in net.blocks[:start]:
        h = b(h)
    return h, net.head_prefix(x)


def evaluate(net: BlockNetwork, ds: Dataset) -> EvalRecord:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = net.logits(ds.x)
    loss, _ = loss_and_grad(logits, ds.y)
    acc = float(np.mean(np.argmax(logits, axis=1) == ds.y))
    return EvalRecord(acc, loss, len(ds))


def train(net: BlockNetwork, ds: Dataset, cfg: TrainConfig, *, after_step=None) -> EvalRecord:
    """Train the unfrozen blocks and the head of ``net`` in place.

    ``after_step(net)`` is called after every optimizer step (used for
    projected training). Returns metrics on the training set.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if ds.classes != net.classes:
        raise ValueError(f"dataset has {ds.classes} classes, head has {net.classes}")

    start = _first_trainable(net)
    x0, prefix = _prepare_inputs(net, ds.x, start)
    n = len(ds)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    head_lr = cfg.lr if cfg.head_lr is None else cfg.head_lr

    params = []
    for b in net.blocks[start:]:
        for _, layer in b.layers():
            if not layer.frozen:
                params.append((layer, "weight", cfg.lr, True))
                params.append((layer, "bias", cfg.lr, False))
    params.append((net.head, "weight", head_lr, True))
    params.append((net.head, "bias", head_lr, False))
    keys = {}
    for b in net.blocks[start:]:
        for lname, layer in b.layers():
            keys[id(layer)] = f"block{b.id}.{lname}"
    keys[id(net.head)] = "head"
    m = [np.zeros_like(getattr(layer, attr)) for layer, attr, _, _ in params]
    v = [np.zeros_like(getattr(layer, attr)) for layer, attr, _, _ in params]

    rng = np.random.default_rng([int(cfg.seed), 5])
    b1, b2 = cfg.beta1, cfg.beta2
    t = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            pre = None if prefix is None else prefix[idx]
            logits, tape = forward(net.blocks, net.head, x0[idx], start=start, prefix=pre)
            _, dl = loss_and_grad(logits, ds.y[idx])
            grads = backward(tape, dl)
            scale = cosine_lr(1.0, t, total)
            t += 1
            c1 = 1.0 - b1 ** t
            c2 = 1.0 - b2 ** t
            touched = set()
            for k, (layer, attr, base_lr, decay) in enumerate(params):
                g = grads[f"{keys[id(layer)]}.{attr}"]
                lr = base_lr * scale
                p = getattr(layer, attr)
                if decay and cfg.weight_decay:
                    p *= 1.0 - lr * cfg.weight_decay
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                p -= lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + cfg.eps)
                if id(layer) not in touched:
                    layer.touch()
                    touched.add(id(layer))
            if after_step is not None:
                after_step(net)
    return evaluate(net, ds)


def kfold_split(n: int, k: int, labels=None, seed=0) -> list:
    """Stratified k-fold partition of ``range(n)``.

    Indices are shuffled within each class, laid out class by class and dealt
    round-robin, so fold sizes and per-class counts each differ by at most one.
    Without usable labels the split degrades to an unstratified one and a
    warning is issued.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng([int(seed), 3])
    if labels is None or len(labels) != n:
        warnings.warn("kfold_split: no usable labels, using an unstratified split", stacklevel=2)
        order = rng.permutation(n)
    else:
        labels = np.asarray(labels)
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
    folds = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(int(idx))
    return [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]


def fresh_network(pretrained: BlockNetwork, subset, head_kind: str, seed) -> BlockNetwork:
    """Clone ``pretrained`` at its snapshot, attach a new head, set the tuned blocks."""
    net = pretrained.clone()
    net.restore_from_snapshot()
    width = 2 * net.input_width if head_kind == "siamese" else net.input_width
    net.attach_head(HeadSpec(head_kind, width, pretrained.classes), seed)
    net.set_trainable(subset)
    return net


def finetune(pretrained: BlockNetwork, subset, ds: Dataset, cfg: TrainConfig, *,
             head_kind: str = "subtune", prepare=None, after_step=None):
    """Train a fresh copy of ``pretrained`` tuning only ``subset``. Returns (net, train record)."""
    net = fresh_network(pretrained, subset, head_kind, [int(cfg.seed), 17])
    if prepare is not None:
        net = prepare(net) or net
    rec = train(net, ds, cfg, after_step=after_step)
    return net, rec


def cv_score(pretrained: BlockNetwork, subset, ds: Dataset, cfg: TrainConfig, k: int = 5, *,
             head_kind: str = "subtune", prepare=None) -> CVResult:
    """Mean held-out accuracy of tuning ``subset`` over a stratified k-fold split.

    ``pretrained`` is never mutated; each fold starts from its snapshot with
    a freshly initialised head.
    """
    folds = kfold_split(len(ds), k, ds.y, cfg.seed)
    all_idx = np.arange(len(ds))

    def run(f):
        held = folds[f]
        fit = ds.take(np.setdiff1d(all_idx, held))
        fold_cfg = cfg.with_(seed=int(cfg.seed) * 1000 + f)
        net, tr = finetune(pretrained, subset, fit, fold_cfg, head_kind=head_kind, prepare=prepare)
        return evaluate(net, ds.take(held)), tr

    results = parallel_map(run, range(k))
    held = [r[0] for r in results]
    mean = math.fsum(r.accuracy for r in held) / k
    return CVResult(mean, held, [r[1] for r in results])


def lr_sweep(pretrained: BlockNetwork, subset, ds: Dataset, lrs=DEFAULT_LRS, cfg: TrainConfig | None = None,
             k: int = 5, **kw):
    """Pick the learning rate with the best CV score; ties go to the larger lr.

    Returns ``(best_lr, best_score, [(lr, score), ...])``.
    """
    lrs = list(lrs)
    if not lrs:
        raise ValueError("need at least one learning rate")
    cfg = cfg or TrainConfig()
    scores = [(lr, cv_score(pretrained, subset, ds, cfg.with_(lr=lr), k, **kw).mean) for lr in lrs]
    best_lr, best = max(scores, key=lambda t: (t[1], t[0]))
    return best_lr, best, scores


def min_head_loss(features: np.ndarray, labels, classes: int, l2: float = 1e-3, *, tol: float = 1e-12) -> float:
    """Minimum of mean cross-entropy + (l2/2)*||W||^2 for a linear head on fixed features.

    Solved with L-BFGS; the objective is strictly convex so the minimum is unique.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    n, d = x.shape

    def obj(theta):
        w = theta[:classes * d].reshape(classes, d)
        b = theta[classes * d:]
        logits = x @ w.T + b
        loss, dl = loss_and_grad(logits, y)
        gw = dl.T @ x + l2 * w
        return loss + 0.5 * l2 * float(np.sum(w * w)), np.concatenate([gw.ravel(), dl.sum(axis=0)])

    res = minimize(obj, np.zeros(classes * (d + 1)), jac=True, method="L-BFGS-B",
                   options={"maxiter": 20000, "gtol": tol, "ftol": 1e-15})
    return float(res.fun)


def predict_proba(net: BlockNetwork, x) -> np.ndarray:
    return softmax(net.logits(x))
