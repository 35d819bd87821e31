"""Desk-scale experiment protocols shared by the CLI and the acceptance suite.

The source task is a warped Gaussian-cluster problem; the target tasks are
corrupted or relabelled draws from the same task, with a small training
split and a large test split.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import al as almod
from .datakit import Dataset, ShiftSpec, gen_source_task, make_shift
from .model import BlockNetwork, build_network
from .prune import PruneSpec, apply_prune, kept_fraction, prune_plan, sparsity_for_fraction
from .select import GapExperimentConfig, gap_experiment, greedy_subtune
from .train import TrainConfig, evaluate, finetune, min_head_loss, train


@dataclass(frozen=True)
class DeskTask:
    width: int = 32
    n_blocks: int = 8
    classes: int = 10
    source_n: int = 20000
    warp_depth: int = 2
    warp_gain: float = 1.5
    noise: float = 0.2
    modes_per_class: int = 2
    task_seed: int = 0
    net_seed: int = 0
    pretrain: TrainConfig = TrainConfig(lr=1e-3, epochs=10, batch_size=64, weight_decay=0.01)
    shift: str = "smooth"
    severity: int = 3
    m: int = 100
    n_test: int = 900
    finetune: TrainConfig = TrainConfig(lr=3e-3, head_lr=1e-2, epochs=50, batch_size=32, weight_decay=0.01)

    def source(self) -> Dataset:
        return gen_source_task(self.width, self.classes, self.source_n, self.warp_depth, self.task_seed,
                               noise=self.noise, gain=self.warp_gain, modes_per_class=self.modes_per_class)

    def draw(self, n: int, sample_seed: int) -> Dataset:
        return gen_source_task(self.width, self.classes, n, self.warp_depth, self.task_seed,
                               sample_seed=sample_seed, noise=self.noise, gain=self.warp_gain,
                               modes_per_class=self.modes_per_class, name="target")

    def target(self, seed: int, kind: str | None = None, m: int | None = None, n_test: int | None = None):
        """(train, test) for one seed of the shifted target task."""
        m = self.m if m is None else m
        n_test = self.n_test if n_test is None else n_test
        base = self.draw(m + n_test, 1000 + seed)
        return make_shift(base, ShiftSpec(kind or self.shift, self.severity, seed), n_train=m, split_seed=seed)


@functools.lru_cache(maxsize=4)
def pretrained_network(task: DeskTask = DeskTask()) -> BlockNetwork:
    """Network trained on the source task, with its snapshot taken."""
    net = build_network(task.width, task.n_blocks, task.classes, task.net_seed)
    net.set_trainable(range(1, task.n_blocks + 1))
    train(net, task.source(), task.pretrain)
    net.mark_pretrained()
    net.set_trainable(())
    return net


def get_pretrained(task: DeskTask) -> BlockNetwork:
    return pretrained_network(task).clone()


def test_accuracy(pretrained, subset, train_ds, test_ds, cfg, **kw) -> float:
    net, _ = finetune(pretrained, subset, train_ds, cfg, **kw)
    return evaluate(net, test_ds).accuracy


@dataclass
class LowDataRow:
    seed: int
    linear_probe: float
    full_finetune: float
    greedy: float
    selected: tuple


def low_data(task: DeskTask, seeds, epsilon: float = 0.002, k: int = 5) -> list:
    """Linear probing vs full finetuning vs Greedy SubTuning on the target task."""
    pre = get_pretrained(task)
    rows = []
    for seed in seeds:
        tr, ts = task.target(seed)
        cfg = task.finetune.with_(seed=seed)
        lp = test_accuracy(pre, (), tr, ts, cfg)
        ft = test_accuracy(pre, tuple(range(1, task.n_blocks + 1)), tr, ts, cfg)
        trace = greedy_subtune(pre, tr, epsilon, None, None, cfg, k=k)
        gr = test_accuracy(pre, trace.final, tr, ts, cfg)
        rows.append(LowDataRow(seed, lp, ft, gr, trace.final))
    return rows


def single_block_profiles(task: DeskTask, kinds, seeds) -> dict:
    """kind -> list of mean test accuracies for tuning block 1..N alone."""
    pre = get_pretrained(task)
    out = {}
    for kind in kinds:
        acc = np.zeros((len(seeds), task.n_blocks))
        for si, seed in enumerate(seeds):
            tr, ts = task.target(seed, kind)
            cfg = task.finetune.with_(seed=seed)
            for b in range(1, task.n_blocks + 1):
                acc[si, b - 1] = test_accuracy(pre, (b,), tr, ts, cfg)
        out[kind] = acc.mean(axis=0).tolist()
    return out


def reinit_ablation(task: DeskTask, seeds, subset=(1,)) -> list:
    """(seed, pretrained-init accuracy, reinitialised accuracy) for tuning ``subset``."""
    pre = get_pretrained(task)
    rows = []
    for seed in seeds:
        tr, ts = task.target(seed)
        cfg = task.finetune.with_(seed=seed)
        keep = test_accuracy(pre, subset, tr, ts, cfg)

        def reinit(net, seed=seed):
            net.reinit_blocks(subset, [seed, 41])

        fresh = test_accuracy(pre, subset, tr, ts, cfg, prepare=reinit)
        rows.append((seed, keep, fresh))
    return rows


def pruning_experiment(task: DeskTask, seeds, subset=(6, 7, 8), max_kept: float = 0.10,
                       scope: str = "global", norm: str = "l1") -> list:
    """(seed, kept fraction, pruned SubTuning accuracy, linear-probe accuracy).

    The tuned blocks are pruned once from the pretrained weights, then trained.
    """
    pre = get_pretrained(task)
    sparsity = sparsity_for_fraction(task.width, max_kept)
    spec = PruneSpec(scope, norm, sparsity, tuple(subset))
    rows = []
    for seed in seeds:
        tr, ts = task.target(seed)
        cfg = task.finetune.with_(seed=seed)
        kept = {}

        def prune(net):
            pruned = apply_prune(net, prune_plan(net, spec))
            kept["f"] = kept_fraction(net, pruned, subset)
            return pruned

        acc = test_accuracy(pre, subset, tr, ts, cfg, prepare=prune)
        lp = test_accuracy(pre, (), tr, ts, cfg)
        rows.append((seed, kept["f"], acc, lp))
    return rows


def al_experiment(task: DeskTask, seeds, strategies=("margin", "random"), pool_size: int = 50000,
                  n_test: int = 2000, subset=(1,), epochs: int = 50) -> list:
    pre = get_pretrained(task)
    initial, budgets = almod.scaled_schedule(pool_size)
    out = []
    for seed in seeds:
        pool, test = task.target(seed, m=pool_size, n_test=n_test)
        for strategy in strategies:
            cfg = almod.ALConfig(initial, budgets, strategy, seed, task.finetune.with_(epochs=epochs), tuple(subset))
            out.extend(almod.al_loop(pre, pool, test, cfg))
    return out


def gap_run(task: DeskTask, seeds=(0, 1, 2, 3, 4), sizes=(0, 1, 2, 4, 8), delta: float = 0.5, m: int = 100,
            epochs: int | None = None, pool_size: int = 1000, n_test: int = 2000) -> list:
    """Generalization-gap records at fixed ``m`` and ``delta`` on the shifted target task."""
    pre = get_pretrained(task)
    pool, test = task.target(0, m=pool_size, n_test=n_test)
    train_cfg = task.finetune if epochs is None else task.finetune.with_(epochs=epochs)
    cfg = GapExperimentConfig(tuple(sizes), delta, m, tuple(seeds), train_cfg)
    return gap_experiment(pre, pool, test, cfg)


def siamese_containment(n_datasets: int = 20, l2: float = 1e-3, seed: int = 0) -> list:
    """(linear-probe min loss, siamese min loss) on random small problems.

    The tuned branch is held at the pretrained weights, so the Siamese head
    sees [f(x), f(x)] and can reproduce any linear probe.
    """
    rows = []
    for i in range(n_datasets):
        rng = np.random.default_rng([seed, i])
        d, c, n = int(rng.integers(3, 9)), int(rng.integers(2, 5)), int(rng.integers(10, 41))
        net = build_network(d, 2, c, [seed, i, 1])
        x = rng.normal(size=(n, d))
        y = rng.integers(0, c, size=n)
        f = net.features(x)
        siam = np.concatenate([net.snapshot_features(x), f], axis=1)
        rows.append((min_head_loss(f, y, c, l2), min_head_loss(siam, y, c, l2)))
    return rows
