"""Structured channel pruning of tuned residual blocks.

A channel is a hidden unit of a block: row j of ``lin1`` and column j of
``lin2``. Pruning removes both, so the block shrinks on both sides.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import BlockNetwork
from .netcore import DenseLayer, ResidualBlock


class PruneError(ValueError):
    pass


@dataclass(frozen=True)
class PruneSpec:
    scope: str  # "local" or "global"
    norm: str  # "l1" or "l2"
    sparsity: float
    target_blocks: tuple

    def __post_init__(self):
        if self.scope not in ("local", "global"):
            raise ValueError(f"scope must be local or global, got {self.scope!r}")
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"norm must be l1 or l2, got {self.norm!r}")
        if not 0 <= self.sparsity < 1:
            raise ValueError("sparsity must be in [0, 1)")
        object.__setattr__(self, "target_blocks", tuple(int(b) for b in self.target_blocks))


@dataclass
class PrunePlan:
    removed: dict = field(default_factory=dict)  # block id -> sorted channel indices
    scores: dict = field(default_factory=dict)  # block id -> scores of the removed channels

    def is_empty(self) -> bool:
        return not any(self.removed.values())

    def to_json(self) -> str:
        return json.dumps({str(b): {"removed": self.removed[b], "scores": self.scores[b]}
                           for b in sorted(self.removed)}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PrunePlan":
        obj = json.loads(text)
        plan = cls()
        for key, val in obj.items():
            plan.removed[int(key)] = list(val["removed"])
            plan.scores[int(key)] = list(val["scores"])
        return plan


def _floor_count(fraction: float, total: int) -> int:
    # guard against 0.29 * 100 == 28.999999999999996
    return int(math.floor(fraction * total + 1e-9))


def channel_importance(block: ResidualBlock, norm: str = "l1") -> np.ndarray:
    """Norm of each hidden unit's incoming weights together with its bias."""
    rows = np.concatenate([block.lin1.weight, block.lin1.bias[:, None]], axis=1)
    if norm == "l1":
        return np.abs(rows).sum(axis=1)
    if norm == "l2":
        return np.sqrt((rows * rows).sum(axis=1))
    raise ValueError(f"unknown norm {norm!r}")


def prune_plan(net: BlockNetwork, spec: PruneSpec) -> PrunePlan:
    """Channels to remove. Ties are broken by (block id, channel index)."""
    for b in spec.target_blocks:
        if not 1 <= b <= net.n_blocks:
            raise PruneError(f"target block {b} outside 1..{net.n_blocks}")
    plan = PrunePlan()
    scores = {b: channel_importance(net.block(b), spec.norm) for b in spec.target_blocks}
    for b in spec.target_blocks:
        plan.removed[b], plan.scores[b] = [], []
    if spec.sparsity == 0:
        return plan

    if spec.scope == "local":
        for b in spec.target_blocks:
            sc = scores[b]
            k = _floor_count(spec.sparsity, len(sc))
            if k >= len(sc):
                raise PruneError(f"sparsity {spec.sparsity} would remove every channel of block {b}")
            order = sorted(range(len(sc)), key=lambda j: (sc[j], j))[:k]
            plan.removed[b] = sorted(order)
            plan.scores[b] = [float(sc[j]) for j in plan.removed[b]]
        return plan

    pool = sorted((float(scores[b][j]), b, j) for b in spec.target_blocks for j in range(len(scores[b])))
    k = _floor_count(spec.sparsity, len(pool))
    left = {b: len(scores[b]) for b in spec.target_blocks}
    picked = []
    for score, b, j in pool:
        if len(picked) == k:
            break
        if left[b] == 1:
            continue  # never empty a layer
        left[b] -= 1
        picked.append((b, j, score))
    for b, j, score in sorted(picked):
        plan.removed[b].append(j)
        plan.scores[b].append(score)
    return plan


def prune_block(block: ResidualBlock, removed) -> ResidualBlock:
    keep = np.setdiff1d(np.arange(block.hidden), np.asarray(removed, dtype=np.int64))
    if len(keep) == 0:
        raise PruneError(f"plan removes every channel of block {block.id}")
    lin1 = DenseLayer(block.lin1.weight[keep].copy(), block.lin1.bias[keep].copy(), block.lin1.frozen)
    lin2 = DenseLayer(block.lin2.weight[:, keep].copy(), block.lin2.bias.copy(), block.lin2.frozen)
    return ResidualBlock(lin1, lin2, block.id)


def apply_prune(net: BlockNetwork, plan: PrunePlan) -> BlockNetwork:
    """Pruned copy of ``net``; the input network (and its snapshot) is left untouched."""
    out = net.clone()
    for b, removed in plan.removed.items():
        if not 1 <= b <= net.n_blocks:
            raise PruneError(f"plan refers to block {b}, network has {net.n_blocks}")
        block = net.block(b)
        if any(not 0 <= j < block.hidden for j in removed) or len(set(removed)) != len(removed):
            raise PruneError(f"plan channels for block {b} do not fit its {block.hidden} channels")
        if removed:
            out.blocks[b - 1] = prune_block(block, removed)
    return out


def masked_forward(net: BlockNetwork, x, masks: dict) -> np.ndarray:
    """Logits of ``net`` with the listed hidden channels forced to zero (reference for pruning)."""
    h = np.asarray(x, dtype=np.float64)
    for b in net.blocks:
        act = np.maximum(h @ b.lin1.weight.T + b.lin1.bias, 0.0)
        if masks.get(b.id):
            act[:, masks[b.id]] = 0.0
        h = h + (act @ b.lin2.weight.T + b.lin2.bias)
    prefix = net.head_prefix(x)
    if prefix is not None:
        h = np.concatenate([prefix, h], axis=1)
    return h @ net.head.weight.T + net.head.bias


def kept_fraction(original: BlockNetwork, pruned: BlockNetwork, blocks) -> float:
    before = original.param_count(blocks)
    return pruned.param_count(blocks) / before if before else 1.0


def sparsity_for_fraction(width: int, target: float) -> float:
    """Smallest channel sparsity whose local pruning keeps at most ``target`` of a block's parameters."""
    full = 2 * width * width + 2 * width
    for kept in range(width, 0, -1):
        params = 2 * width * kept + kept + width
        if params / full <= target:
            return (width - kept) / width
    raise PruneError(f"no channel count keeps <= {target:.0%} of a width-{width} block")
