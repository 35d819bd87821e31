"""Dense residual primitives with manual backpropagation.

Everything is float64. A network here is just an ordered list of
:class:`ResidualBlock` plus a :class:`DenseLayer` head; the higher-level
bookkeeping (snapshots, freeze masks, checkpoints) lives in
:mod:`subtune.model`.

Each block computes ``x + lin2(relu(lin1(x)))``. There is no activation
after the skip connection, so a block with zero weights is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Input width does not match the layer it is fed into."""


class StaleTapeError(RuntimeError):
    """A tape was used after the parameters it recorded were modified."""


def as_tensor2(x) -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array (rows x cols)."""
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D batch, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


@dataclass(eq=False)
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    frozen: bool = False
    version: int = 0

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"weight {self.weight.shape} and bias {self.bias.shape} are inconsistent")

    @classmethod
    def init_uniform(cls, in_width: int, out_width: int, rng: np.random.Generator) -> "DenseLayer":
        bound = np.sqrt(1.0 / in_width)
        w = rng.uniform(-bound, bound, size=(out_width, in_width))
        b = rng.uniform(-bound, bound, size=out_width)
        return cls(w, b)

    @classmethod
    def zeros(cls, in_width: int, out_width: int) -> "DenseLayer":
        return cls(np.zeros((out_width, in_width)), np.zeros(out_width))

    @property
    def in_width(self) -> int:
        return self.weight.shape[1]

    @property
    def out_width(self) -> int:
        return self.weight.shape[0]

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_width:
            raise DimensionError(f"layer expects width {self.in_width}, got {x.shape[1]}")
        return x @ self.weight.T + self.bias

    def touch(self) -> None:
        """Mark the parameters as modified (invalidates outstanding tapes)."""
        self.version += 1

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.frozen)


@dataclass(eq=False)
class ResidualBlock:
    lin1: DenseLayer  # d -> h
    lin2: DenseLayer  # h -> d
    id: int

    def __post_init__(self):
        if self.lin1.in_width != self.lin2.out_width or self.lin1.out_width != self.lin2.in_width:
            raise DimensionError(f"block {self.id}: lin1/lin2 shapes do not chain back to width d")

    @classmethod
    def init_uniform(cls, width: int, block_id: int, rng: np.random.Generator) -> "ResidualBlock":
        lin1 = DenseLayer.init_uniform(width, width, rng)
        lin2 = DenseLayer.init_uniform(width, width, rng)
        return cls(lin1, lin2, block_id)

    @property
    def width(self) -> int:
        return self.lin1.in_width

    @property
    def hidden(self) -> int:
        return self.lin1.out_width

    @property
    def frozen(self) -> bool:
        return self.lin1.frozen and self.lin2.frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.lin1.frozen = value
        self.lin2.frozen = value

    @property
    def n_params(self) -> int:
        return self.lin1.n_params + self.lin2.n_params

    def layers(self):
        return (("lin1", self.lin1), ("lin2", self.lin2))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x + self.lin2(np.maximum(self.lin1(x), 0.0))

    def copy(self) -> "ResidualBlock":
        return ResidualBlock(self.lin1.copy(), self.lin2.copy(), self.id)


@dataclass
class Tape:
    """Activations recorded by :func:`forward`, consumed once by :func:`backward`."""

    blocks: list
    head: DenseLayer
    start: int
    inputs: list = field(default_factory=list)  # input of each block from `start`
    preacts: list = field(default_factory=list)  # lin1 output of each block
    features: np.ndarray | None = None  # live features fed to the head
    head_input: np.ndarray | None = None  # what the head actually saw
    head_offset: int = 0  # column of head.weight where live features begin
    versions: tuple = ()

    def check_fresh(self) -> None:
        now = _versions(self.blocks, self.head)
        if now != self.versions:
            raise StaleTapeError("parameters changed since this tape was recorded")


def _versions(blocks, head) -> tuple:
    out = []
    for b in blocks:
        out.append(b.lin1.version)
        out.append(b.lin2.version)
    out.append(head.version)
    return tuple(out)


def forward(blocks, head: DenseLayer, batch, *, start: int = 0, prefix=None, extra=None):
    """Run ``batch`` through ``blocks[start:]`` and ``head``.

    ``batch`` is the input of ``blocks[start]``. ``prefix`` is an optional
    array of precomputed features concatenated *before* the live features
    when feeding the head (used by Siamese heads); it is treated as a
    constant. Returns ``(logits, tape)``.
    """
    x = as_tensor2(batch)
    if blocks and start < len(blocks) and x.shape[1] != blocks[start].width:
        raise DimensionError(
            f"batch width {x.shape[1]} does not match network width {blocks[start].width}")
    tape = Tape(blocks=blocks, head=head, start=start, versions=_versions(blocks, head))
    for block in blocks[start:]:
        tape.inputs.append(x)
        pre = block.lin1(x)
        tape.preacts.append(pre)
        x = x + block.lin2(np.maximum(pre, 0.0))
    tape.features = x
    if prefix is not None:
        prefix = np.asarray(prefix, dtype=DTYPE)
        if prefix.shape[0] != x.shape[0]:
            raise DimensionError("prefix features and batch have different row counts")
        tape.head_offset = prefix.shape[1]
        h_in = np.concatenate([prefix, x], axis=1)
    else:
        h_in = x
    tape.head_input = h_in
    return head(h_in), tape


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsumexp - z[rows, labels]))
    d = softmax(logits)
    d[rows, labels] -= 1.0
    d /= n
    return loss, d


def backward(tape: Tape, dlogits) -> dict:
    """Gradients for every unfrozen parameter reachable from the tape.

    Keys are ``"head.weight"``, ``"head.bias"``, ``"block{id}.lin1.weight"``
    and so on. Frozen parameters have no entry. Propagation stops at the
    earliest unfrozen block since nothing below it needs a gradient.
    """
    tape.check_fresh()
    dlogits = np.asarray(dlogits, dtype=DTYPE)
    head = tape.head
    grads = {}
    if not head.frozen:
        grads["head.weight"] = dlogits.T @ tape.head_input
        grads["head.bias"] = dlogits.sum(axis=0)

    live = tape.blocks[tape.start:]
    unfrozen = [i for i, b in enumerate(live) if not (b.lin1.frozen and b.lin2.frozen)]
    if not unfrozen:
        return grads
    lowest = unfrozen[0]

    off = tape.head_offset
    g = dlogits @ head.weight[:, off:off + tape.features.shape[1]]
    for i in range(len(live) - 1, lowest - 1, -1):
        block = live[i]
        x_in, pre = tape.inputs[i], tape.preacts[i]
        act = np.maximum(pre, 0.0)
        if not block.lin2.frozen:
            grads[f"block{block.id}.lin2.weight"] = g.T @ act
            grads[f"block{block.id}.lin2.bias"] = g.sum(axis=0)
        dpre = (g @ block.lin2.weight) * (pre > 0)
        if not block.lin1.frozen:
            grads[f"block{block.id}.lin1.weight"] = dpre.T @ x_in
            grads[f"block{block.id}.lin1.bias"] = dpre.sum(axis=0)
        if i > lowest:
            g = g + dpre @ block.lin1.weight
    return grads


def named_parameters(blocks, head: DenseLayer, *, trainable_only: bool = False):
    """Yield ``(name, layer, attr)`` triples in a fixed order."""
    for b in blocks:
        for lname, layer in b.layers():
            if trainable_only and layer.frozen:
                continue
            yield f"block{b.id}.{lname}.weight", layer, "weight"
            yield f"block{b.id}.{lname}.bias", layer, "bias"
    if not (trainable_only and head.frozen):
        yield "head.weight", head, "weight"
        yield "head.bias", head, "bias"


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped_kinks: int
    tol: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error <= self.tol


def _relu_pattern(blocks, head, x, start, prefix):
    _, tape = forward(blocks, head, x, start=start, prefix=prefix)
    return [p > 0 for p in tape.preacts]


def numerical_grad_check(blocks, head, batch, labels, step=1e-5, tol=1e-4, *,
                         n_samples=100, seed=0, prefix=None, start=0) -> GradCheckReport:
    """Compare :func:`backward` against central differences.

    Samples up to ``n_samples`` unfrozen scalar parameters (all of them if
    there are fewer). A perturbation that flips any ReLU is retried with a
    ten times smaller step, twice; if it still crosses a kink the entry is
    skipped and counted, since the loss is not differentiable there.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = as_tensor2(batch)
    logits, tape = forward(blocks, head, x, start=start, prefix=prefix)
    _, dl = loss_and_grad(logits, labels)
    grads = backward(tape, dl)
    base_pattern = [p > 0 for p in tape.preacts]

    entries = []
    for name, layer, attr in named_parameters(blocks, head, trainable_only=True):
        arr = getattr(layer, attr)
        for flat in range(arr.size):
            entries.append((name, layer, attr, flat))
    rng = np.random.default_rng(seed)
    if len(entries) > n_samples:
        pick = rng.choice(len(entries), size=n_samples, replace=False)
        entries = [entries[i] for i in sorted(pick)]

    def loss_at():
        lg, _ = forward(blocks, head, x, start=start, prefix=prefix)
        return loss_and_grad(lg, labels)[0]

    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    for name, layer, attr, flat in entries:
        arr = getattr(layer, attr)
        idx = np.unravel_index(flat, arr.shape)
        orig = arr[idx]
        h = step
        numeric = None
        for _ in range(3):
            arr[idx] = orig + h
            plus = loss_at()
            pat_p = _relu_pattern(blocks, head, x, start, prefix)
            arr[idx] = orig - h
            minus = loss_at()
            pat_m = _relu_pattern(blocks, head, x, start, prefix)
            arr[idx] = orig
            same = all(np.array_equal(a, b) for a, b in zip(base_pattern, pat_p)) and \
                all(np.array_equal(a, b) for a, b in zip(base_pattern, pat_m))
            if same:
                numeric = (plus - minus) / (2 * h)
                break
            h /= 10
        if numeric is None:
            skipped += 1
            continue
        analytic = grads[name][idx]
        denom = max(abs(analytic), abs(numeric), 1e-6)
        rel = abs(analytic - numeric) / denom
        checked += 1
        if rel > worst:
            worst, worst_name = rel, f"{name}{list(idx)}"
    return GradCheckReport(worst, checked, skipped, tol, worst_name)
