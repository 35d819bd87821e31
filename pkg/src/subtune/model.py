"""Block networks: freeze masks, heads, snapshots and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netcore import DTYPE, DenseLayer, DimensionError, ResidualBlock, as_tensor2, forward

HEAD_KINDS = ("linear_probe", "subtune", "siamese")

MAGIC = b"SBTN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SubsetSpec:
    """Set of 1-based block ids selected for tuning, with their parameter count."""

    blocks: tuple
    param_count: int

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def label(self) -> str:
        return ",".join(str(b) for b in self.blocks)


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    in_width: int
    classes: int

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")


class BlockNetwork:
    """Residual blocks plus a readout head, with a pretrained snapshot.

    ``snapshot`` holds copies of the blocks as they were when the network
    was marked pretrained (or loaded). Siamese heads read their frozen-branch
    features from it, and every experiment restarts from it.
    """

    def __init__(self, input_width: int, blocks: list, head: DenseLayer, head_spec: HeadSpec,
                 snapshot: list | None = None):
        self.input_width = input_width
        self.blocks = blocks
        self.head = head
        self.head_spec = head_spec
        self.snapshot = snapshot if snapshot is not None else [b.copy() for b in blocks]
        self.head.frozen = False

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def classes(self) -> int:
        return self.head_spec.classes

    def block(self, block_id: int) -> ResidualBlock:
        return self.blocks[block_id - 1]

    def _check_ids(self, ids) -> tuple:
        ids = tuple(int(i) for i in ids)
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate block ids in {ids}")
        for i in ids:
            if not 1 <= i <= self.n_blocks:
                raise ValueError(f"block id {i} outside 1..{self.n_blocks}")
        return ids

    def subset(self, ids) -> SubsetSpec:
        ids = self._check_ids(ids)
        return SubsetSpec(ids, self.param_count(ids))

    def param_count(self, subset=None) -> int:
        """Parameters (weights + biases) of the listed blocks; all blocks + head if None."""
        if subset is None:
            return sum(b.n_params for b in self.blocks) + self.head.n_params
        return sum(self.block(i).n_params for i in self._check_ids(subset))

    def trainable_ids(self) -> tuple:
        return tuple(b.id for b in self.blocks if not b.frozen)

    def set_trainable(self, subset) -> None:
        ids = self._check_ids(subset)
        if ids and self.head_spec.kind == "linear_probe":
            raise ValueError("a linear_probe head cannot tune blocks")
        for b in self.blocks:
            b.frozen = b.id not in ids
        self.head.frozen = False

    def mark_pretrained(self) -> None:
        """Take the current block parameters as the pretrained snapshot."""
        self.snapshot = [b.copy() for b in self.blocks]

    def restore_from_snapshot(self) -> None:
        for i, snap in enumerate(self.snapshot):
            frozen = self.blocks[i].frozen
            self.blocks[i] = snap.copy()
            self.blocks[i].frozen = frozen

    def reinit_blocks(self, subset, seed) -> None:
        """Redraw the listed blocks uniformly in +-sqrt(1/fan_in). The snapshot is kept."""
        ids = self._check_ids(subset)
        rng = np.random.default_rng(seed)
        for i in ids:
            old = self.block(i)
            lin1 = DenseLayer.init_uniform(old.width, old.hidden, rng)
            lin2 = DenseLayer.init_uniform(old.hidden, old.width, rng)
            lin1.frozen, lin2.frozen = old.lin1.frozen, old.lin2.frozen
            lin1.version, lin2.version = old.lin1.version + 1, old.lin2.version + 1
            self.blocks[i - 1] = ResidualBlock(lin1, lin2, i)

    def attach_head(self, spec: HeadSpec, seed) -> None:
        """Replace the readout head by a freshly initialised one."""
        expected = 2 * self.input_width if spec.kind == "siamese" else self.input_width
        if spec.in_width != expected:
            raise DimensionError(
                f"{spec.kind} head needs in_width {expected}, got {spec.in_width}")
        rng = np.random.default_rng(seed)
        self.head = DenseLayer.init_uniform(spec.in_width, spec.classes, rng)
        self.head_spec = spec
        if spec.kind == "linear_probe":
            for b in self.blocks:
                b.frozen = True

    def snapshot_features(self, x) -> np.ndarray:
        x = as_tensor2(x)
        for b in self.snapshot:
            x = b(x)
        return x

    def features(self, x) -> np.ndarray:
        x = as_tensor2(x)
        for b in self.blocks:
            x = b(x)
        return x

    def head_prefix(self, x):
        """Constant features prepended to the live ones (Siamese only)."""
        if self.head_spec.kind == "siamese":
            return self.snapshot_features(x)
        return None

    def forward(self, x):
        x = as_tensor2(x)
        if x.shape[1] != self.input_width:
            raise DimensionError(f"network expects width {self.input_width}, got {x.shape[1]}")
        return forward(self.blocks, self.head, x, prefix=self.head_prefix(x))

    def logits(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def clone(self) -> "BlockNetwork":
        return copy.deepcopy(self)

    def state_arrays(self, include_snapshot: bool = True):
        """Ordered ``(name, array)`` pairs describing the whole network state."""
        out = []
        for b in self.blocks:
            for lname, layer in b.layers():
                out.append((f"block{b.id}.{lname}.weight", layer.weight))
                out.append((f"block{b.id}.{lname}.bias", layer.bias))
        out.append(("head.weight", self.head.weight))
        out.append(("head.bias", self.head.bias))
        if include_snapshot:
            for b in self.snapshot:
                for lname, layer in b.layers():
                    out.append((f"snapshot.block{b.id}.{lname}.weight", layer.weight))
                    out.append((f"snapshot.block{b.id}.{lname}.bias", layer.bias))
        return out

    def digest(self, include_snapshot: bool = True) -> str:
        h = hashlib.sha256()
        for name, arr in self.state_arrays(include_snapshot):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def snapshot_digest(self) -> str:
        h = hashlib.sha256()
        for b in self.snapshot:
            for _, layer in b.layers():
                h.update(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
                h.update(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
        return h.hexdigest()


def build_network(d: int, n_blocks: int, classes: int, seed, head_kind: str = "subtune") -> BlockNetwork:
    if d < 1 or n_blocks < 1 or classes < 1:
        raise ValueError("width, block count and class count must all be >= 1")
    rng = np.random.default_rng(seed)
    blocks = [ResidualBlock.init_uniform(d, i + 1, rng) for i in range(n_blocks)]
    spec = HeadSpec(head_kind, 2 * d if head_kind == "siamese" else d, classes)
    head = DenseLayer.init_uniform(spec.in_width, classes, rng)
    net = BlockNetwork(d, blocks, head, spec)
    if head_kind == "linear_probe":
        for b in blocks:
            b.frozen = True
    return net


# --- checkpoints -----------------------------------------------------------

def _block_meta(b: ResidualBlock) -> dict:
    return {
        "id": b.id,
        "frozen": [bool(b.lin1.frozen), bool(b.lin2.frozen)],
        "lin1": list(b.lin1.weight.shape),
        "lin2": list(b.lin2.weight.shape),
    }


def save_checkpoint(net: BlockNetwork, path) -> None:
    meta = {
        "input_width": net.input_width,
        "head": {"kind": net.head_spec.kind, "in_width": net.head_spec.in_width,
                 "classes": net.head_spec.classes, "shape": list(net.head.weight.shape)},
        "blocks": [_block_meta(b) for b in net.blocks],
        "snapshot": [_block_meta(b) for b in net.snapshot],
        "tensors": [[name, list(arr.shape)] for name, arr in net.state_arrays()],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        for _, arr in net.state_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> BlockNetwork:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise CheckpointError("file too short for magic", len(raw))
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    if len(raw) < 16:
        raise CheckpointError("truncated header", len(raw))
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    (meta_len,) = struct.unpack_from("<Q", raw, 8)
    pos = 16
    if pos + meta_len > len(raw):
        raise CheckpointError("truncated metadata", len(raw))
    try:
        meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable metadata: {exc}", pos) from None
    pos += meta_len

    arrays = {}
    for name, shape in meta["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if pos + nbytes > len(raw):
            raise CheckpointError(f"truncated payload for {name}", len(raw))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(DTYPE).reshape(shape)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError("trailing bytes after payload", pos)

    def make_blocks(entries, prefix):
        out = []
        for bm in entries:
            layers = []
            for k, lname in enumerate(("lin1", "lin2")):
                key = f"{prefix}block{bm['id']}.{lname}"
                w, b = arrays[key + ".weight"], arrays[key + ".bias"]
                if list(w.shape) != bm[lname]:
                    raise CheckpointError(f"shape mismatch for {key}", 16)
                layers.append(DenseLayer(w, b, frozen=bm["frozen"][k]))
            out.append(ResidualBlock(layers[0], layers[1], bm["id"]))
        return out

    blocks = make_blocks(meta["blocks"], "")
    snapshot = make_blocks(meta["snapshot"], "snapshot.")
    hm = meta["head"]
    spec = HeadSpec(hm["kind"], hm["in_width"], hm["classes"])
    head = DenseLayer(arrays["head.weight"], arrays["head.bias"])
    if list(head.weight.shape) != [spec.classes, spec.in_width]:
        raise CheckpointError("head shape does not match head spec", 16)
    return BlockNetwork(meta["input_width"], blocks, head, spec, snapshot=snapshot)
