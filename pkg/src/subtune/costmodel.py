"""Inference-time model for serving a SubTuned task next to the original one.

Layers are indexed 1..N. ``c[i]`` is the compute time of layer i and
``s[i]`` the time to load its weights; compute of layer i overlaps the
load of layer i+1. Out-of-range indices cost nothing (c_0 = 0, s_{N+1} = 0).

Two independent routes give the forked inference time:

* :func:`total_time` evaluates the closed form directly;
* :func:`simulate_pipeline` builds a stage plan and runs a discrete-event
  simulation of one compute unit and one IO unit with a single prefetch
  buffer.

Costs are abstract time units.
"""

from __future__ import annotations

import heapq
from collections import deque
import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CostProfile:
    c: tuple
    s: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in self.c)
        s = tuple(float(v) for v in self.s)
        if len(c) != len(s):
            raise ValueError(f"c has {len(c)} entries but s has {len(s)}")
        if not c:
            raise ValueError("profile needs at least one layer")
        if min(c) < 0 or min(s) < 0:
            raise ValueError("costs must be non-negative")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "s", s)

    @property
    def n(self) -> int:
        return len(self.c)

    def comp(self, i: int) -> float:
        return self.c[i - 1] if 1 <= i <= len(self.c) else 0.0

    def io(self, i: int) -> float:
        return self.s[i - 1] if 1 <= i <= len(self.s) else 0.0

    def scaled(self, k: float) -> "CostProfile":
        return CostProfile([k * v for v in self.c], [k * v for v in self.s])

    def to_json(self) -> str:
        return json.dumps({"c": list(self.c), "s": list(self.s)})

    @classmethod
    def from_json(cls, text: str) -> "CostProfile":
        obj = json.loads(text)
        return cls(obj["c"], obj["s"])


@dataclass(frozen=True)
class TuneRange:
    l_start: int
    l_end: int

    def check(self, p: CostProfile) -> None:
        if not 1 <= self.l_start <= self.l_end <= p.n:
            raise ValueError(f"range [{self.l_start}, {self.l_end}] invalid for {p.n} layers")


def total_time(p: CostProfile, r: TuneRange) -> float:
    """Forked inference time in closed form.

    ``max(2 s_ls, c_{ls-1}) + sum_{ls..le} 2 max(c_i, s_{i+1})
    + sum_{le+1..N-1} max(2 c_i, s_{i+1}) + 2 c_N``
    """
    r.check(p)
    ls, le, n = r.l_start, r.l_end, p.n
    t = max(2 * p.io(ls), p.comp(ls - 1))
    for i in range(ls, le + 1):
        t += 2 * max(p.comp(i), p.io(i + 1))
    for i in range(le + 1, n):
        t += max(2 * p.comp(i), p.io(i + 1))
    t += 2 * p.comp(n)
    return t


def baseline_time(p: CostProfile) -> float:
    """Single-task time under the same overlap model: s_1 + sum max(c_i, s_{i+1}) + c_N."""
    t = p.io(1)
    for i in range(1, p.n):
        t += max(p.comp(i), p.io(i + 1))
    t += p.comp(p.n)
    return t


def added_cost(p: CostProfile, r: TuneRange) -> float:
    return total_time(p, r) - baseline_time(p)


# --- discrete-event simulation ---------------------------------------------

@dataclass
class Stage:
    loads: list  # weight loads that must finish before this stage computes
    computes: list  # compute jobs, run back to back


def stage_plan(p: CostProfile, r: TuneRange | None, fork: bool) -> list:
    """Stages executed by the serving pipeline.

    Without a fork every layer is one stage: load once, compute once.

    With a fork the shared prefix is already resident; the pipeline enters
    at layer ``ls - 1`` (its compute only) and then

    * forked layers ``ls..le`` load and compute two copies;
    * the first merged layer is still fetched by both branch prefetchers,
      so it loads two copies;
    * later merged layers load once and run one batch of doubled size;
    * a final batched pass over layer N (``2 c_N``) closes the pipeline. When
      the fork reaches layer N this pass comes on top of the forked one,
      matching the accounting of the closed form.
    """
    if not fork:
        return [Stage([p.io(i)], [p.comp(i)]) for i in range(1, p.n + 1)]
    r.check(p)
    ls, le, n = r.l_start, r.l_end, p.n
    plan = [Stage([], [p.comp(ls - 1)])]
    for i in range(ls, le + 1):
        plan.append(Stage([p.io(i), p.io(i)], [p.comp(i), p.comp(i)]))
    first_merged = True
    for i in range(le + 1, n + 1):
        copies = 2 if first_merged else 1
        plan.append(Stage([p.io(i)] * copies, [2 * p.comp(i)]))
        first_merged = False
    if le == n:
        plan.append(Stage([p.io(n + 1)] * 2, [2 * p.comp(n)]))
    return plan


def run_stages(plan: list) -> float:
    """Event-driven execution of ``plan``; returns the completion time.

    The IO unit loads stages in order. With one prefetch buffer, loading for
    stage k may begin only once stage k-1 has started computing (its own
    buffer is then in use and the previous one is free). A stage computes
    once the compute unit is idle and all its loads have landed.
    """
    n = len(plan)
    loads_left = [len(st.loads) for st in plan]
    events = []  # (time, seq, kind, stage, job)
    seq = 0

    def push(t, kind, k, j):
        nonlocal seq
        heapq.heappush(events, (t, seq, kind, k, j))
        seq += 1

    io_busy = False
    io_queue = deque()  # (stage, job) ready to load
    load_stage_released = 0  # stages < this may start loading
    compute_busy = False
    next_compute = 0  # next stage to compute
    now = 0.0
    done_time = 0.0

    def release_loads(upto):
        nonlocal load_stage_released
        while load_stage_released < min(upto, n):
            k = load_stage_released
            io_queue.extend((k, j) for j in range(len(plan[k].loads)))
            load_stage_released += 1

    def try_io():
        nonlocal io_busy
        if not io_busy and io_queue:
            k, j = io_queue.popleft()
            io_busy = True
            push(now + plan[k].loads[j], "load", k, j)

    def try_compute():
        nonlocal compute_busy, next_compute
        if compute_busy or next_compute >= n or loads_left[next_compute] > 0:
            return
        k = next_compute
        next_compute += 1
        compute_busy = True
        # stage k occupies a buffer; stage k+1 may now be prefetched
        release_loads(k + 2)
        try_io()
        push(now + plan[k].computes[0] if plan[k].computes else now, "compute", k, 0)

    release_loads(1)
    try_io()
    try_compute()
    while events:
        now, _, kind, k, j = heapq.heappop(events)
        if kind == "load":
            io_busy = False
            loads_left[k] -= 1
            try_io()
        else:
            if j + 1 < len(plan[k].computes):
                push(now + plan[k].computes[j + 1], "compute", k, j + 1)
                continue
            compute_busy = False
            done_time = now
        try_compute()
    if next_compute < n:
        raise RuntimeError("pipeline deadlocked")
    return done_time


def simulate_pipeline(p: CostProfile, r: TuneRange | None = None, fork: bool = True) -> float:
    return run_stages(stage_plan(p, r, fork))


def sweep_ranges(p: CostProfile, width: int):
    """Added cost of every window of ``width`` consecutive tuned layers.

    Returns ``(rows, best)`` where rows are dicts with keys
    l_start, l_end, total, baseline, added and ``best`` is the row with the
    smallest added cost (earliest on ties).
    """
    if not 1 <= width <= p.n:
        raise ValueError(f"width must be in 1..{p.n}")
    base = baseline_time(p)
    rows = []
    for ls in range(1, p.n - width + 2):
        r = TuneRange(ls, ls + width - 1)
        tot = total_time(p, r)
        rows.append({"l_start": r.l_start, "l_end": r.l_end, "total": tot, "baseline": base, "added": tot - base})
    best = min(rows, key=lambda row: (row["added"], row["l_start"]))
    return rows, best


def block_macs(block) -> int:
    """Multiply-accumulates per sample of one residual block (two dense maps)."""
    return 2 * block.width * block.hidden


def profile_from_network(net, time_per_mac: float = 1.0, time_per_byte: float = 1.0) -> CostProfile:
    if time_per_mac <= 0 or time_per_byte <= 0:
        raise ValueError("unit costs must be positive")
    c = [block_macs(b) * time_per_mac for b in net.blocks]
    s = [b.n_params * 8 * time_per_byte for b in net.blocks]
    return CostProfile(c, s)


def random_profile(rng: np.random.Generator, n: int, high: float = 10.0, grid: int = 2 ** 20) -> CostProfile:
    """Uniform [0, high] costs snapped to multiples of 1/grid, so sums are exact in float64."""
    c = np.round(rng.uniform(0, high, n) * grid) / grid
    s = np.round(rng.uniform(0, high, n) * grid) / grid
    return CostProfile(c, s)
