"""Command-line experiment harness.

Configs are flat ``key = value`` text files with dotted keys. Every run
writes versioned CSVs and a JSON summary into ``run.out``. Exit codes:
0 success, 2 config error, 3 runtime error.

    subtune greedy --config exp.cfg --set greedy.epsilon=0.01
    subtune greedy --lookup-oracle
    subtune profile --group 1
"""

from __future__ import annotations

import argparse
import csv
import difflib
import hashlib
import io
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import al as almod
from . import costmodel as cm
from .datakit import SHIFT_KINDS, Dataset, load_csv
from .experiments import DeskTask, gap_run, pretrained_network, test_accuracy
from .model import build_network, load_checkpoint, save_checkpoint
from .prune import PruneSpec, apply_prune, kept_fraction, prune_plan
from .select import LookupEvaluator, finetune_profile, gap_trend, greedy_subtune, pairwise_profile
from .train import TrainConfig, evaluate, finetune

CSV_VERSION = "# subtune-csv v1"

SCHEMAS = {
    "profile": ["group_size", "l_start", "l_end", "mean_acc", "std_acc", "seeds"],
    "greedy": ["step", "candidate_block", "cv_acc", "chosen", "accepted"],
    "cost": ["l_start", "l_end", "total", "baseline", "added"],
    "al": ["round", "budget", "strategy", "seed", "test_acc"],
    "gap": ["r_prime", "delta", "m", "seed", "train_acc", "test_acc", "gap"],
    # harness-only tables
    "pretrain": ["source_n", "epochs", "train_acc", "holdout_acc", "digest"],
    "subtune": ["seed", "blocks", "head", "reinit", "train_acc", "test_acc"],
    "prune": ["seed", "blocks", "scope", "norm", "sparsity", "kept_fraction", "test_acc", "linear_probe_acc"],
}

# The lookup table used by ``greedy --lookup-oracle``.
ORACLE_TABLE = {(): 0.5, (1,): 0.6, (2,): 0.7, (3,): 0.65, (1, 2): 0.72, (2, 3): 0.71, (1, 2, 3): 0.722}
ORACLE_EPSILON = 0.005

COMMANDS = ("pretrain", "profile", "greedy", "subtune", "siamese", "prune", "al", "cost", "gap", "report")


class ConfigError(ValueError):
    pass


_T = DeskTask()

# key -> (type, default, help)
SCHEMA = {
    "run.out": (str, "runs", "output directory"),
    "run.seeds": (str, "0,1,2,3,4", "comma-separated trial seeds"),
    "run.checkpoint": (str, "", "pretrained checkpoint to load; empty = pretrain in-process"),
    "data.seed": (int, _T.task_seed, "source task seed"),
    "data.width": (int, _T.width, "feature width d"),
    "data.n_blocks": (int, _T.n_blocks, "residual blocks N"),
    "data.classes": (int, _T.classes, "number of classes C"),
    "data.source_n": (int, _T.source_n, "source samples"),
    "data.warp_depth": (int, _T.warp_depth, "tanh warp layers of the source task"),
    "data.warp_gain": (float, _T.warp_gain, "warp gain"),
    "data.noise": (float, _T.noise, "cluster noise"),
    "data.modes_per_class": (int, _T.modes_per_class, "cluster centres per class"),
    "data.shift": (str, _T.shift, "target shift kind"),
    "data.severity": (int, _T.severity, "shift severity 1..5"),
    "data.m": (int, _T.m, "target training samples"),
    "data.n_test": (int, _T.n_test, "target test samples"),
    "data.train_csv": (str, "", "target training CSV (overrides the synthetic target)"),
    "data.test_csv": (str, "", "target test CSV"),
    "data.label_column": (str, "label", "label column of the CSVs"),
    "pretrain.lr": (float, _T.pretrain.lr, ""),
    "pretrain.epochs": (int, _T.pretrain.epochs, ""),
    "pretrain.batch_size": (int, _T.pretrain.batch_size, ""),
    "pretrain.weight_decay": (float, _T.pretrain.weight_decay, ""),
    "pretrain.seed": (int, _T.net_seed, "network init seed"),
    "train.lr": (float, _T.finetune.lr, "block learning rate"),
    "train.head_lr": (float, _T.finetune.head_lr or 0.0, "head learning rate; 0 = train.lr"),
    "train.epochs": (int, _T.finetune.epochs, ""),
    "train.batch_size": (int, _T.finetune.batch_size, ""),
    "train.weight_decay": (float, _T.finetune.weight_decay, ""),
    "profile.group": (str, "1", "window size 1/2/3, or 'pairwise'"),
    "profile.eval": (str, "holdout", "'holdout' (target test split) or 'cv'"),
    "profile.k": (int, 5, "folds for cv"),
    "greedy.epsilon": (float, 0.002, "minimum accepted gain"),
    "greedy.k_max": (int, 0, "maximum subset size; 0 = unlimited"),
    "greedy.budget": (int, 0, "parameter budget r'; 0 = unlimited"),
    "greedy.init": (str, "linear_probe", "'linear_probe' or 'zero'"),
    "greedy.k": (int, 5, "CV folds"),
    "greedy.seed": (int, 0, "target draw and training seed"),
    "greedy.lookup": (str, "", "JSON lookup table {\"2,1\": acc, ...} replacing CV"),
    "greedy.n_blocks": (int, 3, "block count for lookup runs"),
    "subtune.blocks": (str, "1", "comma-separated block ids"),
    "subtune.reinit": (bool, False, "randomly re-initialise the tuned blocks first"),
    "siamese.blocks": (str, "1", "comma-separated block ids"),
    "prune.blocks": (str, "6,7,8", "comma-separated block ids"),
    "prune.scope": (str, "global", "'local' or 'global'"),
    "prune.norm": (str, "l1", "'l1' or 'l2'"),
    "prune.sparsity": (float, 0.9375, "channel sparsity in [0, 1)"),
    "al.pool": (int, 50000, "pool size"),
    "al.n_test": (int, 2000, "test size"),
    "al.strategies": (str, "margin,random", ""),
    "al.blocks": (str, "1", "tuned blocks"),
    "cost.c": (str, "", "per-block compute times; empty = derive from the network"),
    "cost.s": (str, "", "per-block IO times"),
    "cost.time_per_mac": (float, 1.0, ""),
    "cost.time_per_byte": (float, 1.0, ""),
    "gap.sizes": (str, "0,1,2,4,8", "subset sizes"),
    "gap.delta": (float, 0.5, "norm-ball radius"),
    "gap.m": (int, 100, "training samples"),
    "gap.epochs": (int, 50, ""),
    "report.inputs": (str, "", "CSV files to merge; empty = every known CSV in run.out"),
}


def _parse_value(key, raw: str):
    typ = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def _check_key(key: str) -> None:
    if key not in SCHEMA:
        near = difflib.get_close_matches(key, SCHEMA, n=1, cutoff=0.0)
        hint = f"; nearest valid key is {near[0]!r}" if near else ""
        raise ConfigError(f"unknown config key {key!r}{hint}")


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Returns only the keys given."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        _check_key(key)
        out[key] = _parse_value(key, raw)
    return out


def resolve(overrides: dict) -> dict:
    cfg = {k: v[1] for k, v in SCHEMA.items()}
    for k, v in overrides.items():
        _check_key(k)
        cfg[k] = _parse_value(k, v) if isinstance(v, str) and SCHEMA[k][0] is not str else v
    return cfg


def config_hash(cfg: dict) -> str:
    # output location does not affect results
    text = "\n".join(f"{k}={cfg[k]!r}" for k in sorted(cfg) if k != "run.out")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _ints(text: str, key: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None


def _floats(text: str, key: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, kind: str, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    buf.write(CSV_VERSION + "\n")
    w.writerow(SCHEMAS[kind])
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> list:
    """Rows of a harness CSV as dicts (the version line is checked and skipped)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CSV_VERSION:
        raise ValueError(f"{path}: missing '{CSV_VERSION}' header line")
    return list(csv.DictReader(lines[1:]))


# --- experiment plumbing -------------------------------------------------

def task_from(cfg: dict) -> DeskTask:
    if cfg["data.shift"] not in SHIFT_KINDS:
        raise ConfigError(f"data.shift must be one of {SHIFT_KINDS}")
    if not 1 <= cfg["data.severity"] <= 5:
        raise ConfigError("data.severity must be in 1..5")
    return DeskTask(
        width=cfg["data.width"], n_blocks=cfg["data.n_blocks"], classes=cfg["data.classes"],
        source_n=cfg["data.source_n"], warp_depth=cfg["data.warp_depth"], warp_gain=cfg["data.warp_gain"],
        noise=cfg["data.noise"], modes_per_class=cfg["data.modes_per_class"], task_seed=cfg["data.seed"],
        net_seed=cfg["pretrain.seed"],
        pretrain=TrainConfig(lr=cfg["pretrain.lr"], epochs=cfg["pretrain.epochs"],
                             batch_size=cfg["pretrain.batch_size"], weight_decay=cfg["pretrain.weight_decay"]),
        shift=cfg["data.shift"], severity=cfg["data.severity"], m=cfg["data.m"], n_test=cfg["data.n_test"],
        finetune=train_config(cfg))


def train_config(cfg: dict, seed: int = 0) -> TrainConfig:
    try:
        return TrainConfig(lr=cfg["train.lr"], head_lr=cfg["train.head_lr"] or None, epochs=cfg["train.epochs"],
                           batch_size=cfg["train.batch_size"], weight_decay=cfg["train.weight_decay"], seed=seed)
    except ValueError as exc:
        raise ConfigError(f"train.*: {exc}") from None


@dataclass
class Context:
    cfg: dict
    out: Path
    seeds: tuple

    @property
    def task(self) -> DeskTask:
        return task_from(self.cfg)

    def pretrained(self):
        path = self.cfg["run.checkpoint"]
        if path:
            return load_checkpoint(path)
        return pretrained_network(self.task).clone()

    def target(self, seed: int):
        """(train, test) for one seed: the configured CSVs, or the synthetic shifted task."""
        tr_path, ts_path = self.cfg["data.train_csv"], self.cfg["data.test_csv"]
        if bool(tr_path) != bool(ts_path):
            raise ConfigError("data.train_csv and data.test_csv must be given together")
        if tr_path:
            col = self.cfg["data.label_column"]
            return (load_csv(tr_path, col, self.cfg["data.classes"]),
                    load_csv(ts_path, col, self.cfg["data.classes"]))
        return self.task.target(seed)


def cmd_pretrain(ctx: Context) -> dict:
    task = ctx.task
    net = pretrained_network(task).clone()
    path = ctx.out / "pretrained.sbtn"
    save_checkpoint(net, path)
    held = task.draw(2000, 10 ** 6)
    rows = [(task.source_n, task.pretrain.epochs, evaluate(net, task.source()).accuracy,
             evaluate(net, held).accuracy, net.digest())]
    write_csv(ctx.out / "pretrain.csv", "pretrain", rows)
    return {"checkpoint": str(path), "holdout_acc": rows[0][3]}


def cmd_profile(ctx: Context) -> dict:
    pre = ctx.pretrained()
    tr, ts = ctx.target(ctx.cfg["data.seed"])
    mode = ctx.cfg["profile.eval"]
    if mode not in ("holdout", "cv"):
        raise ConfigError("profile.eval must be 'holdout' or 'cv'")
    cfg = train_config(ctx.cfg)
    test = ts if mode == "holdout" else None
    group = ctx.cfg["profile.group"].strip()
    seeds_txt = ";".join(str(s) for s in ctx.seeds)
    rows = []
    if group == "pairwise":
        mat = pairwise_profile(pre, tr, cfg, eval_mode=mode, seeds=ctx.seeds, test=test, k=ctx.cfg["profile.k"])
        n = pre.n_blocks
        for i in range(n):
            for j in range(i, n):
                rows.append(("pair", i + 1, j + 1, float(mat[i, j]), "", seeds_txt))
        return _profile_summary(ctx, rows)
    try:
        g = int(group)
    except ValueError:
        raise ConfigError("profile.group must be an integer or 'pairwise'") from None
    if not 1 <= g <= pre.n_blocks:
        raise ConfigError(f"profile.group must be in 1..{pre.n_blocks}")
    res = finetune_profile(pre, tr, g, mode, cfg, ctx.seeds, test=test, k=ctx.cfg["profile.k"])
    for e in res.entries:
        rows.append((g, e.l_start, e.l_end, e.mean, e.std, seeds_txt))
    summary = _profile_summary(ctx, rows)
    summary["argmax"] = [res.argmax().l_start, res.argmax().l_end]
    return summary


def _profile_summary(ctx, rows) -> dict:
    write_csv(ctx.out / "profile.csv", "profile", rows)
    return {"entries": len(rows)}


def _lookup_table(text: str) -> dict:
    raw = json.loads(text)
    return {tuple(int(v) for v in key.split(",") if v.strip()): float(acc) for key, acc in raw.items()}


def cmd_greedy(ctx: Context, lookup_oracle: bool = False) -> dict:
    c = ctx.cfg
    if c["greedy.init"] not in ("linear_probe", "zero"):
        raise ConfigError("greedy.init must be 'linear_probe' or 'zero'")
    if c["greedy.epsilon"] < 0:
        raise ConfigError("greedy.epsilon must be >= 0")
    k_max = c["greedy.k_max"] or None
    budget = c["greedy.budget"] or None
    if lookup_oracle or c["greedy.lookup"]:
        table = ORACLE_TABLE if lookup_oracle else _lookup_table(Path(c["greedy.lookup"]).read_text("utf-8"))
        eps = ORACLE_EPSILON if lookup_oracle else c["greedy.epsilon"]
        if budget is not None:
            raise ConfigError("greedy.budget needs a network; not available with a lookup table")
        ev = LookupEvaluator(table)
        trace = greedy_subtune(None, epsilon=eps, k_max=k_max, evaluator=ev, init=c["greedy.init"],
                               n_blocks=(3 if lookup_oracle else c["greedy.n_blocks"]))
        extra = {"evaluator_calls": ev.calls}
    else:
        pre = ctx.pretrained()
        seed = c["greedy.seed"]
        tr, ts = ctx.target(seed)
        cfg = train_config(c, seed)
        trace = greedy_subtune(pre, tr, c["greedy.epsilon"], k_max, budget, cfg, init=c["greedy.init"],
                               k=c["greedy.k"])
        extra = {"test_acc": test_accuracy(pre, trace.final, tr, ts, cfg),
                 "linear_probe_test_acc": test_accuracy(pre, (), tr, ts, cfg)}
    rows = [(0, "", trace.baseline, "", 0)]
    chosen = []
    for i, step in enumerate(trace.steps, start=1):
        if step.accepted:
            chosen.append(step.best_block)
        label = ",".join(str(b) for b in chosen)
        for b, score in step.candidates:
            rows.append((i, b, score, label, int(step.accepted and b == step.best_block)))
    write_csv(ctx.out / "greedy.csv", "greedy", rows)
    return {"final": list(trace.final), "candidate_evaluations": trace.candidate_evaluations, **extra}


def _blocks(ctx, key) -> tuple:
    ids = _ints(ctx.cfg[key], key)
    n = ctx.cfg["data.n_blocks"]
    if any(not 1 <= b <= n for b in ids) or len(set(ids)) != len(ids):
        raise ConfigError(f"{key}: block ids must be distinct and in 1..{n}")
    return ids


def _run_subtune(ctx: Context, blocks, head: str, reinit: bool) -> dict:
    pre = ctx.pretrained()
    rows = []
    for seed in ctx.seeds:
        tr, ts = ctx.target(seed)
        cfg = train_config(ctx.cfg, seed)

        def prepare(net, seed=seed):
            if reinit:
                net.reinit_blocks(blocks, [seed, 41])

        net, rec = finetune(pre, blocks, tr, cfg, head_kind=head, prepare=prepare)
        for b in net.blocks:
            if b.frozen and b.id not in blocks:
                snap = pre.snapshot[b.id - 1]
                if not (np.array_equal(b.lin1.weight, snap.lin1.weight)
                        and np.array_equal(b.lin2.weight, snap.lin2.weight)):
                    raise RuntimeError(f"frozen block {b.id} drifted from the snapshot")
        rows.append((seed, ",".join(map(str, blocks)), head, int(reinit), rec.accuracy,
                     evaluate(net, ts).accuracy))
    write_csv(ctx.out / f"{head if head == 'siamese' else 'subtune'}.csv", "subtune", rows)
    return {"mean_test_acc": float(np.mean([r[-1] for r in rows]))}


def cmd_subtune(ctx: Context) -> dict:
    return _run_subtune(ctx, _blocks(ctx, "subtune.blocks"), "subtune", ctx.cfg["subtune.reinit"])


def cmd_siamese(ctx: Context) -> dict:
    return _run_subtune(ctx, _blocks(ctx, "siamese.blocks"), "siamese", False)


def cmd_prune(ctx: Context) -> dict:
    blocks = _blocks(ctx, "prune.blocks")
    try:
        spec = PruneSpec(ctx.cfg["prune.scope"], ctx.cfg["prune.norm"], ctx.cfg["prune.sparsity"], blocks)
    except ValueError as exc:
        raise ConfigError(f"prune.*: {exc}") from None
    pre = ctx.pretrained()
    rows = []
    for seed in ctx.seeds:
        tr, ts = ctx.target(seed)
        cfg = train_config(ctx.cfg, seed)
        kept = {}

        def prepare(net):
            pruned = apply_prune(net, prune_plan(net, spec))
            kept["f"] = kept_fraction(net, pruned, blocks)
            return pruned

        acc = test_accuracy(pre, blocks, tr, ts, cfg, prepare=prepare)
        rows.append((seed, ",".join(map(str, blocks)), spec.scope, spec.norm, spec.sparsity, kept["f"], acc,
                     test_accuracy(pre, (), tr, ts, cfg)))
    write_csv(ctx.out / "prune.csv", "prune", rows)
    return {"kept_fraction": rows[0][5], "mean_test_acc": float(np.mean([r[6] for r in rows])),
            "mean_linear_probe_acc": float(np.mean([r[7] for r in rows]))}


def cmd_al(ctx: Context) -> dict:
    blocks = _blocks(ctx, "al.blocks")
    strategies = [s.strip() for s in ctx.cfg["al.strategies"].split(",") if s.strip()]
    for s in strategies:
        if s not in ("margin", "random"):
            raise ConfigError(f"al.strategies: unknown strategy {s!r}")
    pre = ctx.pretrained()
    task = ctx.task
    initial, budgets = almod.scaled_schedule(ctx.cfg["al.pool"])
    rows = []
    for seed in ctx.seeds:
        pool, test = task.target(seed, m=ctx.cfg["al.pool"], n_test=ctx.cfg["al.n_test"])
        for strategy in strategies:
            acfg = almod.ALConfig(initial, budgets, strategy, seed, train_config(ctx.cfg), blocks)
            for r in almod.al_loop(pre, pool, test, acfg):
                rows.append((r.round, r.budget, r.strategy, r.seed, r.test_acc))
    write_csv(ctx.out / "al.csv", "al", rows)
    return {"initial": initial, "budgets": list(budgets)}


def cmd_cost(ctx: Context) -> dict:
    c_txt, s_txt = ctx.cfg["cost.c"], ctx.cfg["cost.s"]
    if bool(c_txt) != bool(s_txt):
        raise ConfigError("cost.c and cost.s must be given together")
    if c_txt:
        try:
            p = cm.CostProfile(_floats(c_txt, "cost.c"), _floats(s_txt, "cost.s"))
        except ValueError as exc:
            raise ConfigError(f"cost.*: {exc}") from None
    else:
        net = build_network(ctx.cfg["data.width"], ctx.cfg["data.n_blocks"], ctx.cfg["data.classes"], 0)
        p = cm.profile_from_network(net, ctx.cfg["cost.time_per_mac"], ctx.cfg["cost.time_per_byte"])
    base = cm.baseline_time(p)
    rows = []
    for ls in range(1, p.n + 1):
        for le in range(ls, p.n + 1):
            r = cm.TuneRange(ls, le)
            total = cm.total_time(p, r)
            rows.append((ls, le, total, base, total - base))
    write_csv(ctx.out / "cost.csv", "cost", rows)
    return {"n_blocks": p.n, "baseline": base, "ranges": len(rows)}


def cmd_gap(ctx: Context) -> dict:
    sizes = _ints(ctx.cfg["gap.sizes"], "gap.sizes")
    if not sizes:
        raise ConfigError("gap.sizes is empty")
    if ctx.cfg["run.checkpoint"]:
        raise ConfigError("gap runs on the synthetic task; leave run.checkpoint empty")
    try:
        recs = gap_run(ctx.task, ctx.seeds, sizes, ctx.cfg["gap.delta"], ctx.cfg["gap.m"], ctx.cfg["gap.epochs"])
    except ValueError as exc:
        raise ConfigError(f"gap.*: {exc}") from None
    rows = [(r.r_prime, r.delta, r.m, r.seed, r.train_acc, r.test_acc, r.gap) for r in recs]
    write_csv(ctx.out / "gap.csv", "gap", rows)
    return {"spearman": gap_trend(recs) if len(set(sizes)) > 1 else None}


# --- report ----------------------------------------------------------------

def emit_plot_data(csv_paths) -> dict:
    """Merge report CSVs into plot-ready series.

    Series kinds: ``profile`` (block window -> acc +- std), ``acc_vs_cost``
    (needs profile and cost), ``al`` (budget -> mean acc per strategy) and
    ``gap`` (r' -> mean gap).
    """
    tables = {}
    for path in csv_paths:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"report input {path} does not exist")
        tables[path.stem] = read_csv(path)
    series = []
    prof = tables.get("profile")
    if prof is not None:
        for g in sorted({r["group_size"] for r in prof}):
            pts = [r for r in prof if r["group_size"] == g]
            series.append({"kind": "profile", "group_size": g,
                           "x": [[int(r["l_start"]), int(r["l_end"])] for r in pts],
                           "y": [float(r["mean_acc"]) for r in pts],
                           "err": [float(r["std_acc"]) if r["std_acc"] else 0.0 for r in pts]})
        if "cost" in tables:
            added = {(int(r["l_start"]), int(r["l_end"])): float(r["added"]) for r in tables["cost"]}
            pts = [r for r in prof if (int(r["l_start"]), int(r["l_end"])) in added]
            series.append({"kind": "acc_vs_cost",
                           "x": [added[(int(r["l_start"]), int(r["l_end"]))] for r in pts],
                           "y": [float(r["mean_acc"]) for r in pts],
                           "labels": [f"{r['l_start']}-{r['l_end']}" for r in pts]})
    if "al" in tables:
        for strategy in sorted({r["strategy"] for r in tables["al"]}):
            by_budget = {}
            for r in tables["al"]:
                if r["strategy"] == strategy:
                    by_budget.setdefault(int(r["budget"]), []).append(float(r["test_acc"]))
            xs = sorted(by_budget)
            series.append({"kind": "al", "strategy": strategy, "x": xs,
                           "y": [float(np.mean(by_budget[b])) for b in xs]})
    if "gap" in tables:
        by_r = {}
        for r in tables["gap"]:
            by_r.setdefault(int(r["r_prime"]), []).append(float(r["gap"]))
        xs = sorted(by_r)
        series.append({"kind": "gap", "x": xs, "sqrt_x": [float(np.sqrt(x)) for x in xs],
                       "y": [float(np.mean(by_r[x])) for x in xs]})
    return {"series": series}


def cmd_report(ctx: Context) -> dict:
    if ctx.cfg["report.inputs"]:
        paths = [Path(p.strip()) for p in ctx.cfg["report.inputs"].split(",") if p.strip()]
    else:
        paths = [ctx.out / f"{k}.csv" for k in ("profile", "cost", "al", "gap") if (ctx.out / f"{k}.csv").exists()]
    data = emit_plot_data(paths)
    (ctx.out / "plot_data.json").write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return {"series": len(data["series"])}


HANDLERS = {
    "pretrain": cmd_pretrain, "profile": cmd_profile, "greedy": cmd_greedy, "subtune": cmd_subtune,
    "siamese": cmd_siamese, "prune": cmd_prune, "al": cmd_al, "cost": cmd_cost, "gap": cmd_gap,
    "report": cmd_report,
}


def run(command: str, overrides: dict, *, lookup_oracle: bool = False) -> dict:
    """Run one subcommand and write its CSVs and ``<command>.json``. Returns the summary."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}; expected one of {COMMANDS}")
    cfg = resolve(overrides)
    seeds = _ints(cfg["run.seeds"], "run.seeds")
    if not seeds:
        raise ConfigError("run.seeds is empty")
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, out, seeds)
    handler = HANDLERS[command]
    body = handler(ctx, lookup_oracle) if command == "greedy" else handler(ctx)
    h = config_hash(cfg)
    summary = {"command": command, "run_id": f"{command}-{h[:12]}", "config_hash": h, "seeds": list(seeds),
               "csv": sorted(str(p) for p in out.glob("*.csv")), "result": body}
    (out / f"{command}.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="subtune", description="SubTuning experiment harness")
    ap.add_argument("command", nargs="?", choices=COMMANDS)
    ap.add_argument("--config", help="key = value config file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
    ap.add_argument("--out", help="shorthand for run.out")
    ap.add_argument("--seeds", help="shorthand for run.seeds")
    ap.add_argument("--group", help="shorthand for profile.group")
    ap.add_argument("--lookup-oracle", action="store_true", help="greedy on the built-in lookup table")
    ap.add_argument("--print-schema", action="store_true", help="list config keys and defaults, then exit")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_schema:
        for key, (typ, default, doc) in SCHEMA.items():
            print(f"{key} = {default!r}  ({typ.__name__}) {doc}")
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("config error: a command is required", file=sys.stderr)
        return 2
    try:
        overrides = parse_config(Path(args.config).read_text("utf-8")) if args.config else {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            _check_key(k.strip())
            overrides[k.strip()] = _parse_value(k.strip(), v)
        for flag, key in (("out", "run.out"), ("seeds", "run.seeds"), ("group", "profile.group")):
            if getattr(args, flag) is not None:
                overrides[key] = getattr(args, flag)
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        summary = run(args.command, overrides, lookup_oracle=args.lookup_oracle)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report, don't trace
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(summary["result"], sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
