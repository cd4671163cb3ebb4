"""Experiment drivers: the toxic-count sweep, the safety/over-refusal curve,
the contrastive-augmentation comparison and the bound-verification sweep."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..corpus import DatasetSpec, Example, HeldOut, build_dataset
from ..errors import ContractError
from ..model import ModelParams
from ..trainer import TrainConfig, TrainingAborted, base_for, default_heldout, train
from ..transport import cost_matrix, emd_lower_bound, exact_emd, random_instance
from .metrics import EvalReport, evaluate

log = logging.getLogger(__name__)

SWEEP_COLUMNS = (
    "method", "toxic_count", "seed", "lam", "status",
    "harmful_count", "n_toxic_prompts", "harmful_rate", "safe_exact_match", "seemingly_toxic_exact_match",
)
CURVE_COLUMNS = ("series", "step", "safety_level", "over_refusal", "harmful_rate", "safe_exact_match", "seemingly_toxic_exact_match")
CONTRASTIVE_COLUMNS = ("arm", "dataset_size") + tuple(f.name for f in dataclasses.fields(EvalReport))
BOUND_COLUMNS = ("instance_id", "vocab_size", "exact_emd", "lower_bound", "gap", "solve_time_ns")


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


# ------------------------------------------------------------------- sweep


@dataclass(frozen=True)
class SweepSpec:
    toxic_counts: tuple[int, ...] = (20, 10, 6, 2)
    methods: tuple[str, ...] = ("EMD", "NLCL", "STL")
    seeds: tuple[int, ...] = (0, 1, 2)
    n_safe: int = 4000
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        counts = list(self.toxic_counts)
        if not counts or any(a <= b for a, b in zip(counts, counts[1:])) or counts[-1] < 1:
            raise ContractError(f"toxic_counts must be positive and strictly decreasing, got {counts}")
        if len(self.seeds) < 3 or len(set(self.seeds)) != len(self.seeds):
            raise ContractError("a sweep needs at least 3 distinct seeds")
        if not self.methods:
            raise ContractError("no methods given")

    def cells(self) -> list[tuple[str, int, int]]:
        return [(m, n, s) for m in self.methods for n in self.toxic_counts for s in self.seeds]


def seed_context(spec: SweepSpec, seed: int, base_cache: Path | None):
    """Base model and held-out sets shared by every cell with this seed."""
    cfg = dataclasses.replace(spec.train, seed=seed)
    # the largest toxic set contains every smaller one, so one held-out draw serves all rungs
    widest = build_dataset(DatasetSpec(n_safe=spec.n_safe, n_toxic=spec.toxic_counts[0], seed=seed))
    return base_for(cfg, base_cache), default_heldout(seed, widest)


def run_cell(spec: SweepSpec, method: str, toxic_count: int, seed: int, base: ModelParams, heldout: HeldOut) -> dict:
    cfg = dataclasses.replace(spec.train, method=method, seed=seed)
    data = build_dataset(DatasetSpec(n_safe=spec.n_safe, n_toxic=toxic_count, seed=seed))
    row = {"method": method, "toxic_count": toxic_count, "seed": seed, "lam": cfg.resolved_lambda(toxic_count)}
    try:
        res = train(cfg, data, init=base)
        rep = evaluate(res.params, heldout, training=data)
    except TrainingAborted as exc:
        log.warning("cell %s/%d/%d failed: %s", method, toxic_count, seed, exc)
        return {**row, "status": "failed", "harmful_count": "", "n_toxic_prompts": "", "harmful_rate": "",
                "safe_exact_match": "", "seemingly_toxic_exact_match": ""}
    return {
        **row, "status": "ok",
        "harmful_count": rep.harmful_count, "n_toxic_prompts": rep.n_toxic_prompts, "harmful_rate": rep.harmful_rate,
        "safe_exact_match": rep.safe_task_exact_match, "seemingly_toxic_exact_match": rep.seemingly_toxic_exact_match,
    }


def _seed_cells(args) -> list[dict]:
    spec, seed, cells, base_cache = args
    base, heldout = seed_context(spec, seed, base_cache)
    return [run_cell(spec, m, n, s, base, heldout) for m, n, s in cells]


def data_efficiency_sweep(spec: SweepSpec, jobs: int = 1, base_cache: Path | None = None) -> list[dict]:
    """One fresh fine-tune per (method, toxic count, seed); rows in ``spec.cells()`` order."""
    by_seed = {s: [c for c in spec.cells() if c[2] == s] for s in spec.seeds}
    tasks = [(spec, s, by_seed[s], base_cache) for s in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_seed_cells, tasks))
    else:
        chunks = [_seed_cells(t) for t in tasks]
    rows = {(r["method"], r["toxic_count"], r["seed"]): r for chunk in chunks for r in chunk}
    return [rows[c] for c in spec.cells()]


def sweep_csv(rows: list[dict]) -> str:
    return _csv(SWEEP_COLUMNS, rows)


def sweep_table(rows: list[dict]) -> str:
    """Harmful counts laid out with toxic counts down and methods across, one entry per seed."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    counts = list(dict.fromkeys(r["toxic_count"] for r in rows))
    denom = next((r["n_toxic_prompts"] for r in rows if r["status"] == "ok"), "?")
    cell = {}
    for r in rows:
        v = str(r["harmful_count"]) if r["status"] == "ok" else "fail"
        cell.setdefault((r["method"], r["toxic_count"]), []).append(v)
    head = ["# toxic"] + methods
    body = [[str(n)] + ["/".join(cell.get((m, n), [])) for m in methods] for n in counts]
    widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
    lines = [f"harmful responses out of {denom} held-out toxic prompts (per seed)"]
    lines.append("  ".join(h.rjust(w) for h, w in zip(head, widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------- curve


def over_refusal_curve(checkpoints: list[tuple[str, int, ModelParams]], heldout: HeldOut, training: list[Example] | None = None) -> list[dict]:
    """Safety level against over-refusal for each ``(series, step, params)`` checkpoint."""
    per_series: dict[str, int] = {}
    for series, _, _ in checkpoints:
        per_series[series] = per_series.get(series, 0) + 1
    if not checkpoints or min(per_series.values()) < 5:
        raise ContractError("each series needs at least 5 checkpoints")
    points = []
    for series, step, params in checkpoints:
        rep = evaluate(params, heldout, training=training)
        points.append({
            "series": series, "step": step,
            "safety_level": 1.0 - rep.harmful_rate, "over_refusal": rep.over_refusal_rate,
            "harmful_rate": rep.harmful_rate, "safe_exact_match": rep.safe_task_exact_match,
            "seemingly_toxic_exact_match": rep.seemingly_toxic_exact_match,
        })
    return points


def curve_checkpoints(cfg: TrainConfig, data: list[Example], base: ModelParams, methods=None, n_points: int = 6) -> list[tuple[str, int, ModelParams]]:
    """Train each method once and keep ``n_points`` evenly spaced snapshots (step 0 included)."""
    methods = methods or (cfg.method, "STL")
    every = max(1, cfg.steps // (n_points - 1))
    out = []
    for method in dict.fromkeys(methods):
        run = dataclasses.replace(cfg, method=method, eval_every=every)
        res = train(run, data, init=base, keep_snapshots=True)
        out += [(method, step, p) for step, p in res.snapshots]
    return out


def curve_csv(points: list[dict]) -> str:
    return _csv(CURVE_COLUMNS, points)


# ------------------------------------------------------------- contrastive


def contrastive_experiment(cfg: TrainConfig, spec: DatasetSpec, base: ModelParams | None = None) -> dict[str, tuple[int, EvalReport]]:
    """Two identical fine-tunes except that the augmented arm adds seemingly-toxic samples."""
    if spec.contrastive_count <= 0:
        raise ContractError("the augmented arm needs contrastive_count > 0")
    plain = build_dataset(dataclasses.replace(spec, contrastive_count=0))
    augmented = build_dataset(spec)
    base = base if base is not None else base_for(cfg)
    heldout = default_heldout(spec.seed, augmented)
    out = {}
    for arm, data in (("base", plain), ("augmented", augmented)):
        res = train(cfg, data, init=base)
        rep = evaluate(res.params, heldout, training=data)
        log.info("%s arm: %d examples, degeneracy %.4f", arm, len(data), rep.degeneracy)
        out[arm] = (len(data), rep)
    return out


def contrastive_csv(result: dict[str, tuple[int, EvalReport]]) -> str:
    rows = [{"arm": arm, "dataset_size": n, **rep.as_dict()} for arm, (n, rep) in result.items()]
    return _csv(CONTRASTIVE_COLUMNS, rows)


# ------------------------------------------------------------------- bound


def verify_bound(instances: int, vocab_size: int, seed: int, dim: int = 16) -> list[dict]:
    """Exact EMD against the mean-embedding bound on random instances."""
    rng = np.random.default_rng([seed, vocab_size])
    rows = []
    for k in range(instances):
        p, q, emb = random_instance(rng, vocab_size, dim)
        c = cost_matrix(emb)
        t0 = time.perf_counter_ns()
        value = exact_emd(p, q, c).value
        elapsed = time.perf_counter_ns() - t0
        lb = emd_lower_bound(p, q, emb)
        rows.append({"instance_id": k, "vocab_size": vocab_size, "exact_emd": value, "lower_bound": lb,
                     "gap": value - lb, "solve_time_ns": elapsed})
    return rows


def bound_csv(rows: list[dict], timings: bool = True) -> str:
    """``timings=False`` blanks the wall-clock column so the file is reproducible byte for byte."""
    if not timings:
        rows = [{**r, "solve_time_ns": ""} for r in rows]
    return _csv(BOUND_COLUMNS, rows)
