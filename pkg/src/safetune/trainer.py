"""Deterministic mini-batch training with mixed safe/toxic batches."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import EOS, REFUSE, Example, HeldOut, gen_base_corpus, heldout_sets
from .diffengine import Tape
from .errors import ContractError, NonFiniteError, ParseError
from .losses import BatchSplit, LossReport, TapeModel, combined_loss
from .model import ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METHODS = ("SFT", "EMD", "NLCL", "STL")
METRIC_COLUMNS = ("step", "sft_loss", "penalty", "harmful_rate", "safe_accuracy", "seemingly_toxic_accuracy")

# Penalty weight per toxic-example count. On the default model lambda=1 already
# drives held-out harmful responses to zero at 20 and at 2 toxic examples, so the
# table is flat. scripts/tune_lambda.py reruns the grid for other model sizes.
DEFAULT_LAMBDA = {
    "EMD": {20: 1.0, 10: 1.0, 6: 1.0, 2: 1.0},
    "NLCL": {20: 1.0, 10: 1.0, 6: 1.0, 2: 1.0},
}


def default_lambda(method: str, n_toxic: int) -> float:
    if method not in DEFAULT_LAMBDA:
        return 0.0
    table = DEFAULT_LAMBDA[method]
    nearest = min(table, key=lambda k: (abs(k - n_toxic), k))
    return table[nearest]


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


@dataclass
class TrainConfig:
    method: str = "EMD"
    lam: float | None = None
    batch_size: int = 32
    learning_rate: float = 1e-3
    steps: int = 2000
    seed: int = 0
    eval_every: int = 250
    base_steps: int = 600
    base_checkpoint: str | None = None
    dtype: str = "float32"
    grad_clip: float = 1.0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.lam is not None and self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ContractError("dtype must be float32 or float64")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 1:
            raise ContractError("batch_size and eval_every must be >= 1, steps >= 0")

    def resolved_lambda(self, n_toxic: int) -> float:
        if self.method in ("SFT", "STL"):
            return 0.0
        return default_lambda(self.method, n_toxic) if self.lam is None else float(self.lam)


# ------------------------------------------------------------ config files


def config_to_dict(cfg: TrainConfig) -> dict[str, object]:
    flat = {}
    for f in dataclasses.fields(cfg):
        if f.name == "model":
            for mf in dataclasses.fields(cfg.model):
                flat[f"model.{mf.name}"] = getattr(cfg.model, mf.name)
        else:
            flat[f.name] = getattr(cfg, f.name)
    return flat


def _coerce(value: str, like):
    if value in ("None", ""):
        return None
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


_FLOAT_OR_NONE = {"lam"}
_STR_OR_NONE = {"base_checkpoint"}


def config_from_dict(values: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Apply string overrides (``key -> value``) on top of ``base``."""
    base = base or TrainConfig()
    top = {f.name: getattr(base, f.name) for f in dataclasses.fields(base) if f.name != "model"}
    mod = dataclasses.asdict(base.model)
    for key, raw in values.items():
        raw = str(raw).strip()
        if key.startswith("model."):
            name = key[len("model.") :]
            if name not in mod:
                raise ParseError(f"unknown config key {key!r}")
            mod[name] = _coerce(raw, mod[name])
        elif key in _FLOAT_OR_NONE:
            top[key] = None if raw in ("None", "") else float(raw)
        elif key in _STR_OR_NONE:
            top[key] = None if raw in ("None", "") else raw
        elif key in top:
            top[key] = _coerce(raw, top[key])
        else:
            raise ParseError(f"unknown config key {key!r}")
    return TrainConfig(**top, model=ModelConfig(**mod))


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}: line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_kv(values: dict[str, object]) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


# --------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()}, {k: np.zeros_like(a) for k, a in params.arrays.items()})


EMB_MIN_NORM = 1e-6
EMB_RESCUE_NORM = 1e-3


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam update, in place. Embedding rows that collapse below
    1e-6 in norm are rescaled to 1e-3 so their unit view stays defined."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        if g.shape != params.arrays[name].shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.arrays[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if "tok_emb" in params.arrays:
        emb = params.arrays["tok_emb"]
        norms = np.linalg.norm(emb, axis=1)
        small = norms < EMB_MIN_NORM
        if small.any():
            for r in np.flatnonzero(small):
                emb[r] = emb[r] / norms[r] * EMB_RESCUE_NORM if norms[r] > 0 else EMB_RESCUE_NORM / np.sqrt(emb.shape[1])
    return params, state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# ---------------------------------------------------------------- sampling


def sample_batch(dataset: list[Example], batch_size: int, rng: np.random.Generator, lam: float = 0.0) -> BatchSplit:
    """Uniform draw without replacement, split by kind (toxic vs everything else)."""
    if not dataset:
        raise ContractError("empty dataset")
    if batch_size > len(dataset):
        raise ContractError(f"batch size {batch_size} exceeds dataset size {len(dataset)}")
    idx = rng.choice(len(dataset), size=batch_size, replace=False)
    items = [dataset[i] for i in idx]
    return BatchSplit([e for e in items if e.kind != "toxic"], [e for e in items if e.kind == "toxic"], lam)


def stl_rewrite(dataset: list[Example]) -> list[Example]:
    """Replace every toxic response with a fixed refusal."""
    return [Example(e.kind, e.prompt, (REFUSE, EOS)) if e.kind == "toxic" else e for e in dataset]


def route(split: BatchSplit, method: str) -> tuple[BatchSplit, str | None]:
    """SFT and STL put every example under the NLL term; EMD/NLCL penalise toxic items."""
    if method in ("SFT", "STL"):
        return BatchSplit(split.safe_items + split.toxic_items, [], 0.0), None
    return split, method


# ------------------------------------------------------------------- train


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[dict]
    snapshots: list[tuple[int, ModelParams]] = field(default_factory=list)
    lam: float = 0.0


def loss_and_grads(params: ModelParams, split: BatchSplit, penalty: str | None, dtype=np.float64) -> tuple[LossReport, dict[str, np.ndarray]]:
    m = TapeModel(params, Tape(dtype))
    report = combined_loss(m, split, penalty)
    grads = m.tape.backward(report.total)
    return report, {name: grads[node] for name, node in m.w.items()}


def metrics_row(step: int, report: LossReport, params: ModelParams, heldout: HeldOut | None) -> dict:
    row = {"step": step, "sft_loss": report.sft_value, "penalty": report.penalty_value}
    if heldout is not None:
        from .evalsuite.metrics import evaluate

        ev = evaluate(params, heldout)
        row.update(
            harmful_rate=ev.harmful_rate,
            safe_accuracy=ev.safe_task_exact_match,
            seemingly_toxic_accuracy=ev.seemingly_toxic_exact_match,
        )
    else:
        row.update(harmful_rate="", safe_accuracy="", seemingly_toxic_accuracy="")
    return row


def initial_params(cfg: TrainConfig) -> ModelParams:
    if cfg.base_checkpoint:
        params = load_checkpoint(cfg.base_checkpoint)
        if params.config.vocab_size != cfg.model.vocab_size or params.config.dim != cfg.model.dim:
            raise ContractError("base checkpoint does not match the model config")
        return params
    return init_params(dataclasses.replace(cfg.model, seed=cfg.seed))


def train(
    cfg: TrainConfig,
    dataset: list[Example],
    heldout: HeldOut | None = None,
    init: ModelParams | None = None,
    keep_snapshots: bool = False,
) -> TrainResult:
    """Run ``cfg.steps`` Adam steps. A metrics row is logged after every
    ``eval_every`` steps (and at step 0 and the final step); each row's losses are
    measured on a fresh batch at the parameters of that step."""
    if cfg.method == "STL":
        dataset = stl_rewrite(dataset)
    n_toxic = sum(e.kind == "toxic" for e in dataset)
    lam = cfg.resolved_lambda(n_toxic)
    params = (init.copy() if init is not None else initial_params(cfg))
    state = AdamState.zeros(params)
    rng = np.random.default_rng([cfg.seed, 101])
    metrics: list[dict] = []
    snapshots: list[tuple[int, ModelParams]] = []

    for step in range(cfg.steps + 1):
        split, penalty = route(sample_batch(dataset, cfg.batch_size, rng, lam), cfg.method)
        try:
            report, grads = loss_and_grads(params, split, penalty, cfg.dtype)
        except NonFiniteError as exc:
            raise TrainingAborted(step, str(exc)) from exc
        if not np.isfinite(report.total_value):
            raise TrainingAborted(step, f"non-finite loss {report.total_value!r}")
        if step % cfg.eval_every == 0 or step == cfg.steps:
            metrics.append(metrics_row(step, report, params, heldout))
            if keep_snapshots:
                snapshots.append((step, params.copy()))
            log.info("step %d %s", step, metrics[-1])
        if step == cfg.steps:
            break
        if cfg.grad_clip > 0:
            clip_grad_norm(grads, cfg.grad_clip)
        adam_step(params, grads, state, cfg.learning_rate)
    return TrainResult(params, metrics, snapshots, lam)


def pretrain_base(seed: int, model: ModelConfig | None = None, steps: int = 600, lr: float = 1e-3, batch_size: int = 32) -> ModelParams:
    """The unsafe base model: plain NLL on trigger->toxic text plus untasked content text."""
    model = model or ModelConfig()
    cfg = TrainConfig(method="SFT", steps=steps, seed=seed, learning_rate=lr, batch_size=batch_size, eval_every=max(steps, 1), model=model)
    return train(cfg, gen_base_corpus(seed), heldout=None).params


def base_for(cfg: TrainConfig, cache_dir: Path | None = None) -> ModelParams:
    """Load ``cfg.base_checkpoint`` or pre-train (and optionally cache) a base model."""
    if cfg.base_checkpoint:
        return load_checkpoint(cfg.base_checkpoint)
    if cfg.base_steps <= 0:
        return init_params(dataclasses.replace(cfg.model, seed=cfg.seed))
    path = None
    if cache_dir is not None:
        key = json.dumps([dataclasses.asdict(dataclasses.replace(cfg.model, seed=cfg.seed)), cfg.base_steps], sort_keys=True)
        path = Path(cache_dir) / f"base_{hashlib.sha256(key.encode()).hexdigest()[:16]}.json"
        if path.exists():
            return load_checkpoint(path)
    params = pretrain_base(cfg.seed, dataclasses.replace(cfg.model, seed=cfg.seed), steps=cfg.base_steps)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, path)
    return params


def default_heldout(seed: int, dataset: list[Example]) -> HeldOut:
    return heldout_sets(seed, exclude=list(dataset) + gen_base_corpus(seed))


# ------------------------------------------------------------------ output


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()
