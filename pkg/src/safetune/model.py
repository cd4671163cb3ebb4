"""A small pre-LayerNorm decoder-only transformer built on the tape."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffengine import Node, Tape
from .errors import ContractError, ParseError
from .transport import EmbeddingTable

CHECKPOINT_FORMAT = "safetune-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    dim: int = 64
    layers: int = 2
    heads: int = 2
    context_len: int = 32
    seed: int = 0
    ffn_mult: int = 4
    init_std: float = 0.05

    def __post_init__(self):
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    d, h = cfg.dim, cfg.dim * cfg.ffn_mult
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.context_len, d)}
    for layer in range(cfg.layers):
        p = f"l{layer}."
        shapes.update(
            {
                p + "ln1_g": (1, d),
                p + "ln1_b": (1, d),
                p + "wq": (d, d),
                p + "wk": (d, d),
                p + "wv": (d, d),
                p + "wo": (d, d),
                p + "ln2_g": (1, d),
                p + "ln2_b": (1, d),
                p + "w1": (d, h),
                p + "b1": (1, h),
                p + "w2": (h, d),
                p + "b2": (1, d),
            }
        )
    shapes.update({"lnf_g": (1, d), "lnf_b": (1, d), "out_proj": (cfg.vocab_size, d)})
    return shapes


def init_params(cfg: ModelConfig) -> ModelParams:
    """Gaussian(0, init_std) weights, unit LayerNorm gains, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            arrays[name] = np.ones(shape)
        elif leaf.endswith("_b") or leaf in ("b1", "b2"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, cfg.init_std, size=shape)
    return ModelParams(cfg, arrays)


def bind(tape: Tape, params: ModelParams, trainable: bool = True) -> dict[str, Node]:
    return {name: tape.leaf(arr, trainable=trainable) for name, arr in params.arrays.items()}


def logits(tape: Tape, cfg: ModelConfig, w: dict[str, Node], tokens: np.ndarray) -> Node:
    """Next-token logits for a ``B x L`` token block, as a ``(B*L) x vocab`` node.

    Row ``b*L + t`` is the prediction after reading ``tokens[b, :t+1]``.
    """
    tokens = np.asarray(tokens, dtype=np.intp)
    if tokens.ndim != 2:
        raise ContractError("tokens must be a B x L block")
    nb, L = tokens.shape
    if L > cfg.context_len:
        raise ContractError(f"sequence length {L} exceeds context_len {cfg.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ContractError("token id out of range")

    x = tape.add(tape.gather_rows(w["tok_emb"], tokens.ravel()), tape.gather_rows(w["pos_emb"], np.tile(np.arange(L), nb)))
    for layer in range(cfg.layers):
        p = f"l{layer}."
        h = tape.layer_norm_rows(x, w[p + "ln1_g"], w[p + "ln1_b"])
        att = tape.causal_attention(
            tape.matmul(h, w[p + "wq"]), tape.matmul(h, w[p + "wk"]), tape.matmul(h, w[p + "wv"]), L, cfg.heads
        )
        x = tape.add(x, tape.matmul(att, w[p + "wo"]))
        h = tape.layer_norm_rows(x, w[p + "ln2_g"], w[p + "ln2_b"])
        h = tape.relu(tape.add(tape.matmul(h, w[p + "w1"]), w[p + "b1"]))
        x = tape.add(x, tape.add(tape.matmul(h, w[p + "w2"]), w[p + "b2"]))
    h = tape.layer_norm_rows(x, w["lnf_g"], w["lnf_b"])
    return tape.matmul(h, tape.transpose(w["out_proj"]))


def forward(params: ModelParams, tokens) -> np.ndarray:
    """Next-token distributions for every position of one sequence (``T x vocab``)."""
    tokens = np.asarray(tokens, dtype=np.intp)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ContractError("forward expects a non-empty 1-D token sequence")
    tape = Tape(np.float64, record=False)
    out = tape.softmax_rows(logits(tape, params.config, bind(tape, params, trainable=False), tokens[None, :]))
    return out.value


def pad_block(seqs: list[list[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad sequences into a block; returns (block, lengths)."""
    lengths = np.array([len(s) for s in seqs], dtype=np.intp)
    block = np.full((len(seqs), int(lengths.max())), pad, dtype=np.intp)
    for b, s in enumerate(seqs):
        block[b, : len(s)] = s
    return block, lengths


def greedy_decode_batch(params: ModelParams, prompts: list[list[int]], max_len: int, eos: int, pad: int | None = None) -> list[list[int]]:
    """Argmax continuation of each prompt until ``eos`` or ``max_len`` new tokens.

    Ties go to the lowest token id. Sequences are right-padded, which causal
    attention makes invisible to the real positions.
    """
    cfg = params.config
    pad = eos if pad is None else pad
    seqs = [list(p) for p in prompts]
    if any(len(s) > cfg.context_len for s in seqs):
        raise ContractError("prompt longer than context_len")
    outs: list[list[int]] = [[] for _ in seqs]
    live = [i for i in range(len(seqs)) if max_len > 0]
    tape = Tape(np.float64, record=False)
    w = bind(tape, params, trainable=False)
    while live:
        live = [i for i in live if len(seqs[i]) < cfg.context_len]
        if not live:
            break
        block, lengths = pad_block([seqs[i] for i in live], pad)
        lg = logits(tape, cfg, w, block).value
        L = block.shape[1]
        rows = np.arange(len(live)) * L + lengths - 1
        nxt = lg[rows].argmax(axis=1)
        still = []
        for i, tok in zip(live, nxt.tolist()):
            seqs[i].append(tok)
            outs[i].append(tok)
            if tok != eos and len(outs[i]) < max_len:
                still.append(i)
        live = still
    return outs


def greedy_decode(params: ModelParams, prompt: list[int], max_len: int, eos: int) -> list[int]:
    return greedy_decode_batch(params, [prompt], max_len, eos)[0]


def embedding_view(params: ModelParams) -> EmbeddingTable:
    """Unit-normalised input embeddings, recomputed from the current raw rows."""
    return EmbeddingTable.from_raw(params["tok_emb"])


# --------------------------------------------------------------- checkpoints


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "extra": extra or {},
        "params": {
            name: {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]} for name, arr in params.arrays.items()
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not a JSON checkpoint ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint format {doc.get('format')!r} v{doc.get('version')!r}")
    cfg = ModelConfig(**doc["config"])
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        entry = doc["params"].get(name)
        if entry is None or tuple(entry["shape"]) != shape:
            raise ParseError(f"{path}: parameter {name} missing or misshapen")
        arrays[name] = np.array(entry["data"], dtype=np.float64).reshape(shape)
    return ModelParams(cfg, arrays)
