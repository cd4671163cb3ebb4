"""Fine-tuning objectives: response NLL, the embedding-space EMD lower-bound penalty,
the complementary-likelihood penalty, and their mixed-batch combination.

All losses average over examples (not tokens) and score response positions only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import PAD, Example
from .diffengine import Node, Tape
from .errors import ContractError
from .model import ModelParams, bind, logits

log = logging.getLogger(__name__)

NLCL_CLAMP = 1e-6
PENALTIES = ("EMD", "NLCL")


@dataclass
class Packed:
    """A batch laid out for one forward pass.

    ``labels[b, t]`` is the token following position ``t`` of sequence ``b``;
    ``mask`` selects the positions whose label is a response token.
    """

    block: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    n_examples: int

    @property
    def rows(self) -> np.ndarray:
        return np.flatnonzero(self.mask.ravel())

    @property
    def targets(self) -> np.ndarray:
        return self.labels.ravel()[self.rows]

    @property
    def example_of_row(self) -> np.ndarray:
        return self.rows // self.block.shape[1]

    @property
    def response_lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def pack(examples: list[Example]) -> Packed:
    if not examples:
        raise ContractError("empty batch")
    seqs = []
    for ex in examples:
        if not ex.response:
            raise ContractError("example with empty response")
        seqs.append(list(ex.prompt) + list(ex.response))
    L = max(len(s) for s in seqs) - 1
    block = np.full((len(seqs), L), PAD, dtype=np.intp)
    labels = np.full((len(seqs), L), PAD, dtype=np.intp)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for b, (ex, s) in enumerate(zip(examples, seqs)):
        n = len(s) - 1
        block[b, :n] = s[:-1]
        labels[b, :n] = s[1:]
        mask[b, len(ex.prompt) - 1 : n] = True
    return Packed(block, labels, mask, len(examples))


class TapeModel:
    """Model parameters bound as leaves on one tape."""

    def __init__(self, params: ModelParams, tape: Tape | None = None, trainable: bool = True):
        self.params = params
        self.tape = tape if tape is not None else Tape(np.float64)
        self.w = bind(self.tape, params, trainable=trainable)

    def response_logits(self, packed: Packed) -> Node:
        lg = logits(self.tape, self.params.config, self.w, packed.block)
        return self.tape.gather_rows(lg, packed.rows)

    def unit_embeddings(self) -> np.ndarray:
        raw = self.params["tok_emb"]
        return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def token_logprobs(m: TapeModel, packed: Packed) -> Node:
    t = m.tape
    logsm = t.log_softmax_rows(m.response_logits(packed))
    onehot = np.zeros(logsm.shape)
    onehot[np.arange(onehot.shape[0]), packed.targets] = 1.0
    return t.sum_rows(t.mul(logsm, t.constant(onehot)))


def sft_loss(m: TapeModel, examples: list[Example]) -> Node:
    """-(1/N) sum_i sum_t log Q(y_it | history)."""
    packed = pack(examples)
    return m.tape.scale(m.tape.sum(token_logprobs(m, packed)), -1.0 / packed.n_examples)


def _emd_sq_gaps(m: TapeModel, packed: Packed) -> Node:
    """Per response position, ||e_y - sum_v Q(v) e_v||^2 with embeddings held constant."""
    t = m.tape
    unit = m.unit_embeddings()
    q = t.softmax_rows(m.response_logits(packed))
    expected = t.matmul(q, t.constant(unit))
    diff = t.sub(t.constant(unit[packed.targets]), expected)
    return t.sum_rows(t.mul(diff, diff))


def emd_loss(m: TapeModel, examples: list[Example]) -> Node:
    """-(1/N) sum_i sum_t ||e_{y_it} - E_Q[e]||^2 (one-hot data distribution)."""
    packed = pack(examples)
    return m.tape.scale(m.tape.sum(_emd_sq_gaps(m, packed)), -1.0 / packed.n_examples)


def emd_token_terms(params: ModelParams, examples: list[Example]) -> np.ndarray:
    """Per-token squared mean-embedding gaps, for inspection and cross-checks."""
    m = TapeModel(params, Tape(np.float64, record=False), trainable=False)
    return _emd_sq_gaps(m, pack(examples)).value[:, 0]


def _sequence_logprob(m: TapeModel, packed: Packed) -> Node:
    """Length-normalised log-probability of each response (N x 1)."""
    tok = token_logprobs(m, packed)
    seg = np.zeros((packed.n_examples, tok.shape[0]))
    lengths = packed.response_lengths
    seg[packed.example_of_row, np.arange(tok.shape[0])] = 1.0 / lengths[packed.example_of_row]
    return m.tape.matmul(m.tape.constant(seg), tok)


def sequence_probability(params: ModelParams, examples: list[Example]) -> np.ndarray:
    """exp of the mean per-token log-probability of each response."""
    m = TapeModel(params, Tape(np.float64, record=False), trainable=False)
    return np.exp(_sequence_logprob(m, pack(examples)).value[:, 0])


def nlcl_loss(m: TapeModel, examples: list[Example]) -> Node:
    """-(1/N) sum_i log(1 - Q(y_i | p_i)), with 1 - Q floored at 1e-6."""
    t = m.tape
    packed = pack(examples)
    p = t.exp(_sequence_logprob(m, packed))
    comp = t.add_scalar(t.scale(p, -1.0), 1.0)
    if (comp.value <= NLCL_CLAMP).any():
        log.info("NLCL clamp hit on %d of %d responses", int((comp.value <= NLCL_CLAMP).sum()), packed.n_examples)
    comp = t.clamp_min(comp, NLCL_CLAMP)
    return t.scale(t.sum(t.log(comp)), -1.0 / packed.n_examples)


# -------------------------------------------------------------- combination


@dataclass
class BatchSplit:
    safe_items: list[Example]
    toxic_items: list[Example]
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")

    @property
    def size(self) -> int:
        return len(self.safe_items) + len(self.toxic_items)


@dataclass
class LossReport:
    sft_value: float
    penalty_value: float
    total_value: float
    sft_tokens: int
    penalty_tokens: int
    total: Node | None = field(default=None, repr=False, compare=False)


def combined_loss(m: TapeModel, split: BatchSplit, penalty: str | None) -> LossReport:
    """SFT loss on the safe sublist plus lambda times the penalty on the toxic sublist.

    An empty sublist contributes exactly 0. ``penalty=None`` means the toxic
    sublist is ignored (callers route everything through ``safe_items``).
    """
    if penalty is not None and penalty not in PENALTIES:
        raise ContractError(f"unknown penalty {penalty!r}")
    toxic = split.toxic_items if penalty is not None else []
    if not split.safe_items and not toxic:
        raise ContractError("both sublists are empty")
    t = m.tape

    sft = sft_loss(m, split.safe_items) if split.safe_items else None
    pen = None
    if toxic:
        pen = (emd_loss if penalty == "EMD" else nlcl_loss)(m, toxic)

    if sft is not None and pen is not None:
        total = t.add(sft, t.scale(pen, split.lam))
    elif sft is not None:
        total = sft
    else:
        total = t.scale(pen, split.lam)

    return LossReport(
        sft_value=float(sft.value[0, 0]) if sft is not None else 0.0,
        penalty_value=float(pen.value[0, 0]) if pen is not None else 0.0,
        total_value=float(total.value[0, 0]),
        sft_tokens=sum(len(e.response) for e in split.safe_items),
        penalty_tokens=sum(len(e.response) for e in toxic),
        total=total,
    )
