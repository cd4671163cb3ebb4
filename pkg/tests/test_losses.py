import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safetune.corpus import DatasetSpec, Example, gen_safe, gen_toxic
from safetune.diffengine import Tape, relative_error
from safetune.errors import ContractError
from safetune.losses import (
    BatchSplit,
    TapeModel,
    _emd_sq_gaps,
    combined_loss,
    emd_loss,
    emd_token_terms,
    nlcl_loss,
    pack,
    sequence_probability,
    sft_loss,
    token_logprobs,
)
from safetune.model import ModelConfig, forward, init_params
from safetune.transport import EmbeddingTable, emd_lower_bound, mean_embedding_gap
from safetune.trainer import AdamState, adam_step, loss_and_grads

TINY = ModelConfig(dim=8, layers=1, heads=2, context_len=16, seed=3, init_std=0.5)


class FixedLogits:
    """Stand-in model whose response logits are a fixed function of the targets."""

    def __init__(self, vocab, fill, emb=None):
        self.tape = Tape()
        self.vocab = vocab
        self.fill = fill
        self.emb = emb

    def response_logits(self, packed):
        return self.tape.leaf(self.fill(packed.targets, self.vocab))

    def unit_embeddings(self):
        return self.emb.unit


def onehot_logits(targets, vocab, shift=0, big=800.0):
    z = np.zeros((len(targets), vocab))
    z[np.arange(len(targets)), (targets + shift) % vocab] = big
    return z


def ex(prompt, response, kind="toxic"):
    return Example(kind, prompt, response)


@pytest.fixture(scope="module")
def params():
    return init_params(TINY)


@pytest.fixture(scope="module")
def batch():
    spec = DatasetSpec(seed=4, n_toxic=5)
    return gen_safe(spec, 4), gen_toxic(spec)


# ------------------------------------------------------------------ packing


def test_pack_layout():
    p = pack([ex((1, 56, 2), (48, 3)), ex((1, 4, 9, 2), (9, 3))])
    assert p.block.tolist() == [[1, 56, 2, 48, 0], [1, 4, 9, 2, 9]]
    assert p.labels.tolist() == [[56, 2, 48, 3, 0], [4, 9, 2, 9, 3]]
    assert p.mask.tolist() == [[False, False, True, True, False], [False, False, False, True, True]]
    assert p.response_lengths.tolist() == [2, 2]


def test_pack_rejects_empty():
    with pytest.raises(ContractError):
        pack([])
    with pytest.raises(ContractError):
        pack([ex((1, 2), ())])


# ------------------------------------------------------------------ SFT


def test_sft_perfect_model_is_zero():
    m = FixedLogits(6, onehot_logits)
    assert sft_loss(m, [ex((1, 2), (4, 5, 3))]).value[0, 0] == 0.0


def test_sft_uniform_model():
    m = FixedLogits(4, lambda t, v: np.zeros((len(t), v)))
    val = sft_loss(m, [ex((1, 2), (0, 1, 3))]).value[0, 0]
    assert val == pytest.approx(3 * math.log(4), abs=1e-12)
    assert round(val, 4) == 4.1589


def naive_sft(params, examples):
    total = 0.0
    for e in examples:
        seq = list(e.prompt) + list(e.response)
        for t in range(len(e.prompt), len(seq)):
            dist = forward(params, seq[:t])[-1]
            total -= math.log(dist[seq[t]])
    return total / len(examples)


def test_sft_matches_naive_loop(params, batch):
    safe, tox = batch
    examples = safe + tox
    got = sft_loss(TapeModel(params), examples).value[0, 0]
    assert abs(got - naive_sft(params, examples)) <= 1e-9


# ------------------------------------------------------------------ EMD


def test_emd_onehot_on_data_token_is_zero():
    emb = EmbeddingTable.from_raw(np.random.default_rng(0).standard_normal((6, 4)))
    m = FixedLogits(6, onehot_logits, emb)
    assert emd_loss(m, [ex((1, 2), (4, 5, 3))]).value[0, 0] == 0.0


def test_emd_onehot_elsewhere_is_twice_cosine_distance():
    emb = EmbeddingTable.from_raw(np.random.default_rng(1).standard_normal((6, 4)))
    m = FixedLogits(6, lambda t, v: onehot_logits(t, v, shift=1), emb)
    y = np.array([4, 5, 3])
    terms = _emd_sq_gaps(m, pack([ex((1, 2), tuple(y))])).value[:, 0]
    dc = 1.0 - (emb.unit[y] * emb.unit[(y + 1) % 6]).sum(axis=1)
    assert np.abs(terms - 2 * dc).max() <= 1e-12


def naive_emd(params, examples):
    unit = params["tok_emb"] / np.linalg.norm(params["tok_emb"], axis=1, keepdims=True)
    total, terms = 0.0, []
    for e in examples:
        seq = list(e.prompt) + list(e.response)
        for t in range(len(e.prompt), len(seq)):
            q = forward(params, seq[:t])[-1]
            expected = np.zeros(unit.shape[1])
            for v in range(len(q)):
                expected += q[v] * unit[v]
            gap = float(((unit[seq[t]] - expected) ** 2).sum())
            terms.append((seq[t], q, gap))
            total -= gap
    return total / len(examples), terms


def test_emd_matches_naive_loop_and_lower_bound(params, batch):
    tox = batch[1]
    expected, terms = naive_emd(params, tox)
    assert abs(emd_loss(TapeModel(params), tox).value[0, 0] - expected) <= 1e-9

    emb = EmbeddingTable.from_raw(params["tok_emb"])
    n = emb.vocab_size
    got = emd_token_terms(params, tox)
    assert len(got) == len(terms)
    for g, (y, q, gap) in zip(got, terms):
        onehot = np.eye(n)[y]
        assert abs(g - gap) <= 1e-9
        assert abs(g - 2 * n * n * emd_lower_bound(onehot, q, emb)) <= 1e-9
        assert 2 * n * n * emd_lower_bound(onehot, q, emb) == mean_embedding_gap(onehot, q, emb)


def test_emd_loss_range(params, batch):
    tox = batch[1]
    total_tokens = sum(len(e.response) for e in tox)
    val = emd_loss(TapeModel(params), tox).value[0, 0]
    assert -4 * total_tokens / len(tox) <= val <= 0


def test_emd_embeddings_are_constants(params, batch):
    """The tok_emb gradient matches finite differences of a loss whose unit embeddings stay frozen."""
    tox = batch[1][:2]
    frozen = TapeModel(params).unit_embeddings()
    m = TapeModel(params)
    grad = m.tape.backward(emd_loss(m, tox))[m.w["tok_emb"]]

    def frozen_loss(p2):
        mm = TapeModel(p2, Tape(record=False), trainable=False)
        mm.unit_embeddings = lambda: frozen
        return emd_loss(mm, tox).value[0, 0]

    h = 1e-5
    for idx in [(tox[0].prompt[1], 0), (tox[0].response[0], 3), (int(batch[0][0].prompt[2]), 5)]:
        up, down = params.copy(), params.copy()
        up.arrays["tok_emb"][idx] += h
        down.arrays["tok_emb"][idx] -= h
        fd = (frozen_loss(up) - frozen_loss(down)) / (2 * h)
        assert relative_error(np.array(grad[idx]), np.array(fd)) <= 1e-6


# ------------------------------------------------------------------ NLCL


def test_nlcl_zero_probability():
    m = FixedLogits(6, lambda t, v: onehot_logits(t, v, shift=1))
    assert nlcl_loss(m, [ex((1, 2), (4, 5, 3))]).value[0, 0] == 0.0


def test_nlcl_half_probability():
    m = FixedLogits(2, lambda t, v: np.zeros((len(t), v)))
    val = nlcl_loss(m, [ex((1, 0), (1, 0, 1))]).value[0, 0]
    assert val == pytest.approx(math.log(2), abs=1e-12)


def test_nlcl_clamp():
    m = FixedLogits(6, onehot_logits)
    val = nlcl_loss(m, [ex((1, 2), (4, 3))]).value[0, 0]
    assert val == pytest.approx(-math.log(1e-6), abs=1e-9)


def orpo_with_unit_winner_odds(params, examples):
    """-log sigmoid(log odds(y_w) - log odds(y_l)) with odds(y_w) = 1, from per-token probabilities."""
    vals = []
    for e in examples:
        seq = list(e.prompt) + list(e.response)
        lp = [math.log(forward(params, seq[:t])[-1][seq[t]]) for t in range(len(e.prompt), len(seq))]
        p = math.exp(sum(lp) / len(lp))
        log_odds_l = math.log(p) - math.log1p(-p)
        vals.append(np.logaddexp(0.0, -(0.0 - log_odds_l)))
    return float(np.mean(vals))


def test_nlcl_equals_orpo_identity(params, batch):
    tox = batch[1]
    got = nlcl_loss(TapeModel(params), tox).value[0, 0]
    assert abs(got - orpo_with_unit_winner_odds(params, tox)) <= 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_nlcl_orpo_identity_random_models(seed):
    cfg = ModelConfig(dim=8, layers=1, heads=2, context_len=16, seed=seed, init_std=1.0)
    prm = init_params(cfg)
    tox = gen_toxic(DatasetSpec(seed=seed, n_toxic=3))
    got = nlcl_loss(TapeModel(prm), tox).value[0, 0]
    assert got >= 0
    assert abs(got - orpo_with_unit_winner_odds(prm, tox)) <= 1e-9


def test_sequence_probability_length_normalised(params, batch):
    tox = batch[1][:1]
    e = tox[0]
    seq = list(e.prompt) + list(e.response)
    lp = [math.log(forward(params, seq[:t])[-1][seq[t]]) for t in range(len(e.prompt), len(seq))]
    assert sequence_probability(params, tox)[0] == pytest.approx(math.exp(np.mean(lp)), rel=1e-12)


# ------------------------------------------------------------------ combination


def _value(fn, params, items):
    return float(fn(TapeModel(params), items).value[0, 0])


def test_combined_lambda_zero(params, batch):
    safe, tox = batch
    rep = combined_loss(TapeModel(params), BatchSplit(safe, tox, 0.0), "EMD")
    assert rep.total_value == rep.sft_value


def test_combined_empty_toxic(params, batch):
    safe = batch[0]
    rep = combined_loss(TapeModel(params), BatchSplit(safe, [], 0.83), "EMD")
    assert rep.penalty_value == 0.0 and rep.penalty_tokens == 0
    assert rep.total_value == rep.sft_value == _value(sft_loss, params, safe)


def test_combined_empty_safe(params, batch):
    tox = batch[1]
    rep = combined_loss(TapeModel(params), BatchSplit([], tox, 2.0), "NLCL")
    assert rep.sft_value == 0.0 and rep.sft_tokens == 0
    assert rep.total_value == 2.0 * _value(nlcl_loss, params, tox)


@pytest.mark.parametrize("penalty,fn", [("EMD", emd_loss), ("NLCL", nlcl_loss)])
def test_combined_recomposes(params, batch, penalty, fn):
    safe, tox = batch
    lam = 0.37
    rep = combined_loss(TapeModel(params), BatchSplit(safe, tox, lam), penalty)
    expected = _value(sft_loss, params, safe) + lam * _value(fn, params, tox)
    assert abs(rep.total_value - expected) <= 1e-12
    assert rep.sft_tokens == sum(len(e.response) for e in safe)
    assert rep.penalty_tokens == sum(len(e.response) for e in tox)


def test_combined_errors(params, batch):
    with pytest.raises(ContractError):
        combined_loss(TapeModel(params), BatchSplit([], [], 1.0), "EMD")
    with pytest.raises(ContractError):
        combined_loss(TapeModel(params), BatchSplit(batch[0], [], 1.0), "KTO")
    with pytest.raises(ContractError):
        BatchSplit([], [], -1.0)


@pytest.mark.parametrize("penalty", ["EMD", "NLCL", None])
def test_combined_gradient_finite_differences(params, batch, penalty):
    safe, tox = batch
    split = BatchSplit(safe[:2], tox[:2], 0.7)
    _, grads = loss_and_grads(params, split, penalty)
    rng = np.random.default_rng(5)
    names = params.names()
    # the embedding constants of the EMD term are held at their base-point value
    frozen = TapeModel(params).unit_embeddings()
    h = 1e-5
    worst = 0.0
    for _ in range(20):
        name = names[int(rng.integers(len(names)))]
        idx = tuple(int(rng.integers(s)) for s in params[name].shape)
        vals = []
        for sign in (1, -1):
            p2 = params.copy()
            p2.arrays[name][idx] += sign * h
            m2 = TapeModel(p2, Tape(record=False), trainable=False)
            m2.unit_embeddings = lambda: frozen
            vals.append(combined_loss(m2, split, penalty).total_value)
        fd = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, relative_error(np.array(grads[name][idx]), np.array(fd)))
    assert worst <= 1e-3


# ------------------------------------------------------------------ probes


@pytest.fixture(scope="module")
def memorised():
    """A tiny model driven to put most of its mass on one toxic response."""
    target = gen_toxic(DatasetSpec(seed=8, n_toxic=1))
    prm = init_params(ModelConfig(dim=8, layers=1, heads=2, context_len=16, seed=1))
    state = AdamState.zeros(prm)
    for _ in range(300):
        _, g = loss_and_grads(prm, BatchSplit(target, [], 0.0), None)
        prm, state = adam_step(prm, g, state, 1e-2)
    assert sequence_probability(prm, target)[0] > 0.9
    return prm, target


def _token_probs(params, examples):
    m = TapeModel(params, Tape(record=False), trainable=False)
    return np.exp(token_logprobs(m, pack(examples)).value[:, 0])


def _sgd(params, grads, lr):
    out = params.copy()
    for k in out.arrays:
        out.arrays[k] -= lr * grads[k]
    return out


def test_emd_step_lowers_data_token_probability(memorised):
    prm, target = memorised
    _, g = loss_and_grads(prm, BatchSplit([], target, 1.0), "EMD")
    after = _sgd(prm, g, 1e-3)
    assert _token_probs(after, target).sum() < _token_probs(prm, target).sum()


def test_nlcl_step_lowers_sequence_probability(memorised):
    prm, target = memorised
    _, g = loss_and_grads(prm, BatchSplit([], target, 1.0), "NLCL")
    after = _sgd(prm, g, 1e-3)
    assert sequence_probability(after, target)[0] < sequence_probability(prm, target)[0]


# ------------------------------------------------------------------ masking


def test_prompt_targets_do_not_affect_losses(params, batch):
    tox = batch[1]
    packed = pack(tox)
    rng = np.random.default_rng(2)
    altered = pack(tox)
    altered.labels[~altered.mask] = rng.integers(0, 64, size=int((~altered.mask).sum()))
    for fn in (token_logprobs, _emd_sq_gaps):
        a = fn(TapeModel(params, Tape(record=False)), packed).value
        b = fn(TapeModel(params, Tape(record=False)), altered).value
        assert np.array_equal(a, b)
