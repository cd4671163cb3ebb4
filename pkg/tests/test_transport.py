import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safetune.errors import ContractError
from safetune.transport import (
    EmbeddingTable,
    cosine_distance,
    cost_matrix,
    dense_lp_emd,
    emd_lower_bound,
    exact_emd,
    mean_embedding,
    mean_embedding_gap,
    random_distribution,
    random_instance,
    random_unit_vectors,
)


def brute_force_emd(p, q, c):
    # general-purpose simplex over all |V|^2 coupling entries
    return dense_lp_emd(p, q, c).value


def test_cosine_distance_fixed_cases():
    u = np.array([1.0, 0.0])
    assert cosine_distance(u, u) == 0.0
    assert cosine_distance(u, np.array([0.0, 1.0])) == 1.0
    assert cosine_distance(u, -u) == 2.0


def test_cosine_distance_rejects_non_unit():
    with pytest.raises(ContractError):
        cosine_distance(np.array([2.0, 0.0]), np.array([1.0, 0.0]))


def test_cosine_half_squared_distance():
    rng = np.random.default_rng(0)
    u, v = random_unit_vectors(rng, 500, 7), random_unit_vectors(rng, 500, 7)
    a = np.array([cosine_distance(x, y) for x, y in zip(u, v)])
    b = ((u - v) ** 2).sum(axis=1) / 2
    assert np.abs(a - b).max() <= 1e-12


def test_cost_matrix_antipodal():
    emb = EmbeddingTable.from_raw([[1.0, 0.0], [-3.0, 0.0]])
    assert cost_matrix(emb).tolist() == [[0.0, 2.0], [2.0, 0.0]]


def test_cost_matrix_matches_dual_formula():
    rng = np.random.default_rng(1)
    emb = EmbeddingTable.from_raw(rng.standard_normal((16, 5)))
    c = cost_matrix(emb)
    assert np.array_equal(c, c.T)
    assert np.all(np.diag(c) == 0)
    assert c.min() >= 0 and c.max() <= 2
    u = emb.unit
    half_sq = ((u[:, None, :] - u[None, :, :]) ** 2).sum(axis=2) / 2
    assert np.abs(c - half_sq).max() <= 1e-12


def test_embedding_table_rejects_zero_row():
    with pytest.raises(ContractError):
        EmbeddingTable.from_raw([[1.0, 0.0], [0.0, 0.0]])


def test_emd_identity_transport():
    rng = np.random.default_rng(2)
    p, _, emb = random_instance(rng, 8)
    res = exact_emd(p, p, cost_matrix(emb))
    assert abs(res.value) <= 1e-12
    assert np.abs(res.plan - np.diag(p)).max() <= 1e-12


def test_emd_point_masses():
    rng = np.random.default_rng(3)
    emb = EmbeddingTable.from_raw(rng.standard_normal((6, 4)))
    c = cost_matrix(emb)
    p, q = np.eye(6)[1], np.eye(6)[4]
    res = exact_emd(p, q, c)
    assert res.value == pytest.approx(c[1, 4], abs=1e-12)
    assert res.plan[1, 4] == pytest.approx(1.0, abs=1e-12)
    assert np.count_nonzero(np.abs(res.plan) > 1e-12) == 1


def test_emd_matches_dense_lp_at_eight():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p, q, emb = random_instance(rng, 8)
        c = cost_matrix(emb)
        assert abs(exact_emd(p, q, c).value - brute_force_emd(p, q, c)) <= 1e-8


def test_emd_rejects_bad_distribution():
    c = np.zeros((3, 3))
    with pytest.raises(ContractError):
        exact_emd([0.5, 0.5, 0.5], [1.0, 0.0, 0.0], c)
    with pytest.raises(ContractError):
        exact_emd([1.0, 0.0], [1.0, 0.0, 0.0], c)


def test_lower_bound_two_token_closed_form():
    emb = EmbeddingTable.from_raw([[0.6, 0.8], [-0.6, -0.8]])
    p, q = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert emd_lower_bound(p, q, emb) == pytest.approx(0.5, abs=1e-12)
    assert exact_emd(p, q, cost_matrix(emb)).value == pytest.approx(2.0, abs=1e-12)


def test_lower_bound_zero_for_equal():
    rng = np.random.default_rng(5)
    p, _, emb = random_instance(rng, 10)
    assert emd_lower_bound(p, p, emb) == 0.0


def test_mean_embedding_cases():
    emb = EmbeddingTable.from_raw([[2.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
    assert np.array_equal(mean_embedding([0.0, 0.0, 1.0], emb), [0.0, 1.0])
    assert np.abs(mean_embedding([0.5, 0.5, 0.0], emb)).max() == 0.0
    rng = np.random.default_rng(6)
    d, _, big = random_instance(rng, 12, dim=5)
    naive = np.zeros(5)
    for w in range(12):
        naive += d[w] * big.raw[w] / np.sqrt(sum(x * x for x in big.raw[w]))
    assert np.abs(mean_embedding(d, big) - naive).max() <= 1e-12
    assert np.linalg.norm(mean_embedding(d, big)) <= 1 + 1e-12


def test_gap_and_bound_differ_by_constant():
    rng = np.random.default_rng(7)
    p, q, emb = random_instance(rng, 9)
    assert emd_lower_bound(p, q, emb) == mean_embedding_gap(p, q, emb) / (2 * 81)


def test_degenerate_and_sparse_instances():
    # many zero-mass tokens and ties in cost stress the pivoting rule
    rng = np.random.default_rng(8)
    emb = EmbeddingTable.from_raw(np.repeat(rng.standard_normal((4, 3)), 4, axis=0))
    c = cost_matrix(emb)
    for _ in range(30):
        p = random_distribution(rng, 16, zero_frac=0.7)
        q = random_distribution(rng, 16, zero_frac=0.7)
        res = exact_emd(p, q, c)
        assert abs(res.value - brute_force_emd(p, q, c)) <= 1e-8


sizes = st.sampled_from([2, 3, 5, 8, 13, 16])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), sizes)
def test_solver_properties(seed, n):
    rng = np.random.default_rng(seed)
    p, q, emb = random_instance(rng, n, dim=int(rng.integers(2, 9)))
    c = cost_matrix(emb)
    fwd = exact_emd(p, q, c)
    back = exact_emd(q, p, c)
    assert np.abs(fwd.plan.sum(axis=1) - p).max() <= 1e-8
    assert np.abs(fwd.plan.sum(axis=0) - q).max() <= 1e-8
    assert fwd.plan.min() >= -1e-12
    assert -1e-12 <= fwd.value <= 2 + 1e-12
    assert abs(fwd.value - back.value) <= 1e-9
    assert abs(fwd.value - dense_lp_emd(p, q, c).value) <= 1e-8
    assert emd_lower_bound(p, q, emb) <= fwd.value + 1e-9
    assert abs(exact_emd(p, p, c).value) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([32, 64]))
def test_bound_dominance_large(seed, n):
    rng = np.random.default_rng(seed)
    p, q, emb = random_instance(rng, n)
    assert emd_lower_bound(p, q, emb) <= exact_emd(p, q, cost_matrix(emb)).value + 1e-9
