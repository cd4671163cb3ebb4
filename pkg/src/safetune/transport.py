"""Exact discrete optimal transport under the cosine cost, and its mean-embedding lower bound.

The exact solver treats EMD between two distributions over a vocabulary as a
transportation problem and runs the network simplex (u-v / MODI pivoting on a
spanning-tree basis) starting from Vogel's approximation. ``dense_lp_emd``
solves the same LP with a general-purpose simplex over all |V|^2 coupling
entries and is kept only as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractError, SolverError

UNIT_TOL = 1e-9
DIST_TOL = 1e-9
OPT_TOL = 1e-9
FEAS_TOL = 1e-8
PERTURB_EPS = 1e-12


@dataclass(frozen=True)
class EmbeddingTable:
    """Raw token embeddings and their unit-normalised copies (one row per token)."""

    raw: np.ndarray
    unit: np.ndarray

    @classmethod
    def from_raw(cls, raw) -> "EmbeddingTable":
        raw = np.array(raw, dtype=np.float64, copy=True)
        if raw.ndim != 2:
            raise ContractError(f"embedding table must be 2-D, got {raw.shape}")
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if (norms == 0).any():
            bad = np.flatnonzero(norms[:, 0] == 0).tolist()
            raise ContractError(f"zero embedding rows: {bad}")
        return cls(raw=raw, unit=raw / norms)

    @property
    def vocab_size(self) -> int:
        return self.raw.shape[0]

    @property
    def dim(self) -> int:
        return self.raw.shape[1]


class EMDResult(NamedTuple):
    value: float
    plan: np.ndarray
    iterations: int


def check_distribution(p, size: int | None = None) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ContractError(f"distribution must be 1-D, got shape {p.shape}")
    if size is not None and p.shape[0] != size:
        raise ContractError(f"distribution has length {p.shape[0]}, expected {size}")
    if (p < 0).any() or not np.isfinite(p).all():
        raise ContractError("distribution has negative or non-finite entries")
    if abs(p.sum() - 1.0) > DIST_TOL:
        raise ContractError(f"distribution sums to {p.sum()!r}")
    return p


def random_unit_vectors(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_distribution(rng: np.random.Generator, n: int, zero_frac: float = 0.25) -> np.ndarray:
    """Dirichlet(1) draw with roughly ``zero_frac`` of the entries zeroed (at least one kept)."""
    p = rng.dirichlet(np.ones(n))
    drop = rng.random(n) < zero_frac
    drop[int(rng.integers(n))] = False
    p[drop] = 0.0
    return p / p.sum()


def random_instance(rng: np.random.Generator, vocab_size: int, dim: int = 16):
    """A random (p, q, embedding table) triple for bound and solver checks."""
    emb = EmbeddingTable.from_raw(rng.standard_normal((vocab_size, dim)))
    return random_distribution(rng, vocab_size), random_distribution(rng, vocab_size), emb


def cosine_distance(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(u) - 1.0) > UNIT_TOL or abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
        raise ContractError("cosine_distance expects unit vectors")
    return float(min(2.0, max(0.0, 1.0 - u @ v)))


def cost_matrix(emb: EmbeddingTable) -> np.ndarray:
    """Pairwise cosine distances between unit embeddings; exactly symmetric, zero diagonal."""
    c = 1.0 - emb.unit @ emb.unit.T
    c = np.triu(c, 1)
    c = c + c.T
    return np.clip(c, 0.0, 2.0)


def mean_embedding(d, emb: EmbeddingTable) -> np.ndarray:
    d = check_distribution(d, emb.vocab_size)
    return d @ emb.unit


def mean_embedding_gap(p, q, emb: EmbeddingTable) -> float:
    """||sum_w p(w) e_w - sum_w q(w) e_w||^2 without the 1/(2|V|^2) factor."""
    diff = mean_embedding(p, emb) - mean_embedding(q, emb)
    return float(diff @ diff)


def emd_lower_bound(p, q, emb: EmbeddingTable) -> float:
    """Lower bound on EMD(p, q; cosine) from the gap between mean unit embeddings."""
    n = emb.vocab_size
    return mean_embedding_gap(p, q, emb) / (2.0 * n * n)


# ------------------------------------------------------------- exact solver


def _vogel(p: np.ndarray, q: np.ndarray, c: np.ndarray):
    """Vogel's approximation: m+n-1 basic cells forming a spanning tree."""
    m, n = c.shape
    s, d = p.copy(), q.copy()
    row_on = np.ones(m, dtype=bool)
    col_on = np.ones(n, dtype=bool)
    cells: list[tuple[int, int]] = []
    flows: list[float] = []
    while True:
        rows = np.flatnonzero(row_on)
        cols = np.flatnonzero(col_on)
        if len(rows) == 1:
            i = int(rows[0])
            for j in cols:
                cells.append((i, int(j)))
                flows.append(float(d[j]))
            break
        if len(cols) == 1:
            j = int(cols[0])
            for i in rows:
                cells.append((int(i), j))
                flows.append(float(s[i]))
            break
        sub = c[np.ix_(rows, cols)]
        two_r = np.partition(sub, 1, axis=1)
        pen_r = two_r[:, 1] - two_r[:, 0]
        two_c = np.partition(sub, 1, axis=0)
        pen_c = two_c[1] - two_c[0]
        ar, ac = int(pen_r.argmax()), int(pen_c.argmax())
        if pen_r[ar] >= pen_c[ac]:
            i, j = int(rows[ar]), int(cols[int(sub[ar].argmin())])
        else:
            i, j = int(rows[int(sub[:, ac].argmin())]), int(cols[ac])
        x = min(s[i], d[j])
        cells.append((i, j))
        flows.append(float(x))
        if s[i] <= d[j]:
            # both exhausted: retire the row only, the column keeps a zero-mass basic cell
            d[j] -= s[i]
            s[i] = 0.0
            row_on[i] = False
        else:
            s[i] -= d[j]
            d[j] = 0.0
            col_on[j] = False
    return cells, flows


def _network_simplex(c: np.ndarray, cells, flows, tol: float, max_iter: int):
    m, n = c.shape
    N = m + n
    adj: list[dict[int, int]] = [dict() for _ in range(N)]
    for k, (i, j) in enumerate(cells):
        adj[i][m + j] = k
        adj[m + j][i] = k
    ccost = [float(c[i, j]) for i, j in cells]

    for it in range(max_iter):
        pot = [0.0] * N
        parent = [-1] * N
        depth = [0] * N
        order = [0]
        for node in order:
            pn = parent[node]
            for nb, k in adj[node].items():
                if nb != pn:
                    parent[nb] = node
                    depth[nb] = depth[node] + 1
                    pot[nb] = ccost[k] - pot[node]
                    order.append(nb)
        if len(order) != N:
            raise SolverError(f"basis is not a spanning tree ({len(order)}/{N} nodes reached)")
        pot_arr = np.asarray(pot)
        reduced = c - pot_arr[:m, None] - pot_arr[None, m:]
        flat = int(reduced.argmin())
        i, j = divmod(flat, n)
        if reduced[i, j] >= -tol:
            return cells, flows, it

        # tree path from column node back to row node closes the cycle
        a, b = i, m + j
        up_a, up_b = [], []
        while depth[a] > depth[b]:
            up_a.append(a)
            a = parent[a]
        while depth[b] > depth[a]:
            up_b.append(b)
            b = parent[b]
        while a != b:
            up_a.append(a)
            a = parent[a]
            up_b.append(b)
            b = parent[b]
        path = [adj[x][parent[x]] for x in up_b] + [adj[x][parent[x]] for x in reversed(up_a)]

        minus = path[0::2]
        plus = path[1::2]
        out = min(minus, key=lambda k: flows[k])
        theta = flows[out]
        for k in minus:
            flows[k] -= theta
        for k in plus:
            flows[k] += theta

        oi, oj = cells[out]
        del adj[oi][m + oj]
        del adj[m + oj][oi]
        cells[out] = (i, j)
        flows[out] = theta
        ccost[out] = float(c[i, j])
        adj[i][m + j] = out
        adj[m + j][i] = out
    return None


def exact_emd(p, q, c, tol: float = OPT_TOL, max_iter: int | None = None) -> EMDResult:
    """Exact EMD and an optimal coupling by transportation network simplex.

    Zero-mass tokens stay in the problem. If the pivoting rule has not reached
    optimality within ``max_iter`` (default 100 |V|^2) iterations the problem is
    re-solved once with marginals perturbed by 1e-12 to break degeneracy.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ContractError(f"cost matrix must be square, got {c.shape}")
    n = c.shape[0]
    p = check_distribution(p, n)
    q = check_distribution(q, n)
    if max_iter is None:
        max_iter = 100 * n * n

    result = _network_simplex(c, *_vogel(p, q, c), tol=tol, max_iter=max_iter)
    if result is None:
        pp = p + PERTURB_EPS
        qp = q.copy()
        qp[-1] += n * PERTURB_EPS
        result = _network_simplex(c, *_vogel(pp, qp, c), tol=tol, max_iter=max_iter)
        if result is None:
            raise SolverError(f"network simplex did not converge in {max_iter} iterations (|V|={n})")
    cells, flows, iterations = result

    plan = np.zeros((n, n))
    for (i, j), f in zip(cells, flows):
        plan[i, j] += f
    row_err = np.abs(plan.sum(axis=1) - p).max()
    col_err = np.abs(plan.sum(axis=0) - q).max()
    if row_err > FEAS_TOL or col_err > FEAS_TOL or plan.min() < -FEAS_TOL:
        raise SolverError(f"infeasible coupling: row err {row_err:.3g}, col err {col_err:.3g}, min {plan.min():.3g}")
    value = float(np.sum(plan * c))
    return EMDResult(value=value, plan=plan, iterations=iterations)


def dense_lp_emd(p, q, c) -> EMDResult:
    """Reference EMD from a dense LP over all |V|^2 coupling entries (small |V| only)."""
    from scipy.optimize import linprog

    c = np.asarray(c, dtype=np.float64)
    n = c.shape[0]
    p = check_distribution(p, n)
    q = check_distribution(q, n)
    if n > 16:
        raise ContractError("dense LP oracle is limited to |V| <= 16")
    a_eq = np.zeros((2 * n, n * n))
    for x in range(n):
        a_eq[x, x * n : (x + 1) * n] = 1.0
        a_eq[n + x, x::n] = 1.0
    b_eq = np.concatenate([p, q])
    res = linprog(
        c.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise SolverError(f"dense LP failed: {res.message}")
    return EMDResult(value=float(res.fun), plan=res.x.reshape(n, n), iterations=int(res.nit))
