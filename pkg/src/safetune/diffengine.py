"""Reverse-mode automatic differentiation over dense 2-D arrays.

Every operation is a method on a :class:`Tape`. Calling an op computes the
forward value eagerly and, when the tape is recording, appends a node holding
the operands and a backward closure. Because nodes are appended in the order
they are computed, the recording order is already a topological order and
:meth:`Tape.backward` only has to walk the list once in reverse.

Example::

    tape = Tape()
    x = tape.leaf(np.array([[3.0]]))
    loss = tape.mul(x, x)
    grads = tape.backward(loss)
    grads[x]  # array([[6.]])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NonFiniteError

_NEG_INF = -np.inf


class Node:
    """One value on the tape. Leaves have no parents and no backward rule."""

    __slots__ = ("value", "parents", "backward_fn", "trainable", "op", "index")

    def __init__(self, value, parents=(), backward_fn=None, trainable=False, op="leaf", index=-1):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.trainable = trainable
        self.op = op
        self.index = index

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.value.shape}, index={self.index})"


class Tape:
    """An ordered record of operations.

    ``record=False`` gives an inference-only tape: values are still computed
    and checked for finiteness, but no backward closures are stored.
    """

    def __init__(self, dtype=np.float64, record: bool = True):
        self.dtype = np.dtype(dtype)
        self.record = record
        self.nodes: list[Node] = []

    # ------------------------------------------------------------------ leaves

    def leaf(self, array, trainable: bool = True) -> Node:
        value = np.asarray(array, dtype=self.dtype)
        if value.ndim != 2:
            raise DimensionError(f"leaf must be 2-D, got shape {value.shape}")
        if not np.isfinite(value).all():
            raise NonFiniteError("leaf contains non-finite entries")
        return self._push(Node(value, trainable=trainable, op="leaf"))

    def constant(self, array) -> Node:
        """A stop-gradient leaf."""
        return self.leaf(array, trainable=False)

    def stop_gradient(self, a: Node) -> Node:
        """Detach ``a``: same value, no gradient flows back to its producers."""
        return self._push(Node(a.value, trainable=False, op="stop_gradient"))

    # ---------------------------------------------------------------- plumbing

    def _push(self, node: Node) -> Node:
        node.index = len(self.nodes)
        if self.record:
            self.nodes.append(node)
        return node

    def _op(self, op: str, value: np.ndarray, parents: tuple[Node, ...], backward_fn: Callable) -> Node:
        if not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite value produced by {op} (operand shapes {[p.shape for p in parents]})")
        if not self.record:
            return Node(value, op=op)
        return self._push(Node(value, parents, backward_fn, op=op))

    # -------------------------------------------------------------- linear ops

    def matmul(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul {a.shape} x {b.shape}")
        av, bv = a.value, b.value
        return self._op("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def transpose(self, a: Node) -> Node:
        return self._op("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise sum; ``b`` may also be a single row broadcast over ``a``."""
        if b.shape == a.shape:
            return self._op("add", a.value + b.value, (a, b), lambda g: (g, g))
        if b.shape == (1, a.shape[1]):
            return self._op("add", a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))
        raise DimensionError(f"add {a.shape} + {b.shape}")

    def sub(self, a: Node, b: Node) -> Node:
        if b.shape != a.shape:
            raise DimensionError(f"sub {a.shape} - {b.shape}")
        return self._op("sub", a.value - b.value, (a, b), lambda g: (g, -g))

    def mul(self, a: Node, b: Node) -> Node:
        if b.shape != a.shape:
            raise DimensionError(f"mul {a.shape} * {b.shape}")
        av, bv = a.value, b.value
        return self._op("mul", av * bv, (a, b), lambda g: (g * bv, g * av))

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._op("scale", a.value * c, (a,), lambda g: (g * c,))

    def add_scalar(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._op("add_scalar", a.value + c, (a,), lambda g: (g,))

    # ------------------------------------------------------------ pointwise ops

    def log(self, a: Node) -> Node:
        av = a.value
        if (av <= 0).any():
            raise DomainError(f"log of non-positive value (min {av.min()!r})")
        return self._op("log", np.log(av), (a,), lambda g: (g / av,))

    def exp(self, a: Node) -> Node:
        out = np.exp(a.value)
        return self._op("exp", out, (a,), lambda g: (g * out,))

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        return self._op("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))

    def clamp_min(self, a: Node, lo: float) -> Node:
        """max(a, lo); entries at the clamp receive no gradient."""
        keep = a.value > lo
        return self._op("clamp_min", np.where(keep, a.value, lo), (a,), lambda g: (g * keep,))

    # -------------------------------------------------------------- reductions

    def sum(self, a: Node) -> Node:
        shape = a.shape
        return self._op(
            "sum", np.array([[a.value.sum()]], dtype=a.value.dtype), (a,), lambda g: (np.full(shape, g[0, 0], dtype=g.dtype),)
        )

    def mean(self, a: Node) -> Node:
        shape = a.shape
        n = a.value.size
        return self._op(
            "mean",
            np.array([[a.value.mean()]], dtype=a.value.dtype),
            (a,),
            lambda g: (np.full(shape, g[0, 0] / n, dtype=g.dtype),),
        )

    def sum_rows(self, a: Node) -> Node:
        """Row sums as an n x 1 column."""
        shape = a.shape
        return self._op("sum_rows", a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))

    # ---------------------------------------------------------------- indexing

    def gather_rows(self, a: Node, idx: Sequence[int]) -> Node:
        idx = np.asarray(idx, dtype=np.intp)
        if idx.ndim != 1:
            raise DimensionError("gather_rows index must be 1-D")
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise DimensionError(f"gather_rows index out of range for {a.shape[0]} rows")
        shape = a.shape

        def backward(g):
            out = np.zeros(shape, dtype=g.dtype)
            np.add.at(out, idx, g)
            return (out,)

        return self._op("gather_rows", a.value[idx], (a,), backward)

    def slice_cols(self, a: Node, start: int, stop: int) -> Node:
        shape = a.shape

        def backward(g):
            out = np.zeros(shape, dtype=g.dtype)
            out[:, start:stop] = g
            return (out,)

        return self._op("slice_cols", a.value[:, start:stop].copy(), (a,), backward)

    # ------------------------------------------------------- row normalisations

    def softmax_rows(self, a: Node) -> Node:
        z = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=1, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

        return self._op("softmax_rows", out, (a,), backward)

    def log_softmax_rows(self, a: Node) -> Node:
        z = a.value - a.value.max(axis=1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        p = np.exp(out)

        def backward(g):
            return (g - p * g.sum(axis=1, keepdims=True),)

        return self._op("log_softmax_rows", out, (a,), backward)

    def layer_norm_rows(self, a: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
        n = a.shape[1]
        if gain.shape != (1, n) or bias.shape != (1, n):
            raise DimensionError(f"layer_norm gain/bias must be (1, {n})")
        x = a.value
        mu = x.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(((x - mu) ** 2).mean(axis=1, keepdims=True) + eps)
        xhat = (x - mu) * inv
        gv = gain.value

        def backward(g):
            dxhat = g * gv
            dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
            return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

        return self._op("layer_norm_rows", xhat * gv + bias.value, (a, gain, bias), backward)

    # --------------------------------------------------------------- attention

    def causal_attention(self, q: Node, k: Node, v: Node, seq_len: int, heads: int) -> Node:
        """Multi-head causal self-attention over packed sequences.

        ``q``, ``k``, ``v`` are ``(B*seq_len) x dim``; rows ``[b*seq_len, (b+1)*seq_len)``
        belong to sequence ``b``. Position ``t`` attends to positions ``<= t`` of its own
        sequence only. The output has the same layout with heads concatenated.
        """
        rows, dim = q.shape
        if k.shape != q.shape or v.shape != q.shape:
            raise DimensionError("q, k, v must share a shape")
        if rows % seq_len or dim % heads:
            raise DimensionError(f"{rows} rows / seq_len {seq_len}, dim {dim} / heads {heads}")
        nb, dh = rows // seq_len, dim // heads
        c = 1.0 / np.sqrt(dh)

        def split(x):
            return x.reshape(nb, seq_len, heads, dh).transpose(0, 2, 1, 3)

        def merge(x):
            return x.transpose(0, 2, 1, 3).reshape(rows, dim)

        Q, K, V = split(q.value), split(k.value), split(v.value)
        allowed = np.tril(np.ones((seq_len, seq_len), dtype=bool))
        s = np.where(allowed, (Q @ K.transpose(0, 1, 3, 2)) * c, _NEG_INF)
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        A = e / e.sum(axis=-1, keepdims=True)
        out = merge(A @ V)

        def backward(g):
            G = split(g)
            dV = A.transpose(0, 1, 3, 2) @ G
            dA = G @ V.transpose(0, 1, 3, 2)
            dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * c
            dQ = dS @ K
            dK = dS.transpose(0, 1, 3, 2) @ Q
            return merge(dQ), merge(dK), merge(dV)

        return self._op("causal_attention", out, (q, k, v), backward)

    # ---------------------------------------------------------------- backward

    def backward(self, loss: Node) -> dict[Node, np.ndarray]:
        """Gradients of a 1x1 ``loss`` with respect to every leaf on the tape.

        Trainable leaves receive their accumulated gradient; stop-gradient leaves
        receive zeros. Gradients from multiple uses of one leaf are summed.
        """
        if not self.record:
            raise ContractError("backward on a non-recording tape")
        if loss.shape != (1, 1):
            raise ContractError(f"loss must be 1x1, got {loss.shape}")
        if loss.index < 0 or loss.index >= len(self.nodes) or self.nodes[loss.index] is not loss:
            raise ContractError("loss node is not on this tape")

        grads: list[np.ndarray | None] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones((1, 1), dtype=self.dtype)
        for i in range(loss.index, -1, -1):
            node = self.nodes[i]
            g = grads[i]
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None:
                    continue
                j = parent.index
                if grads[j] is None:
                    grads[j] = np.array(pg, dtype=self.dtype, copy=True)
                else:
                    grads[j] += pg

        out: dict[Node, np.ndarray] = {}
        for i, node in enumerate(self.nodes):
            if node.op != "leaf":
                continue
            g = grads[i] if i < len(grads) else None
            if node.trainable and g is not None:
                out[node] = g
            else:
                out[node] = np.zeros_like(node.value)
        return out


# ------------------------------------------------------ finite differences


def numerical_gradient(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f`` with respect to each array."""
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = a[ix]
            a[ix] = orig + h
            fp = f(arrays)
            a[ix] = orig - h
            fm = f(arrays)
            a[ix] = orig
            g[ix] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max over entries of |a-b| / max(1, |a|, |b|)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float((np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))).max(initial=0.0))


def check_gradients(build: Callable[[Tape, list[Node]], Node], arrays: list[np.ndarray], h: float = 1e-5) -> float:
    """Compare tape gradients against central differences at 64-bit.

    ``build(tape, leaves)`` must return a 1x1 loss node. Returns the worst
    relative error over all entries of all inputs.
    """

    def f(xs):
        tape = Tape(np.float64, record=False)
        leaves = [tape.leaf(x) for x in xs]
        return float(build(tape, leaves).value[0, 0])

    tape = Tape(np.float64)
    leaves = [tape.leaf(a) for a in arrays]
    grads = tape.backward(build(tape, leaves))
    numeric = numerical_gradient(f, arrays, h)
    return max(relative_error(grads[leaf], n) for leaf, n in zip(leaves, numeric))
