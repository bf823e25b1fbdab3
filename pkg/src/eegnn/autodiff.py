"""Reverse-mode differentiation over dense float64 matrices.

Every value in a computation is a DiffValue: a 2-D float64 array plus a
gradient accumulator and a backward rule. Ops build an acyclic tape; backward
runs one reverse topological sweep and adds each node's contribution into its
parents' accumulators. Accumulation is the correctness mechanism here, not an
option: cell weights are shared across layers, so one parameter legitimately
receives one contribution per layer of the forward pass. Callers zero leaf
gradients explicitly between optimizer steps.

No broadcasting beyond the row-vector bias in matmul_add, no higher-order
derivatives, and float64 only; those limits are deliberate.
"""

from __future__ import annotations

import numpy as np

from .graphs import spmm as _spmm_value

__all__ = [
    "DiffValue",
    "leaf",
    "constant",
    "matmul_add",
    "activation_apply",
    "row_log_softmax",
    "softmax_rows",
    "masked_mean_pool",
    "add",
    "sub",
    "neg",
    "smul",
    "add_scalar",
    "mul",
    "mul_const",
    "abs_val",
    "scale_rows",
    "add_scaled_rows",
    "transpose",
    "tile_rows",
    "col_slice",
    "where_rows",
    "straight_through",
    "sum_all",
    "dspmm",
    "backward",
    "zero_grads",
    "fd_check",
]


def _as_matrix(x) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got ndim={a.ndim}")
    return a


class DiffValue:
    """One node of the computation tape."""

    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_rule=None,
                 requires_grad=False, name=""):
        self.value = _as_matrix(value)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"DiffValue{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"


def leaf(value, name="") -> DiffValue:
    """Trainable leaf; backward deposits d(root)/d(leaf) into .grad."""
    return DiffValue(value, requires_grad=True, name=name)


def constant(value, name="") -> DiffValue:
    return DiffValue(value, requires_grad=False, name=name)


def _node(value, parents, rule) -> DiffValue:
    out = DiffValue(value, parents=parents, backward_rule=rule)
    return out


# ------------------------------------------------------------------- core ops

def matmul_add(A: DiffValue, B: DiffValue, C: DiffValue | None = None) -> DiffValue:
    """A @ B (+ C). C may be same-shape or a broadcast 1 x m row vector (bias)."""
    n, k = A.shape
    k2, m = B.shape
    if k != k2:
        raise ValueError(f"inner dims disagree: {A.shape} @ {B.shape}")
    val = A.value @ B.value
    if C is not None:
        if C.shape != (n, m) and C.shape != (1, m):
            raise ValueError(f"bias shape {C.shape} not broadcastable to {(n, m)}")
        val = val + C.value

    def rule(G):
        A.grad += G @ B.value.T
        B.grad += A.value.T @ G
        if C is not None:
            if C.shape[0] == n:
                C.grad += G
            else:
                C.grad += G.sum(axis=0, keepdims=True)

    parents = (A, B) if C is None else (A, B, C)
    return _node(val, parents, rule)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _act_forward(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu_tanh":
        return np.where(x > 0, np.tanh(x), 0.0)
    if kind == "softplus":
        # overflow-safe log(1 + exp(x))
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown activation '{kind}'")


def _act_derivative(x, kind):
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if kind == "relu_tanh":
        # subgradient 0 at x = 0
        t = np.tanh(x)
        return np.where(x > 0, 1.0 - t * t, 0.0)
    if kind == "softplus":
        return _sigmoid(x)
    if kind == "sigmoid":
        s = _sigmoid(x)
        return s * (1.0 - s)
    if kind == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation '{kind}'")


ACTIVATION_KINDS = ("relu", "tanh", "relu_tanh", "softplus", "sigmoid", "identity")


def activation_apply(X: DiffValue, kind: str) -> DiffValue:
    """Elementwise activation; relu_tanh is ReLU composed with tanh."""
    if kind not in ACTIVATION_KINDS:
        raise ValueError(f"unknown activation '{kind}', expected one of {ACTIVATION_KINDS}")
    x = X.value

    def rule(G):
        X.grad += G * _act_derivative(x, kind)

    return _node(_act_forward(x, kind), (X,), rule)


def row_log_softmax(X: DiffValue) -> DiffValue:
    """Per-row x - max(x) - log sum exp(x - max); exp of a row sums to 1."""
    x = X.value
    if x.shape[1] < 1:
        raise ValueError("row_log_softmax needs at least one column")
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    prob = np.exp(out)

    def rule(G):
        X.grad += G - prob * G.sum(axis=1, keepdims=True)

    return _node(out, (X,), rule)


def softmax_rows(X: DiffValue) -> DiffValue:
    """Per-row softmax, computed through the shifted exponential."""
    x = X.value
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def rule(G):
        X.grad += s * (G - (G * s).sum(axis=1, keepdims=True))

    return _node(s, (X,), rule)


def masked_mean_pool(H: DiffValue, mask=None) -> DiffValue:
    """Mean over (selected) rows as a 1 x m matrix."""
    if mask is None:
        sel = np.ones(H.shape[0], dtype=bool)
    else:
        sel = np.asarray(mask, dtype=bool)
        if sel.shape != (H.shape[0],):
            raise ValueError("mask length must equal the row count")
    count = int(sel.sum())
    if count == 0:
        raise ValueError("masked_mean_pool over an empty selection")
    val = H.value[sel].mean(axis=0, keepdims=True)

    def rule(G):
        H.grad[sel] += G / count

    return _node(val, (H,), rule)


# ------------------------------------------------------------- elementwise ops

def add(A: DiffValue, B: DiffValue) -> DiffValue:
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")

    def rule(G):
        A.grad += G
        B.grad += G

    return _node(A.value + B.value, (A, B), rule)


def sub(A: DiffValue, B: DiffValue) -> DiffValue:
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")

    def rule(G):
        A.grad += G
        B.grad -= G

    return _node(A.value - B.value, (A, B), rule)


def neg(A: DiffValue) -> DiffValue:
    def rule(G):
        A.grad -= G

    return _node(-A.value, (A,), rule)


def smul(A: DiffValue, c: float) -> DiffValue:
    c = float(c)

    def rule(G):
        A.grad += c * G

    return _node(c * A.value, (A,), rule)


def add_scalar(A: DiffValue, c: float) -> DiffValue:
    c = float(c)

    def rule(G):
        A.grad += G

    return _node(A.value + c, (A,), rule)


def mul(A: DiffValue, B: DiffValue) -> DiffValue:
    """Elementwise product of same-shape matrices."""
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")

    def rule(G):
        A.grad += G * B.value
        B.grad += G * A.value

    return _node(A.value * B.value, (A, B), rule)


def mul_const(A: DiffValue, M) -> DiffValue:
    """Elementwise product with a constant matrix of the same shape."""
    M = _as_matrix(M)
    if M.shape != A.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {M.shape}")

    def rule(G):
        A.grad += G * M

    return _node(A.value * M, (A,), rule)


def abs_val(A: DiffValue) -> DiffValue:
    """|x| with subgradient 0 at 0."""
    sign = np.sign(A.value)

    def rule(G):
        A.grad += G * sign

    return _node(np.abs(A.value), (A,), rule)


def scale_rows(A: DiffValue, t: DiffValue) -> DiffValue:
    """Row-wise scaling: out[i] = t[i,0] * A[i]; t is an n x 1 column."""
    if t.shape != (A.shape[0], 1):
        raise ValueError(f"t must be {A.shape[0]} x 1, got {t.shape}")

    def rule(G):
        A.grad += G * t.value
        t.grad += (G * A.value).sum(axis=1, keepdims=True)

    return _node(A.value * t.value, (A, t), rule)


def add_scaled_rows(H: DiffValue, S: DiffValue, t: DiffValue) -> DiffValue:
    """out[i] = H[i] + t[i,0] * S[i], with t[i,0] == 0 copying row i verbatim.

    The zero-step row is copied, not recomputed as H + 0*S, so gating a row off
    preserves it bit for bit (including signed zeros).
    """
    if H.shape != S.shape:
        raise ValueError(f"shape mismatch {H.shape} vs {S.shape}")
    if t.shape != (H.shape[0], 1):
        raise ValueError(f"t must be {H.shape[0]} x 1, got {t.shape}")
    tv = t.value
    val = H.value + tv * S.value
    frozen = (tv[:, 0] == 0.0)
    if frozen.any():
        val[frozen] = H.value[frozen]

    def rule(G):
        H.grad += G
        S.grad += G * tv
        t.grad += (G * S.value).sum(axis=1, keepdims=True)

    return _node(val, (H, S, t), rule)


def transpose(A: DiffValue) -> DiffValue:
    def rule(G):
        A.grad += G.T

    return _node(A.value.T.copy(), (A,), rule)


def tile_rows(A: DiffValue, n: int) -> DiffValue:
    """Repeat a 1 x k row n times; gradient sums back over the copies."""
    if A.shape[0] != 1:
        raise ValueError(f"expected a single row, got shape {A.shape}")

    def rule(G):
        A.grad += G.sum(axis=0, keepdims=True)

    return _node(np.repeat(A.value, n, axis=0), (A,), rule)


def col_slice(A: DiffValue, j: int) -> DiffValue:
    """Column j of A as an n x 1 matrix."""
    if not (0 <= j < A.shape[1]):
        raise ValueError(f"column {j} out of range for shape {A.shape}")

    def rule(G):
        A.grad[:, j:j + 1] += G

    return _node(A.value[:, j:j + 1].copy(), (A,), rule)


def where_rows(mask, A: DiffValue, B: DiffValue) -> DiffValue:
    """Row select: out[i] = A[i] where mask[i] else B[i]; mask is constant."""
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    sel = np.asarray(mask, dtype=bool)
    if sel.shape != (A.shape[0],):
        raise ValueError("mask length must equal the row count")
    val = np.where(sel[:, None], A.value, B.value)

    def rule(G):
        A.grad[sel] += G[sel]
        B.grad[~sel] += G[~sel]

    return _node(val, (A, B), rule)


def straight_through(soft: DiffValue, hard_value) -> DiffValue:
    """Value is the given hard matrix; gradient passes to the soft input unchanged."""
    hv = _as_matrix(hard_value)
    if hv.shape != soft.shape:
        raise ValueError(f"hard value shape {hv.shape} must match soft {soft.shape}")

    def rule(G):
        soft.grad += G

    return _node(hv, (soft,), rule)


def sum_all(A: DiffValue) -> DiffValue:
    def rule(G):
        A.grad += G[0, 0]

    return _node(np.array([[A.value.sum()]]), (A,), rule)


def dspmm(a, H: DiffValue) -> DiffValue:
    """Sparse arc-matrix times DiffValue; the arc values are constants."""
    val = _spmm_value(a, H.value)

    def rule(G):
        H.grad += _spmm_value(a, G, transpose=True)

    return _node(val, (H,), rule)


# ------------------------------------------------------------------- traversal

def _topo_order(root: DiffValue):
    """Iterative post-order over the tape (deep graphs exceed recursion limits)."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: DiffValue, seed=None) -> None:
    """Reverse sweep from a scalar root (or from an explicit seed matrix).

    After the sweep, every reachable leaf with requires_grad holds the sum of
    all path contributions in .grad, added on top of whatever was there.
    """
    if seed is None:
        if root.shape != (1, 1):
            raise ValueError(f"backward needs a 1 x 1 root, got {root.shape}")
        seed = np.ones((1, 1))
    else:
        seed = _as_matrix(seed)
        if seed.shape != root.shape:
            raise ValueError("seed shape must match the root")
    order = _topo_order(root)
    # interior accumulators start fresh each sweep; leaves keep accumulating
    for node in order:
        if node.backward_rule is not None:
            node.grad = np.zeros_like(node.value)
    root.grad = root.grad + seed
    for node in reversed(order):
        if node.backward_rule is not None and node.requires_grad:
            node.backward_rule(node.grad)


def zero_grads(params) -> None:
    """Explicitly reset leaf accumulators (call between optimizer steps)."""
    for p in params:
        p.grad[...] = 0.0


def fd_check(f, params, h: float = 1e-5) -> float:
    """Max relative disagreement between backward and central differences.

    f() must rebuild the computation from the current parameter values and
    return the scalar root DiffValue. Returns
    max_i |fd_i - grad_i| / max(1e-8, |fd_i| + |grad_i|) over every coordinate
    of every parameter.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    zero_grads(params)
    root = f()
    backward(root)
    grads = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.value.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().value[0, 0])
            flat[i] = orig - h
            fm = float(f().value[0, 0])
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            rel = abs(fd - gflat[i]) / max(1e-8, abs(fd) + abs(gflat[i]))
            worst = max(worst, rel)
    return worst
