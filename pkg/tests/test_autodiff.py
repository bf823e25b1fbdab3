"""Tape engine: forward values, backward rules, and the FD oracle itself."""

import math

import numpy as np
import pytest

import oracles
from eegnn import autodiff as ad
from eegnn.graphs import arc_list, canonicalize, degrees, norm_adj


def rand_leaf(rng, shape):
    return ad.leaf(rng.normal(size=shape))


def test_matmul_identity():
    B = ad.leaf([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul_add(ad.constant(np.eye(2)), B)
    assert np.array_equal(out.value, B.value)


def test_matmul_backward_is_transposed_product():
    rng = np.random.default_rng(0)
    A, B = rand_leaf(rng, (2, 2)), rand_leaf(rng, (2, 2))
    out = ad.matmul_add(A, B)
    ad.backward(ad.sum_all(out))
    # d sum(AB) / dB = A^T @ ones
    assert np.allclose(B.grad, A.value.T @ np.ones((2, 2)))


def test_matmul_bias_broadcasts_rows():
    A = ad.constant(np.zeros((3, 2)))
    B = ad.constant(np.eye(2))
    C = ad.leaf([[1.0, -2.0]])
    out = ad.matmul_add(A, B, C)
    assert np.array_equal(out.value, np.tile([[1.0, -2.0]], (3, 1)))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ad.matmul_add(ad.leaf(np.zeros((2, 3))), ad.leaf(np.zeros((2, 3))))


def test_relu_tanh_values():
    out = ad.activation_apply(ad.leaf([[-1.0, 1.0]]), "relu_tanh")
    assert out.value[0, 0] == 0.0
    assert out.value[0, 1] == pytest.approx(math.tanh(1.0), abs=1e-12)


def test_relu_tanh_subgradient_zero_at_zero():
    x = ad.leaf([[0.0]])
    ad.backward(ad.sum_all(ad.activation_apply(x, "relu_tanh")))
    assert x.grad[0, 0] == 0.0


def test_softplus_at_zero():
    out = ad.activation_apply(ad.leaf([[0.0]]), "softplus")
    assert out.value[0, 0] == pytest.approx(math.log(2.0), abs=1e-12)


def test_softplus_overflow_safe():
    out = ad.activation_apply(ad.leaf([[800.0, -800.0]]), "softplus")
    assert np.all(np.isfinite(out.value))
    assert out.value[0, 0] == pytest.approx(800.0)


def test_unknown_activation_rejected():
    with pytest.raises(ValueError):
        ad.activation_apply(ad.leaf([[0.0]]), "gelu")


def test_log_softmax_symmetric_row():
    out = ad.row_log_softmax(ad.leaf([[0.0, 0.0]]))
    assert np.allclose(out.value, [[-math.log(2), -math.log(2)]], atol=1e-15)


def test_log_softmax_extreme_row_stable():
    out = ad.row_log_softmax(ad.leaf([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out.value))
    assert out.value[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert out.value[0, 1] == pytest.approx(-1000.0)


def test_log_softmax_rows_exponentiate_to_one():
    rng = np.random.default_rng(3)
    out = ad.row_log_softmax(ad.leaf(rng.normal(size=(6, 5)) * 10))
    sums = np.exp(out.value).sum(axis=1)
    assert np.abs(sums - 1.0).max() <= 1e-12


def test_log_softmax_gradient():
    rng = np.random.default_rng(4)
    X = rand_leaf(rng, (3, 4))
    w = ad.constant(rng.normal(size=(3, 4)))

    def loss():
        return ad.sum_all(ad.mul(ad.row_log_softmax(X), w))

    assert ad.fd_check(loss, [X]) <= 1e-6


def test_mean_pool_identical_rows():
    out = ad.masked_mean_pool(ad.leaf([[2.0, 3.0], [2.0, 3.0]]))
    assert np.array_equal(out.value, [[2.0, 3.0]])


def test_mean_pool_arithmetic_mean():
    out = ad.masked_mean_pool(ad.leaf([[0.0], [2.0]]))
    assert out.value.tolist() == [[1.0]]


def test_mean_pool_permutation_invariant():
    rng = np.random.default_rng(5)
    H = rng.normal(size=(7, 3))
    perm = rng.permutation(7)
    a = ad.masked_mean_pool(ad.leaf(H)).value
    b = ad.masked_mean_pool(ad.leaf(H[perm])).value
    assert np.allclose(a, b, atol=1e-15)


def test_mean_pool_empty_selection_rejected():
    with pytest.raises(ValueError):
        ad.masked_mean_pool(ad.leaf(np.ones((3, 2))), mask=np.zeros(3, dtype=bool))


def test_backward_sum_gives_ones():
    W = ad.leaf(np.zeros((2, 2)))
    ad.backward(ad.sum_all(W))
    assert np.array_equal(W.grad, np.ones((2, 2)))


def test_backward_dead_relu_region():
    W = ad.leaf(-np.ones((2, 2)))
    ad.backward(ad.sum_all(ad.activation_apply(W, "relu")))
    assert not W.grad.any()


def test_backward_requires_scalar_root_without_seed():
    W = ad.leaf(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.backward(W)


def test_leaf_grads_accumulate_and_reset():
    W = ad.leaf(np.ones((2, 2)))
    ad.backward(ad.sum_all(W))
    ad.backward(ad.sum_all(W))
    assert np.array_equal(W.grad, 2 * np.ones((2, 2)))
    ad.zero_grads([W])
    assert not W.grad.any()


def test_shared_leaf_gets_one_contribution_per_use():
    W = ad.leaf(np.full((2, 2), 0.5))
    out = ad.add(ad.matmul_add(W, W), W)     # quadratic + linear use
    ad.backward(ad.sum_all(out))
    # d/dW sum(W@W + W) = W^T @ 1 + 1 @ W^T + 1
    ones = np.ones((2, 2))
    assert np.allclose(W.grad, W.value.T @ ones + ones @ W.value.T + ones)


def test_fd_check_quadratic_is_tight():
    rng = np.random.default_rng(6)
    W = rand_leaf(rng, (3, 3))

    def loss():
        return ad.sum_all(ad.mul(W, W))

    assert ad.fd_check(loss, [W]) <= 1e-9


def test_fd_check_constant_function():
    W = ad.leaf(np.ones((2, 2)))

    def loss():
        return ad.constant([[4.0]])

    assert ad.fd_check(loss, [W]) == 0.0


def test_straight_through_forward_hard_backward_soft():
    logits = ad.leaf([[0.4, 0.6]])
    hard = np.array([[0.0, 1.0]])
    w = ad.constant([[1.0, -1.0]])
    out = ad.straight_through(ad.softmax_rows(logits), hard)
    assert np.array_equal(out.value, hard)
    # backward through the estimator must equal the soft path's gradient,
    # measured by FD on the soft-only function
    ad.backward(ad.sum_all(ad.mul(out, w)))
    st_grad = logits.grad.copy()

    def soft_loss(x):
        e = np.exp(x - x.max())
        return float((e / e.sum() * w.value).sum())

    fd = oracles.fd_gradient(lambda x: soft_loss(x), logits.value.copy())
    assert np.abs(st_grad - fd).max() <= 1e-6


def test_dspmm_matches_dense_and_differentiates():
    rng = np.random.default_rng(7)
    g = canonicalize([(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)], 4)
    a = norm_adj(g)
    H = rand_leaf(rng, (4, 3))
    out = ad.dspmm(a, H)
    dense = oracles.dense_norm_adj(4, arc_list(g))
    assert np.abs(out.value - dense @ H.value).max() <= 1e-12
    w = ad.constant(rng.normal(size=(4, 3)))

    def loss():
        return ad.sum_all(ad.mul(ad.dspmm(a, H), w))

    assert ad.fd_check(loss, [H]) <= 1e-6


def _one_op_cases(rng):
    """(name, params, loss builder) for every differentiable op."""
    n, m = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    k = int(rng.integers(1, 9))

    def draw(*shape):
        # magnitudes kept in [0.5, 1.5] with random signs: entries land away
        # from the relu/abs kinks and away from 0, so no coordinate has a
        # near-zero true gradient whose relative FD error would be pure
        # roundoff noise
        return (rng.choice([-1.0, 1.0], size=shape)
                * rng.uniform(0.5, 1.5, size=shape))

    A = ad.leaf(draw(n, m))
    B = ad.leaf(draw(n, m))
    Wk = ad.leaf(draw(m, k))
    bias = ad.leaf(draw(1, k))
    t = ad.leaf(rng.uniform(0.1, 0.9, size=(n, 1)))
    row = ad.leaf(draw(1, m))
    mask = rng.random(n) < 0.5
    if not mask.any():
        mask[0] = True
    probe = ad.constant(draw(n, m))
    probek = ad.constant(draw(n, k))
    probe_col = ad.constant(draw(n, 1))
    probe_row = ad.constant(draw(1, m))

    def score(x, w=probe):
        return ad.sum_all(ad.mul(x, w))

    cases = [
        ("matmul_add", [A, Wk], lambda: score(ad.matmul_add(A, Wk), probek)),
        ("matmul_add_bias", [A, Wk, bias],
         lambda: score(ad.matmul_add(A, Wk, bias), probek)),
        ("add", [A, B], lambda: score(ad.add(A, B))),
        ("sub", [A, B], lambda: score(ad.sub(A, B))),
        ("neg", [A], lambda: score(ad.neg(A))),
        ("smul", [A], lambda: score(ad.smul(A, -1.7))),
        ("add_scalar", [A], lambda: score(ad.add_scalar(A, 0.3))),
        ("mul", [A, B], lambda: score(ad.mul(A, B))),
        ("mul_const", [A], lambda: score(ad.mul_const(A, probe.value))),
        ("abs_val", [A], lambda: score(ad.abs_val(A))),
        ("scale_rows", [A, t], lambda: score(ad.scale_rows(A, t))),
        ("add_scaled_rows", [A, B, t],
         lambda: score(ad.add_scaled_rows(A, B, t))),
        ("transpose", [A],
         lambda: ad.sum_all(ad.mul(ad.transpose(A),
                                   ad.constant(probe.value.T)))),
        ("tile_rows", [row], lambda: score(ad.tile_rows(row, n))),
        ("col_slice", [A],
         lambda: ad.sum_all(ad.mul(ad.col_slice(A, m - 1), probe_col))),
        ("where_rows", [A, B], lambda: score(ad.where_rows(mask, A, B))),
        ("row_log_softmax", [A], lambda: score(ad.row_log_softmax(A))),
        ("softmax_rows", [A], lambda: score(ad.softmax_rows(A))),
        ("mean_pool", [A],
         lambda: ad.sum_all(ad.mul(ad.masked_mean_pool(A, mask=mask),
                                   probe_row))),
        ("sum_all", [A], lambda: ad.sum_all(A)),
    ]
    for kind in ("relu", "tanh", "relu_tanh", "softplus", "sigmoid", "identity"):
        cases.append((f"act_{kind}", [A],
                      lambda kind=kind: score(ad.activation_apply(A, kind))))
    return cases


def test_every_op_passes_fd_in_isolation():
    # the per-op certification: random shapes up to 8x8, many seeds
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        for name, params, loss in _one_op_cases(rng):
            err = ad.fd_check(loss, params)
            assert err <= 1e-6, f"{name} seed {seed}: fd error {err}"


def test_deep_chain_fd():
    # 60 repeated applications of a nonlinear map, one shared weight
    rng = np.random.default_rng(8)
    W = rand_leaf(rng, (4, 4))
    X = ad.constant(rng.normal(size=(5, 4)) * 0.3)

    def loss():
        H = X
        for _ in range(60):
            H = ad.activation_apply(ad.matmul_add(H, W), "tanh")
        return ad.sum_all(H)

    assert ad.fd_check(loss, [W]) <= 1e-4


def test_no_non_finite_for_bounded_inputs():
    rng = np.random.default_rng(9)
    X = ad.leaf(rng.uniform(-50, 50, size=(6, 6)))
    for kind in ("relu", "tanh", "relu_tanh", "softplus", "sigmoid", "identity"):
        assert np.all(np.isfinite(ad.activation_apply(X, kind).value))
    assert np.all(np.isfinite(ad.row_log_softmax(X).value))
    assert np.all(np.isfinite(ad.softmax_rows(X).value))


def test_backward_with_seed_reads_single_coordinate():
    rng = np.random.default_rng(10)
    W = rand_leaf(rng, (3, 3))
    X = ad.constant(rng.normal(size=(2, 3)))
    out = ad.matmul_add(X, W)
    seed = np.zeros((2, 3))
    seed[1, 2] = 1.0
    ad.backward(out, seed=seed)
    # d out[1,2] / dW[i,j] = X[1,i] * [j == 2]
    want = np.zeros((3, 3))
    want[:, 2] = X.value[1]
    assert np.allclose(W.grad, want, atol=1e-15)


def test_interior_grads_valid_after_each_sweep():
    W = ad.leaf(np.array([[2.0]]))
    mid = ad.smul(W, 3.0)
    root = ad.smul(mid, 5.0)
    ad.backward(root)
    assert mid.grad[0, 0] == 5.0
    ad.backward(root)
    # interior resets per sweep, leaf accumulates
    assert mid.grad[0, 0] == 5.0
    assert W.grad[0, 0] == 30.0
