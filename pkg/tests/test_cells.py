"""Cell update step, baselines, heads, and parameter accounting."""

import numpy as np
import pytest

import oracles
from eegnn import autodiff as ad
from eegnn.cells import (CellParams, antisymmetrize, baseline_step, decode,
                         encode, make_cell_params, param_count, sas_step,
                         symmetrize)
from eegnn.graphs import canonicalize, gen_sbm, norm_adj, spmm


def small_graph(n=10, seed=0):
    rng = np.random.default_rng(seed)
    while True:
        edges = [(int(rng.integers(n)), int(rng.integers(n)))
                 for _ in range(3 * n)]
        g = canonicalize(edges, n)
        if np.all(np.diff(g.row_offsets) > 0):
            return g


def basic_params(rng, m, tau=1.0, **kw):
    return make_cell_params(rng, "sas", m, m, 2, tau=tau, **kw)


def test_cell_params_rejects_bad_tau():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        basic_params(rng, 3, tau=0.0)
    with pytest.raises(ValueError):
        basic_params(rng, 3, tau=1.2)


def test_cell_params_rejects_bad_activation_and_edge_mode():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        make_cell_params(rng, "sas", 3, 3, 2, sigma1="swish")
    with pytest.raises(ValueError):
        make_cell_params(rng, "sas", 3, 3, 2, edge_mode="bilinear")


def test_edge_mode_requires_edge_weights():
    p = CellParams(omega_raw=ad.leaf(np.zeros((2, 2))),
                   w_raw=ad.leaf(np.zeros((2, 2))),
                   enc_w=ad.leaf(np.zeros((2, 2))),
                   enc_b=ad.leaf(np.zeros((1, 2))),
                   dec=[(ad.leaf(np.zeros((2, 2))), ad.leaf(np.zeros((1, 2))))])
    with pytest.raises(ValueError):
        CellParams(omega_raw=p.omega_raw, w_raw=p.w_raw, enc_w=p.enc_w,
                   enc_b=p.enc_b, dec=p.dec, edge_mode="neg_relu")


def test_antisymmetrize_kernel_is_symmetric_matrices():
    S = ad.leaf([[1.0, 2.0], [2.0, 5.0]])
    assert not antisymmetrize(S).value.any()


def test_antisymmetrize_direct_value():
    out = antisymmetrize(ad.leaf([[0.0, 1.0], [0.0, 0.0]]))
    assert out.value.tolist() == [[0.0, 1.0], [-1.0, 0.0]]


def test_antisymmetrize_exact_bitwise():
    rng = np.random.default_rng(1)
    for _ in range(20):
        O = antisymmetrize(ad.leaf(rng.normal(size=(5, 5)))).value
        assert np.array_equal(O.T, -O)


def test_symmetrize_kernel_is_antisymmetric_matrices():
    A = ad.leaf([[0.0, 3.0], [-3.0, 0.0]])
    assert not symmetrize(A).value.any()


def test_symmetrize_direct_value():
    out = symmetrize(ad.leaf([[1.0, 2.0], [0.0, 1.0]]))
    assert out.value.tolist() == [[1.0, 1.0], [1.0, 1.0]]


def test_symmetrize_exact_bitwise():
    rng = np.random.default_rng(2)
    for _ in range(20):
        W = symmetrize(ad.leaf(rng.normal(size=(5, 5)))).value
        assert np.array_equal(W.T, W)


def test_sas_step_zero_tau_is_identity():
    rng = np.random.default_rng(3)
    g = small_graph()
    p = basic_params(rng, 4)
    H = ad.constant(rng.normal(size=(10, 4)))
    out = sas_step(H, norm_adj(g), p, tau=np.zeros((10, 1)))
    assert np.array_equal(out.value, H.value)


def test_sas_step_zero_tau_rows_bit_exact():
    # mixed column: gated rows unchanged at the bit level, others move
    rng = np.random.default_rng(4)
    g = small_graph()
    p = basic_params(rng, 4)
    H = ad.constant(rng.normal(size=(10, 4)))
    tau = rng.uniform(0.2, 1.0, size=(10, 1))
    tau[[1, 5, 7], 0] = 0.0
    out = sas_step(H, norm_adj(g), p, tau=tau).value
    for i in (1, 5, 7):
        assert np.array_equal(out[i], H.value[i])
    assert not np.array_equal(out, H.value)   # the step as a whole moved


def test_sas_step_origin_fixed_point():
    rng = np.random.default_rng(5)
    g = small_graph()
    p = basic_params(rng, 4)
    out = sas_step(ad.constant(np.zeros((10, 4))), norm_adj(g), p, tau=0.5)
    assert not out.value.any()


def test_sas_step_rejects_bad_per_node_tau():
    rng = np.random.default_rng(6)
    g = small_graph()
    p = basic_params(rng, 4)
    H = ad.constant(np.zeros((10, 4)))
    with pytest.raises(ValueError):
        sas_step(H, norm_adj(g), p, tau=np.full((10, 1), 1.5))
    with pytest.raises(ValueError):
        sas_step(H, norm_adj(g), p, tau=np.full((10, 1), -0.1))


def test_sas_step_rejects_shape_mismatch():
    rng = np.random.default_rng(7)
    g = small_graph()
    p = basic_params(rng, 4)
    with pytest.raises(ValueError):
        sas_step(ad.constant(np.zeros((9, 4))), norm_adj(g), p)


def test_sas_step_per_node_tau_matches_scalar_rowwise():
    rng = np.random.default_rng(8)
    g = small_graph()
    p = basic_params(rng, 4)
    H = ad.constant(rng.normal(size=(10, 4)))
    a = norm_adj(g)
    full = sas_step(H, a, p, tau=0.3).value
    tau = np.full((10, 1), 0.7)
    tau[2, 0] = 0.3
    mixed = sas_step(H, a, p, tau=tau).value
    assert np.array_equal(mixed[2], full[2])


def test_sas_step_three_layer_gradients_match_fd():
    rng = np.random.default_rng(9)
    g = small_graph(10, seed=9)
    p = basic_params(rng, 4, tau=0.1)
    a = norm_adj(g)
    X = ad.constant(rng.normal(size=(10, 4)))

    def loss():
        H = X
        for _ in range(3):
            H = sas_step(H, a, p, tau=0.1)
        return ad.sum_all(ad.mul(H, ad.mul(H, H)))

    assert ad.fd_check(loss, [p.omega_raw, p.w_raw]) <= 1e-4


def test_graff_closed_form():
    # omega zero, w = I (already symmetric), identity activation, tau = 1
    rng = np.random.default_rng(10)
    g = small_graph()
    m = 3
    p = make_cell_params(rng, "graff", m, m, 2, sigma1="identity", tau=1.0)
    p.omega_raw.value[...] = 0.0
    p.w_raw.value[...] = np.eye(m)
    H = rng.normal(size=(10, m))
    out = baseline_step(ad.constant(H), norm_adj(g), p, "graff")
    want = H + spmm(norm_adj(g), H)
    assert np.abs(out.value - want).max() <= 1e-14


def test_gcn_closed_form():
    rng = np.random.default_rng(11)
    g = small_graph()
    m = 3
    p = make_cell_params(rng, "gcn", m, m, 2, depth=2, sigma1="identity")
    p.gcn_ws[0].value[...] = np.eye(m)
    H = rng.normal(size=(10, m))
    out = baseline_step(ad.constant(H), norm_adj(g), p, "gcn", layer=0)
    assert np.abs(out.value - spmm(norm_adj(g), H)).max() <= 1e-14


def test_adgn_step_gradients_match_fd():
    rng = np.random.default_rng(12)
    g = small_graph(8, seed=12)
    p = make_cell_params(rng, "adgn", 3, 3, 2, tau=0.2)
    a = norm_adj(g)
    X = ad.constant(rng.normal(size=(8, 3)))

    def loss():
        H = X
        for _ in range(2):
            H = baseline_step(H, a, p, "adgn")
        return ad.sum_all(ad.mul(H, H))

    params = [p.omega_raw, p.w_raw, p.adgn_b]
    assert ad.fd_check(loss, params) <= 1e-4


def test_encode_zero_input_gives_relu_bias():
    rng = np.random.default_rng(13)
    p = basic_params(rng, 4)
    p.enc_b.value[...] = np.array([[1.0, -1.0, 0.5, -0.5]])
    out = encode(ad.constant(np.zeros((3, 4))), p)
    assert np.array_equal(out.value, np.tile([[1.0, 0.0, 0.5, 0.0]], (3, 1)))


def test_encode_identity_weights_is_relu():
    rng = np.random.default_rng(14)
    p = basic_params(rng, 3)
    p.enc_w.value[...] = np.eye(3)
    p.enc_b.value[...] = 0.0
    X = rng.normal(size=(5, 3))
    out = encode(ad.constant(X), p)
    assert np.array_equal(out.value, np.maximum(X, 0.0))


def test_encode_gradients_match_fd():
    rng = np.random.default_rng(15)
    p = basic_params(rng, 4)
    X = ad.constant(rng.normal(size=(6, 4)) + 0.2)
    w = ad.constant(rng.normal(size=(6, 4)))

    def loss():
        return ad.sum_all(ad.mul(encode(X, p), w))

    assert ad.fd_check(loss, [p.enc_w, p.enc_b]) <= 1e-6


def test_decode_identity_returns_input():
    rng = np.random.default_rng(16)
    m = 3
    p = make_cell_params(rng, "sas", m, m, m)
    p.dec[0][0].value[...] = np.eye(m)
    p.dec[0][1].value[...] = 0.0
    Z = rng.normal(size=(4, m))
    out = decode(ad.constant(Z), "node_class", p)
    assert np.array_equal(out.value, Z)


def test_decode_graph_task_pools_first():
    rng = np.random.default_rng(17)
    p = make_cell_params(rng, "sas", 3, 3, 2)
    row = rng.normal(size=(1, 3))
    Z = np.tile(row, (5, 1))
    pooled = decode(ad.constant(Z), "graph_class", p)
    single = decode(ad.constant(row), "graph_class", p)
    assert pooled.shape == (1, 2)
    assert np.allclose(pooled.value, single.value, atol=1e-15)


def test_decode_gradients_match_fd():
    rng = np.random.default_rng(18)
    p = make_cell_params(rng, "sas", 3, 3, 2, dec_hidden=(5,))
    Z = ad.constant(rng.normal(size=(6, 3)))
    w = ad.constant(rng.normal(size=(6, 2)))

    def loss():
        return ad.sum_all(ad.mul(decode(Z, "node_class", p), w))

    params = [v for pair in p.dec for v in pair]
    assert ad.fd_check(loss, params) <= 1e-6


def test_param_count_depth_invariance_sas_and_eegnn():
    for kind in ("sas", "eegnn"):
        ten = param_count(kind, "node_class", 10, 10, 32, 2)
        twenty = param_count(kind, "node_class", 20, 10, 32, 2)
        assert ten == twenty
        assert ten["total"] == sum(
            ten[k] for k in ("encoder", "core", "decoder", "exit_heads"))


def test_param_count_eegnn_adds_heads():
    sas = param_count("sas", "node_class", 10, 10, 32, 2)
    ee = param_count("eegnn", "node_class", 10, 10, 32, 2)
    assert sas["exit_heads"] == 0
    assert ee["exit_heads"] > 0
    assert ee["total"] > sas["total"]


def test_param_count_gcn_strictly_increasing_in_depth():
    counts = [param_count("gcn", "node_class", L, 10, 32, 2)["total"]
              for L in (1, 5, 10, 20)]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_param_count_matches_live_model():
    rng = np.random.default_rng(19)
    for kind in ("sas", "gcn", "adgn"):
        p = make_cell_params(rng, kind, 7, 5, 3, depth=4, dec_hidden=(6,))
        live = sum(v.value.size for _, v in p.parameters())
        counted = param_count(kind, "node_class", 4, 7, 5, 3, dec_hidden=(6,))
        assert live == counted["total"] - counted["exit_heads"]


def test_weight_sharing_equals_sum_of_unshared_copies():
    # gradient with one shared (omega, w) over 3 layers == sum of grads of 3
    # untied copies holding identical values
    rng = np.random.default_rng(20)
    g = small_graph(8, seed=20)
    a = norm_adj(g)
    X = rng.normal(size=(8, 4))
    p = basic_params(rng, 4, tau=0.2)

    H = ad.constant(X)
    for _ in range(3):
        H = sas_step(H, a, p, tau=0.2)
    ad.backward(ad.sum_all(H))
    shared_go = p.omega_raw.grad.copy()
    shared_gw = p.w_raw.grad.copy()

    copies = []
    H = ad.constant(X)
    for _ in range(3):
        q = basic_params(np.random.default_rng(99), 4, tau=0.2)
        q.omega_raw.value[...] = p.omega_raw.value
        q.w_raw.value[...] = p.w_raw.value
        copies.append(q)
        H = sas_step(H, a, q, tau=0.2)
    ad.backward(ad.sum_all(H))
    sum_go = sum(q.omega_raw.grad for q in copies)
    sum_gw = sum(q.w_raw.grad for q in copies)
    assert np.allclose(shared_go, sum_go, atol=1e-12)
    assert np.allclose(shared_gw, sum_gw, atol=1e-12)


def test_map_norm_bounded_over_fifty_steps():
    # L1 norm of d h_i^T / d h_i^0 after T=50 steps stays in [1e-3, 1e3]:
    # the dynamics neither dissipate to zero nor blow up
    rng = np.random.default_rng(21)
    g = gen_sbm([10, 10], 0.5, 0.2, seed=21, feature_dim=4)
    a = norm_adj(g)
    p = basic_params(rng, 4, tau=0.1)
    H0 = rng.normal(size=(20, 4))
    node = 3

    def forward(h_row):
        H = H0.copy()
        H[node] = h_row
        Hd = ad.constant(H)
        for _ in range(50):
            Hd = sas_step(Hd, a, p, tau=0.1)
        return Hd.value[node]

    J = oracles.fd_jacobian(forward, H0[node].copy())
    norm = float(np.abs(J).sum(axis=0).max())   # induced L1 norm
    assert 1e-3 <= norm <= 1e3
