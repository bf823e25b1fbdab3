"""Adaptive-depth early exit: Gumbel sampling, exit heads, and the two loops.

Each layer, shared heads read the current node states and produce two-way
logits (continue vs exit) plus an inverse temperature. A straight-through
Gumbel-Softmax turns them into a hard exit decision and a soft non-exit
probability; the soft probability doubles as that agent's Euler step size
tau for the layer, so an agent close to exiting also moves in smaller steps.

Node mode freezes a per-node output row at the first hard exit and keeps
updating every node's state afterward (frozen rows only pin what the decoder
sees). Graph mode pools first, decides once per layer for the whole graph,
and stops integrating at the first exit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .cells import CellParams, edge_term, encode, sas_step
from .graphs import Graph, mean_adj, norm_adj

__all__ = [
    "GumbelSample",
    "ExitState",
    "ExitHeads",
    "sample_gumbel",
    "make_exit_heads",
    "confidence_logits",
    "inv_temperature",
    "gumbel_softmax_st",
    "eegnn_forward_node",
    "eegnn_forward_graph",
    "exit_distribution",
    "HEAD_KINDS",
    "EXIT_MODES",
]

HEAD_KINDS = ("mean_gnn", "mlp")
EXIT_MODES = ("train_sample", "eval_argmax")
_CLAMP = 1e-12


@dataclass
class GumbelSample:
    """Standard Gumbel draws plus the generator state they came from."""

    g: np.ndarray
    rng_state: dict


@dataclass
class ExitState:
    """Bookkeeping for one forward pass: who exited, when, and with what."""

    exited: np.ndarray
    exit_layer: np.ndarray
    exit_time: np.ndarray
    Z: np.ndarray
    L: int

    def __post_init__(self):
        n = self.exited.shape[0]
        if not (self.exit_layer.shape == (n,) and self.exit_time.shape == (n,)):
            raise ValueError("per-agent arrays must share one length")
        if ((self.exit_time < 0) | (self.exit_time > self.L)).any():
            raise ValueError("exit_time outside [0, L]")
        if ((self.exit_layer == self.L) == self.exited).any():
            raise ValueError("exit_layer == L must mean never exited")


@dataclass
class ExitHeads:
    """Shared confidence and temperature heads.

    kind mean_gnn stacks neighbor-mean layers (aggregate matrix, self matrix,
    bias) for per-node logits; kind mlp is a plain stack for pooled features.
    Both heads share the family and depth; f_c emits two logits, f_nu one raw
    value that becomes an inverse temperature via softplus + nu0.
    """

    kind: str
    fc_layers: list[tuple]
    fc_out: tuple[DiffValue, DiffValue]
    fnu_layers: list[tuple]
    fnu_out: tuple[DiffValue, DiffValue]
    nu0: float = 0.05

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if not 1 <= len(self.fc_layers) <= 3:
            raise ValueError(f"head depth must be 1..3, got {len(self.fc_layers)}")
        if len(self.fnu_layers) != len(self.fc_layers):
            raise ValueError("f_c and f_nu must share depth")
        if self.nu0 < 0:
            raise ValueError(f"nu0 must be >= 0, got {self.nu0}")

    def parameters(self) -> list[tuple[str, DiffValue]]:
        out = []
        for tag, layers, rd in (("fc", self.fc_layers, self.fc_out),
                                ("fnu", self.fnu_layers, self.fnu_out)):
            for i, layer in enumerate(layers):
                if self.kind == "mean_gnn":
                    wa, ws, b = layer
                    out += [(f"{tag}{i}_w_agg", wa), (f"{tag}{i}_w_self", ws),
                            (f"{tag}{i}_b", b)]
                else:
                    w, b = layer
                    out += [(f"{tag}{i}_w", w), (f"{tag}{i}_b", b)]
            out += [(f"{tag}_out_w", rd[0]), (f"{tag}_out_b", rd[1])]
        return out


def sample_gumbel(shape, rng: np.random.Generator) -> GumbelSample:
    """i.i.d. Gumbel(0,1) draws: -log(-log(u)) with u clamped off {0, 1}."""
    state = rng.bit_generator.state
    u = np.clip(rng.random(size=shape), _CLAMP, 1.0 - _CLAMP)
    return GumbelSample(g=-np.log(-np.log(u)), rng_state=state)


def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def make_exit_heads(rng: np.random.Generator, kind: str, in_dim: int,
                    hidden: int, depth: int, nu0: float = 0.05) -> ExitHeads:
    def backbone(tag, out_dim):
        layers = []
        d = in_dim
        for i in range(depth):
            if kind == "mean_gnn":
                layers.append((ad.leaf(_glorot(rng, d, hidden), f"{tag}{i}_w_agg"),
                               ad.leaf(_glorot(rng, d, hidden), f"{tag}{i}_w_self"),
                               ad.leaf(np.zeros((1, hidden)), f"{tag}{i}_b")))
            else:
                layers.append((ad.leaf(_glorot(rng, d, hidden), f"{tag}{i}_w"),
                               ad.leaf(np.zeros((1, hidden)), f"{tag}{i}_b")))
            d = hidden
        rd = (ad.leaf(_glorot(rng, hidden, out_dim), f"{tag}_out_w"),
              ad.leaf(np.zeros((1, out_dim)), f"{tag}_out_b"))
        return layers, rd

    fc_layers, fc_out = backbone("fc", 2)
    fnu_layers, fnu_out = backbone("fnu", 1)
    return ExitHeads(kind=kind, fc_layers=fc_layers, fc_out=fc_out,
                     fnu_layers=fnu_layers, fnu_out=fnu_out, nu0=nu0)


def _backbone_forward(H: DiffValue, layers, out_pair, kind: str, ma) -> DiffValue:
    cur = H
    for layer in layers:
        if kind == "mean_gnn":
            wa, ws, b = layer
            mixed = ad.add(ad.matmul_add(ad.dspmm(ma, cur), wa),
                           ad.matmul_add(cur, ws, b))
        else:
            w, b = layer
            mixed = ad.matmul_add(cur, w, b)
        cur = ad.activation_apply(mixed, "relu")
    return ad.matmul_add(cur, out_pair[0], out_pair[1])


def confidence_logits(H: DiffValue, heads: ExitHeads, ma=None) -> DiffValue:
    """Two-way continue/exit logits per agent row."""
    if heads.kind == "mean_gnn" and ma is None:
        raise ValueError("mean_gnn heads need the mean-adjacency operator")
    return _backbone_forward(H, heads.fc_layers, heads.fc_out, heads.kind, ma)


def inv_temperature(H: DiffValue, heads: ExitHeads, ma=None,
                    nu0: float | None = None) -> DiffValue:
    """Per-agent inverse temperature softplus(f_nu(H)) + nu0; always >= nu0."""
    if heads.kind == "mean_gnn" and ma is None:
        raise ValueError("mean_gnn heads need the mean-adjacency operator")
    raw = _backbone_forward(H, heads.fnu_layers, heads.fnu_out, heads.kind, ma)
    floor = heads.nu0 if nu0 is None else nu0
    if floor < 0:
        raise ValueError(f"nu0 must be >= 0, got {floor}")
    return ad.add_scalar(ad.activation_apply(raw, "softplus"), floor)


def gumbel_softmax_st(logits: DiffValue, inv_nu: DiffValue,
                      g: GumbelSample | None = None,
                      mode: str = "train_sample") -> tuple[DiffValue, DiffValue]:
    """Sharpened two-way sample: (soft probabilities, straight-through one-hot).

    Soft path: row-softmax((log_softmax(logits) + g) * inv_nu). The hard
    output's value is the exact one-hot of the soft argmax; its gradient is
    the soft path's gradient. eval_argmax drops the noise term entirely.
    """
    if mode not in EXIT_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if not np.isfinite(logits.value).all():
        raise ValueError("non-finite exit logits")
    scores = ad.row_log_softmax(logits)
    if mode == "train_sample":
        if g is None:
            raise ValueError("train_sample mode needs a GumbelSample")
        if g.g.shape != logits.shape:
            raise ValueError(f"noise shape {g.g.shape} must match logits {logits.shape}")
        scores = ad.add(scores, ad.constant(g.g))
    c_soft = ad.softmax_rows(ad.scale_rows(scores, inv_nu))
    hard = np.zeros_like(c_soft.value)
    hard[np.arange(hard.shape[0]), np.argmax(c_soft.value, axis=1)] = 1.0
    return c_soft, ad.straight_through(c_soft, hard)


def _prep_operators(g: Graph, params: CellParams, a, ma, be, need_ma):
    if a is None:
        a = norm_adj(g)
    if need_ma and ma is None:
        ma = mean_adj(g)
    et = None
    if params.edge_mode != "zero":
        if be is None:
            raise ValueError(f"edge_mode {params.edge_mode!r} needs the aggregated "
                             "edge features (be); pass incidence_aggregate output")
        et = edge_term(be, params)
    return a, ma, et


def eegnn_forward_node(g: Graph, params: CellParams, heads: ExitHeads | None,
                       L: int, rng: np.random.Generator | None = None,
                       mode: str = "train_sample", *, a=None, ma=None, be=None,
                       noise: list[GumbelSample] | None = None,
                       override_tau: float | None = None,
                       capture: list | None = None):
    """Per-node early-exit forward pass.

    Returns (Z, ExitState, per-layer records). Z row i is the node's state at
    its exit layer (before that layer's update), or the final state if it
    never exits; gradients flow into each frozen row from the layer where it
    froze. With override_tau set, the heads are bypassed entirely: no node
    exits and every layer uses the constant step, which reproduces the plain
    fixed-depth cell bit for bit.

    A node exiting at layer l has spent exit_time = sum of its tau over
    layers 0..l-1; the deciding layer's tau is not counted.
    """
    if L < 1:
        raise ValueError(f"depth must be >= 1, got {L}")
    if mode not in EXIT_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    ablated = override_tau is not None
    if not ablated and heads is None:
        raise ValueError("heads are required unless override_tau is given")
    need_ma = not ablated and heads.kind == "mean_gnn"
    a, ma, et = _prep_operators(g, params, a, ma, be, need_ma)
    n = g.n
    H = encode(ad.constant(g.X), params)
    if capture is not None:
        capture.append(H.value.copy())
    Z_cur = ad.constant(np.zeros_like(H.value))
    exited = np.zeros(n, dtype=bool)
    exit_layer = np.full(n, L, dtype=np.int64)
    exit_time = np.zeros(n)
    records = []
    for l in range(L):
        if ablated:
            exit_time += float(override_tau)
            records.append({"layer": l, "mean_tau": float(override_tau),
                            "new_exits": 0, "mean_inv_nu": float("nan")})
            H = sas_step(H, a, params, tau=override_tau, edge_term=et)
            if capture is not None:
                capture.append(H.value.copy())
            continue
        logits = confidence_logits(H, heads, ma)
        inv_nu = inv_temperature(H, heads, ma)
        smp = None
        if mode == "train_sample":
            smp = noise[l] if noise is not None else sample_gumbel((n, 2), rng)
        c_soft, c_hard = gumbel_softmax_st(logits, inv_nu, smp, mode)
        tau_col = ad.col_slice(c_soft, 0)
        new_exit = (c_hard.value[:, 1] == 1.0) & ~exited
        if new_exit.any():
            Z_cur = ad.where_rows(new_exit, H, Z_cur)
            exit_layer[new_exit] = l
            exited |= new_exit
        active = ~exited
        exit_time[active] += tau_col.value[active, 0]
        records.append({"layer": l, "mean_tau": float(tau_col.value.mean()),
                        "new_exits": int(new_exit.sum()),
                        "mean_inv_nu": float(inv_nu.value.mean())})
        H = sas_step(H, a, params, tau=tau_col, edge_term=et)
        if capture is not None:
            capture.append(H.value.copy())
    Z = ad.where_rows(exited, Z_cur, H) if exited.any() else H
    state = ExitState(exited=exited.copy(), exit_layer=exit_layer,
                      exit_time=exit_time, Z=Z.value.copy(), L=L)
    return Z, state, records


def eegnn_forward_graph(g: Graph, params: CellParams, heads: ExitHeads | None,
                        L: int, rng: np.random.Generator | None = None,
                        mode: str = "train_sample", *, a=None, be=None,
                        noise: list[GumbelSample] | None = None,
                        override_tau: float | None = None):
    """Whole-graph early-exit forward pass.

    Pools node states each layer, reads one continue/exit decision and one
    scalar tau for the whole graph, and returns the pooled state of the exit
    layer immediately (integration stops there). Never exiting returns the
    pooled final state.
    """
    if L < 1:
        raise ValueError(f"depth must be >= 1, got {L}")
    if mode not in EXIT_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    ablated = override_tau is not None
    if not ablated and heads is None:
        raise ValueError("heads are required unless override_tau is given")
    if not ablated and heads.kind != "mlp":
        raise ValueError("graph-level exits use mlp heads on pooled features")
    a, _, et = _prep_operators(g, params, a, None, be, need_ma=False)
    H = encode(ad.constant(g.X), params)
    exit_time = 0.0
    records = []
    pooled = None
    exited_at = None
    for l in range(L):
        pooled = ad.masked_mean_pool(H)
        if ablated:
            tau_val = float(override_tau)
            records.append({"layer": l, "tau": tau_val, "exited": False})
            exit_time += tau_val
            H = sas_step(H, a, params, tau=tau_val, edge_term=et)
            continue
        logits = confidence_logits(pooled, heads)
        inv_nu = inv_temperature(pooled, heads)
        smp = None
        if mode == "train_sample":
            smp = noise[l] if noise is not None else sample_gumbel((1, 2), rng)
        c_soft, c_hard = gumbel_softmax_st(logits, inv_nu, smp, mode)
        tau_scalar = ad.col_slice(c_soft, 0)
        if c_hard.value[0, 1] == 1.0:
            exited_at = l
            records.append({"layer": l, "tau": float(tau_scalar.value[0, 0]),
                            "exited": True})
            break
        exit_time += float(tau_scalar.value[0, 0])
        records.append({"layer": l, "tau": float(tau_scalar.value[0, 0]),
                        "exited": False})
        H = sas_step(H, a, params, tau=ad.tile_rows(tau_scalar, g.n),
                     edge_term=et)
    if exited_at is None:
        pooled = ad.masked_mean_pool(H)
    state = ExitState(
        exited=np.array([exited_at is not None]),
        exit_layer=np.array([L if exited_at is None else exited_at], dtype=np.int64),
        exit_time=np.array([exit_time]),
        Z=pooled.value.copy(),
        L=L)
    return pooled, state, records


def exit_distribution(states) -> dict:
    """Histogram and summary of exit layers/times over one or many states.

    Discrete layers are binned 0..L; continuous times come back as a sorted
    copy. min <= median <= max by construction.
    """
    if isinstance(states, ExitState):
        states = [states]
    states = list(states)
    if not states:
        raise ValueError("no exit states given")
    layers = np.concatenate([s.exit_layer for s in states])
    times = np.concatenate([s.exit_time for s in states])
    L = max(s.L for s in states)
    hist = np.bincount(layers, minlength=L + 1)
    return {
        "histogram": hist,
        "layers": layers,
        "times": np.sort(times),
        "min_layer": int(layers.min()),
        "median_layer": float(np.median(layers)),
        "max_layer": int(layers.max()),
        "mean_time": float(times.mean()),
    }
