"""Executable checks of the cell's claimed dynamics.

Four families: energy accounting (the quadratic edge functional and the
degree-normalized Dirichlet energy), spectral stability of the step's
Jacobian, layer-wise sensitivity of deep stacks, and counterfactual exit
quality. Each check reports numbers; tolerance judgments live with the
callers (test suite and CLI), except ToleranceError which the CLI maps to
its own exit code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import _act_derivative, _act_forward
from .cells import CellParams, baseline_step, decode, edge_term, encode, \
    make_cell_params, sas_step
from .eig import eigvals
from .graphs import Graph, arc_rows, degrees, gen_sbm, incidence_aggregate, \
    norm_adj, pair_index
from .training import Model, evaluate, forward_node, metric_eval, train_run

__all__ = [
    "ToleranceError",
    "Trace",
    "SpectrumReport",
    "dirichlet_energy",
    "energy_functional",
    "descent_trace",
    "sas_jacobian",
    "sensitivity",
    "depth_retention",
    "oracle_exit_eval",
    "emit_trace",
    "read_trace",
    "dirichlet_traces",
    "spectrum_suite",
    "descent_suite",
]

DESCENT_SLACK = 1e-8
SKEW_TOL = 1e-12
MAX_RE_TOL = 1e-8


class ToleranceError(RuntimeError):
    """A diagnostic exceeded its tolerance; the CLI exits 3 on this."""


@dataclass
class Trace:
    """A per-layer series with provenance metadata."""

    name: str
    layers: np.ndarray
    values: np.ndarray
    metadata: dict

    def __post_init__(self):
        self.layers = np.asarray(self.layers, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.layers.shape != self.values.shape:
            raise ValueError("layers and values must have equal length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("trace values must be finite")


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    max_re: float
    skew_residual: float


def _finite_matrix(H, n: int) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != n:
        raise ValueError(f"expected an {n}-row matrix, got shape {H.shape}")
    if not np.all(np.isfinite(H)):
        raise ValueError("matrix contains non-finite entries")
    return H


def dirichlet_energy(H, g: Graph) -> float:
    """Sum over directed arcs of || h_v/sqrt(d_v + 1) - h_u/sqrt(d_u + 1) ||^2.

    The +1 in the normalization is part of this quantity's definition and is
    not the plain degree normalization the adjacency uses.
    """
    H = _finite_matrix(H, g.n)
    if g.n_arcs == 0:
        return 0.0
    d = degrees(g).astype(np.float64)
    scaled = H / np.sqrt(d + 1.0)[:, None]
    diff = scaled[g.col_indices] - scaled[arc_rows(g)]
    return float((diff * diff).sum())


def energy_functional(H, W_s, g: Graph) -> float:
    """Quadratic edge functional: -sum over arcs of (d_u d_v)^-1/2 <h_u, W_s h_v>.

    Rejects an asymmetric W_s outright: symmetry is what makes this a valid
    energy (its value is invariant under swapping the arc direction).
    """
    H = _finite_matrix(H, g.n)
    W_s = np.asarray(W_s, dtype=np.float64)
    if W_s.shape != (H.shape[1], H.shape[1]):
        raise ValueError(f"W_s must be {H.shape[1]} square, got {W_s.shape}")
    residual = float(np.abs(W_s - W_s.T).max()) if W_s.size else 0.0
    if residual > SKEW_TOL:
        raise ValueError(f"W_s symmetry residual {residual:.3e} exceeds {SKEW_TOL}")
    if g.n_arcs == 0:
        return 0.0
    rows = arc_rows(g)
    cols = g.col_indices
    d = degrees(g).astype(np.float64)
    weights = 1.0 / np.sqrt(d[rows] * d[cols])
    couple = (H[rows] * (H @ W_s)[cols]).sum(axis=1)
    return float(-(weights * couple).sum())


def _premises_hold(params: CellParams, tau: float) -> bool:
    return (params.sigma1 == "relu_tanh" and params.sigma2 == "relu"
            and tau <= 0.05 and params.edge_mode != "linear")


def descent_trace(g: Graph, params: CellParams, H0, steps: int, tau: float,
                  be=None) -> Trace:
    """Energy series along the step map, with every increase logged.

    metadata["violations"] lists [step, increase] pairs past the 1e-8 slack;
    metadata["premises_hold"] records whether the descent guarantee applies
    to this configuration (saturating sigma1, nonnegative sigma2, tau at most
    0.05, and no linear edge term). Premise-violating configurations still
    run; their violations are data, not errors.
    """
    H0 = _finite_matrix(H0, g.n)
    a = norm_adj(g)
    et = None
    if params.edge_mode != "zero":
        if be is None:
            if g.E_feat is None:
                raise ValueError("edge_mode needs edge features or a be matrix")
            be = ad.constant(incidence_aggregate(g, g.E_feat))
        et = edge_term(be, params)
    w = params.w_raw.value
    ws = 0.5 * (w + w.T)
    values = [energy_functional(H0, ws, g)]
    violations = []
    H = H0
    for t in range(1, steps + 1):
        H = sas_step(ad.constant(H), a, params, tau=tau, edge_term=et).value
        values.append(energy_functional(H, ws, g))
        rise = values[-1] - values[-2]
        if rise > DESCENT_SLACK:
            violations.append([t, float(rise)])
    return Trace(
        name="energy_functional",
        layers=np.arange(steps + 1),
        values=np.array(values),
        metadata={"tau": tau, "edge_mode": params.edge_mode,
                  "sigma1": params.sigma1, "sigma2": params.sigma2,
                  "premises_hold": _premises_hold(params, tau),
                  "violations": violations})


def sas_jacobian(params: CellParams, h_point, neighbor_term=None) -> SpectrumReport:
    """Spectrum of the step map's state Jacobian at one linearization point.

    The Jacobian is -diag(s1'(u) * s2'(v)) @ (Omega - Omega^T) with
    v = h @ Oas and u = -s2(v) + neighbor_term. The report also carries the
    skewness residual of D (Oas) D with D = sqrt of the absolute diagonal
    factors: similarity to a skew matrix is what pins the eigenvalues to the
    imaginary axis, so the residual is computed in a way that makes exact
    zero achievable (shared symmetric prefactor times the exact
    antisymmetric difference).
    """
    if params.omega_raw is None:
        raise ValueError("sas_jacobian requires omega_raw")
    m = params.omega_raw.shape[0]
    if m > 32:
        raise ValueError(f"dense eigensolver budget is width <= 32, got {m}")
    h = np.asarray(h_point, dtype=np.float64).reshape(-1)
    if h.shape != (m,):
        raise ValueError(f"h_point must have length {m}, got {h.shape}")
    phi = np.zeros(m) if neighbor_term is None else \
        np.asarray(neighbor_term, dtype=np.float64).reshape(-1)
    if phi.shape != (m,):
        raise ValueError(f"neighbor_term must have length {m}")
    ov = params.omega_raw.value
    oas = ov - ov.T
    v = h @ oas
    u = -_act_forward(v, params.sigma2) + phi
    dfac = _act_derivative(u, params.sigma1) * _act_derivative(v, params.sigma2)
    J = -(dfac[:, None] * oas)
    dtil = np.sqrt(np.abs(dfac))
    M = np.outer(dtil, dtil) * oas
    residual = float(np.abs(M + M.T).max()) if m else 0.0
    lam = eigvals(J)
    return SpectrumReport(eigenvalues=lam,
                          max_re=float(np.abs(lam.real).max()) if m else 0.0,
                          skew_residual=residual)


def sensitivity(model: Model, g: Graph, layer: int) -> float:
    """Exact L1 influence of layer-l states on final states over adjacent pairs.

    S_l = sum over directed arcs (v,u) of ||d h_v^L / d h_u^l||_1, computed by
    seeding one reverse sweep per final-state coordinate. Cost is n * width
    sweeps, so instances are capped at n * width <= 2000. Only fixed-depth
    model kinds are supported; adaptive-exit stacks have no single layer-l
    state to differentiate against.
    """
    cfg = model.cfg
    if cfg.model == "eegnn":
        raise ValueError("sensitivity needs a fixed-depth model kind")
    if not 0 <= layer <= cfg.depth:
        raise ValueError(f"layer must lie in 0..{cfg.depth}, got {layer}")
    n, width = g.n, cfg.hidden
    if n * width > 2000:
        raise ValueError(f"instance too large: n * width = {n * width} > 2000")
    a = norm_adj(g)
    et = None
    if cfg.edge_mode != "zero":
        if g.E_feat is None:
            raise ValueError("edge_mode needs edge features on the graph")
        et = edge_term(ad.constant(incidence_aggregate(g, g.E_feat)), model.params)
    H = encode(ad.constant(g.X), model.params)
    taped = [H]
    for l in range(cfg.depth):
        if cfg.model == "sas":
            H = sas_step(H, a, model.params, tau=model.params.tau, edge_term=et)
        else:
            H = baseline_step(H, a, model.params, cfg.model, layer=l)
        taped.append(H)
    root, probe = taped[-1], taped[layer]
    total = 0.0
    seed = np.zeros((n, width))
    for v in range(n):
        nbrs = g.col_indices[g.row_offsets[v]:g.row_offsets[v + 1]]
        if nbrs.size == 0:
            continue
        for c in range(width):
            seed[v, c] = 1.0
            ad.backward(root, seed=seed)
            total += float(np.abs(probe.grad[nbrs]).sum())
            seed[v, c] = 0.0
    return total


def depth_retention(data, kinds, depths, base_cfg) -> list[dict]:
    """Test metric for every (kind, depth) pair, each trained from scratch."""
    rows = []
    for kind in kinds:
        for L in depths:
            cfg = replace(base_cfg, model=kind, depth=L)
            model, _ = train_run(cfg, data)
            rec = evaluate(model, data, "test")
            rows.append({"kind": kind, "depth": L, "metric": cfg.metric,
                         "value": rec["value"]})
    return rows


def _classes_from_logits(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(np.int64)
    return logits.argmax(axis=1)


def oracle_exit_eval(model: Model, g: Graph) -> tuple[float, float]:
    """Counterfactual best-exit accuracy vs plain final-layer accuracy.

    Decodes the state at every layer; a node is credited as correct if any
    layer's decoded class matches its label (taking the earliest such layer),
    falling back to the final layer's class otherwise. The first return value
    therefore never falls below the second. Computed on the test split when
    masks are present.
    """
    if model.cfg.task != "node_class":
        raise ValueError("oracle exit analysis is defined for node tasks")
    if g.y is None:
        raise ValueError("dataset has no labels")
    hs: list = []
    forward_node(model, g, "eval_argmax", capture=hs)
    y = np.asarray(g.y, dtype=np.int64).reshape(-1)
    sel = np.ones(g.n, dtype=bool)
    if g.masks is not None and "test" in g.masks:
        sel = g.masks["test"]
    per_layer = [_classes_from_logits(
        decode(ad.constant(h), "node_class", model.params).value) for h in hs]
    final_classes = per_layer[-1]
    correct_any = np.zeros(g.n, dtype=bool)
    for classes in per_layer:
        correct_any |= classes == y
    oracle_classes = np.where(correct_any, y, final_classes)
    oracle = metric_eval(oracle_classes[sel], y[sel], "accuracy")
    final = metric_eval(final_classes[sel], y[sel], "accuracy")
    return oracle, final


def dirichlet_traces(model: Model, g: Graph) -> tuple[Trace, Trace]:
    """Per-layer Dirichlet energy of a forward pass, as sum and per-arc mean."""
    hs: list = []
    forward_node(model, g, "eval_argmax", capture=hs)
    sums = np.array([dirichlet_energy(h, g) for h in hs])
    arcs = max(g.n_arcs, 1)
    layers = np.arange(len(hs))
    meta = {"model": model.cfg.model, "depth": model.cfg.depth}
    return (Trace("dirichlet_sum", layers, sums, dict(meta)),
            Trace("dirichlet_mean", layers, sums / arcs, dict(meta)))


# ------------------------------------------------------------------- suites

def spectrum_suite(n_configs: int = 100, width_lo: int = 2, width_hi: int = 16,
                   seed: int = 0) -> dict:
    """Jacobian spectra at random params/points; returns the worst residuals."""
    rng = np.random.default_rng(seed)
    worst_re = 0.0
    worst_skew = 0.0
    for _ in range(n_configs):
        m = int(rng.integers(width_lo, width_hi + 1))
        params = make_cell_params(rng, "sas", m, m, m)
        h = rng.normal(size=m)
        phi = rng.normal(size=m)
        rep = sas_jacobian(params, h, neighbor_term=phi)
        worst_re = max(worst_re, rep.max_re)
        worst_skew = max(worst_skew, rep.skew_residual)
    return {"configs": n_configs, "max_re_lambda": worst_re,
            "max_skew_residual": worst_skew,
            "pass": worst_re <= MAX_RE_TOL and worst_skew <= SKEW_TOL}


def descent_suite(n_cases: int = 100, steps: int = 50, tau: float = 0.05,
                  edge_modes=("zero", "neg_relu"), seed: int = 0) -> dict:
    """Random-instance energy descent; returns the total violation count."""
    rng = np.random.default_rng(seed)
    total = 0
    cases = 0
    for mode in edge_modes:
        done = 0
        while done < n_cases:
            n = int(rng.integers(6, 16))
            m = int(rng.integers(2, 9))
            g = gen_sbm((n // 2, n - n // 2), 0.6, 0.3,
                        int(rng.integers(1 << 31)), feature_dim=m)
            if g.n_arcs == 0 or np.any(degrees(g) == 0):
                continue
            done += 1
            edge_dim = 3
            if mode != "zero":
                raw = rng.normal(size=(g.n_arcs, edge_dim))
                idx = pair_index(g)
                keep = np.arange(g.n_arcs) <= idx
                g.E_feat = np.where(keep[:, None], raw, raw[idx])
            params = make_cell_params(rng, "sas", m, m, m, tau=tau,
                                      edge_mode=mode, edge_dim=edge_dim)
            H0 = rng.normal(size=(g.n, m))
            tr = descent_trace(g, params, H0, steps, tau)
            total += len(tr.metadata["violations"])
            cases += 1
    return {"cases": cases, "violations": total, "steps": steps, "tau": tau,
            "pass": total == 0}


# ------------------------------------------------------------------- trace io

def emit_trace(trace: Trace, path) -> None:
    """Two-column CSV with '#'-prefixed metadata header lines."""
    lines = [f"# name: {trace.name}"]
    for key in sorted(trace.metadata):
        lines.append(f"# {key}: {json.dumps(trace.metadata[key], sort_keys=True)}")
    lines.append("layer,value")
    for l, v in zip(trace.layers, trace.values):
        lines.append(f"{int(l)},{float(v)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace(path) -> Trace:
    """Inverse of emit_trace; layer/value arrays round-trip exactly."""
    name = ""
    metadata = {}
    layers = []
    values = []
    with open(path) as fh:
        body = False
        for raw in fh:
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("# "):
                key, _, val = line[2:].partition(": ")
                if key == "name":
                    name = val
                else:
                    try:
                        metadata[key] = json.loads(val)
                    except json.JSONDecodeError:
                        metadata[key] = val
                continue
            if not body:
                if line != "layer,value":
                    raise ValueError(f"unexpected trace header {line!r}")
                body = True
                continue
            l, _, v = line.partition(",")
            layers.append(int(l))
            values.append(float(v))
    if not body:
        raise ValueError("trace file has no column header")
    return Trace(name=name, layers=np.array(layers, dtype=np.int64),
                 values=np.array(values), metadata=metadata)
