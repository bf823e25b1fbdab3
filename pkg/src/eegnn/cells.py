"""Message-passing cells: the antisymmetric/symmetric update step and baselines.

The main cell is a residual Euler step

    H_next = H + tau * s1(-s2(H @ Oas) + edge_term + Anorm @ H @ Ws)

where Oas = Omega - Omega^T is exactly antisymmetric, Ws = (W + W^T)/2 is
exactly symmetric, and tau is either a scalar step size or a per-node column
of step sizes in [0, 1]. The same raw matrices are reused at every layer, so
depth does not add parameters. Baseline cells (gcn, graff, adgn) share the
encoder/decoder plumbing but use their own update rules; gcn keeps one weight
matrix per layer and no residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ACTIVATION_KINDS, DiffValue

__all__ = [
    "CellParams",
    "antisymmetrize",
    "symmetrize",
    "sas_step",
    "baseline_step",
    "edge_term",
    "encode",
    "decode",
    "make_cell_params",
    "param_count",
    "MODEL_KINDS",
    "EDGE_MODES",
    "TASKS",
]

MODEL_KINDS = ("sas", "eegnn", "gcn", "graff", "adgn")
EDGE_MODES = ("zero", "linear", "neg_relu")
TASKS = ("node_class", "graph_class", "graph_reg")


@dataclass
class CellParams:
    """Raw trainable matrices for one cell plus its fixed hyperparameters.

    The constrained weights are never stored: the antisymmetric coupling and
    the symmetric diffusion matrix are derived from omega_raw / w_raw on every
    forward pass, so the optimizer works on unconstrained storage while the
    algebraic invariants hold exactly.
    """

    omega_raw: DiffValue | None
    w_raw: DiffValue | None
    enc_w: DiffValue
    enc_b: DiffValue
    dec: list[tuple[DiffValue, DiffValue]]
    tau: float = 1.0
    sigma1: str = "relu_tanh"
    sigma2: str = "relu"
    edge_mode: str = "zero"
    w_e: DiffValue | None = None
    adgn_b: DiffValue | None = None
    gcn_ws: list[DiffValue] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        for kind in (self.sigma1, self.sigma2):
            if kind not in ACTIVATION_KINDS:
                raise ValueError(f"unknown activation kind {kind!r}")
        if self.edge_mode not in EDGE_MODES:
            raise ValueError(f"unknown edge_mode {self.edge_mode!r}")
        if self.edge_mode != "zero" and self.w_e is None:
            raise ValueError(f"edge_mode {self.edge_mode!r} requires w_e")
        for m in (self.omega_raw, self.w_raw):
            if m is not None and m.shape[0] != m.shape[1]:
                raise ValueError(f"cell weight must be square, got {m.shape}")

    @property
    def hidden(self) -> int:
        return self.enc_w.shape[1]

    def parameters(self) -> list[tuple[str, DiffValue]]:
        """Trainable leaves in a fixed, checkpoint-stable order."""
        out: list[tuple[str, DiffValue]] = []
        if self.omega_raw is not None:
            out.append(("omega_raw", self.omega_raw))
        if self.w_raw is not None:
            out.append(("w_raw", self.w_raw))
        if self.w_e is not None:
            out.append(("w_e", self.w_e))
        if self.adgn_b is not None:
            out.append(("adgn_b", self.adgn_b))
        for i, w in enumerate(self.gcn_ws):
            out.append((f"gcn_w{i}", w))
        out.append(("enc_w", self.enc_w))
        out.append(("enc_b", self.enc_b))
        for i, (w, b) in enumerate(self.dec):
            out.append((f"dec{i}_w", w))
            out.append((f"dec{i}_b", b))
        return out


def antisymmetrize(omega_raw: DiffValue) -> DiffValue:
    """Omega - Omega^T; exactly antisymmetric by construction."""
    if omega_raw.shape[0] != omega_raw.shape[1]:
        raise ValueError(f"expected a square matrix, got {omega_raw.shape}")
    return ad.sub(omega_raw, ad.transpose(omega_raw))


def symmetrize(w_raw: DiffValue) -> DiffValue:
    """(W + W^T) / 2; exactly symmetric by construction."""
    if w_raw.shape[0] != w_raw.shape[1]:
        raise ValueError(f"expected a square matrix, got {w_raw.shape}")
    return ad.smul(ad.add(w_raw, ad.transpose(w_raw)), 0.5)


def edge_term(be: DiffValue, p: CellParams) -> DiffValue | None:
    """Per-node edge contribution from the precomputed incidence aggregate BE.

    zero mode has no term; linear is BE @ We; neg_relu is -relu(BE @ We),
    which only ever subtracts and so cannot push the update's energy argument
    upward.
    """
    if p.edge_mode == "zero":
        return None
    lin = ad.matmul_add(be, p.w_e)
    if p.edge_mode == "linear":
        return lin
    return ad.neg(ad.activation_apply(lin, "relu"))


def _tau_column(tau, n: int, default: float) -> DiffValue:
    if tau is None:
        tau = default
    if isinstance(tau, DiffValue):
        if tau.shape != (n, 1):
            raise ValueError(f"per-node tau must be {n} x 1, got {tau.shape}")
        tv = tau.value
        if (tv < 0.0).any() or (tv > 1.0).any():
            raise ValueError("per-node tau outside [0, 1]")
        return tau
    if isinstance(tau, np.ndarray):
        return _tau_column(ad.constant(tau.reshape(n, 1)), n, default)
    t = float(tau)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"tau outside [0, 1]: {t}")
    return ad.constant(np.full((n, 1), t))


def sas_step(H: DiffValue, a, p: CellParams, tau=None,
             edge_term: DiffValue | None = None) -> DiffValue:
    """One Euler step of the antisymmetric/symmetric cell.

    tau may be a scalar, an n x 1 array, or an n x 1 DiffValue (the adaptive
    per-node step). Rows with tau == 0 come back bit-identical to their input,
    not merely numerically close.
    """
    if p.omega_raw is None or p.w_raw is None:
        raise ValueError("sas_step requires omega_raw and w_raw")
    if H.shape[1] != p.omega_raw.shape[0]:
        raise ValueError(
            f"feature width {H.shape[1]} does not match cell width {p.omega_raw.shape[0]}")
    if p.edge_mode == "zero":
        if edge_term is not None:
            raise ValueError("edge_term supplied but edge_mode is zero")
    elif edge_term is None:
        raise ValueError(f"edge_mode {p.edge_mode!r} requires an edge_term")
    oas = antisymmetrize(p.omega_raw)
    ws = symmetrize(p.w_raw)
    inner = ad.neg(ad.activation_apply(ad.matmul_add(H, oas), p.sigma2))
    if edge_term is not None:
        inner = ad.add(inner, edge_term)
    inner = ad.add(inner, ad.dspmm(a, ad.matmul_add(H, ws)))
    upd = ad.activation_apply(inner, p.sigma1)
    tcol = _tau_column(tau, H.shape[0], p.tau)
    return ad.add_scaled_rows(H, upd, tcol)


def baseline_step(H: DiffValue, a, p: CellParams, kind: str,
                  layer: int = 0) -> DiffValue:
    """One layer of a reference cell.

    gcn: sigma(Anorm @ H @ W_layer), independent weights per layer, no
    residual. graff: residual Euler step with both matrices symmetrized.
    adgn: residual tanh step with the antisymmetrized coupling, a plain
    (unsymmetrized) diffusion matrix, and a bias.
    """
    if kind == "gcn":
        if not 0 <= layer < len(p.gcn_ws):
            raise ValueError(f"no gcn weight for layer {layer}")
        return ad.activation_apply(
            ad.dspmm(a, ad.matmul_add(H, p.gcn_ws[layer])), p.sigma1)
    if p.omega_raw is None or p.w_raw is None:
        raise ValueError(f"{kind} step requires omega_raw and w_raw")
    if kind == "graff":
        inner = ad.add(ad.matmul_add(H, symmetrize(p.omega_raw)),
                       ad.dspmm(a, ad.matmul_add(H, symmetrize(p.w_raw))))
        return ad.add(H, ad.smul(ad.activation_apply(inner, p.sigma1), p.tau))
    if kind == "adgn":
        if p.adgn_b is None:
            raise ValueError("adgn step requires adgn_b")
        inner = ad.matmul_add(H, antisymmetrize(p.omega_raw), p.adgn_b)
        inner = ad.add(inner, ad.dspmm(a, ad.matmul_add(H, p.w_raw)))
        return ad.add(H, ad.smul(ad.activation_apply(inner, "tanh"), p.tau))
    raise ValueError(f"unknown baseline kind {kind!r}")


def encode(X: DiffValue, p: CellParams) -> DiffValue:
    """Input features to cell width: relu(X @ enc_w + enc_b)."""
    if X.shape[1] != p.enc_w.shape[0]:
        raise ValueError(
            f"feature dim {X.shape[1]} does not match encoder {p.enc_w.shape}")
    return ad.activation_apply(ad.matmul_add(X, p.enc_w, p.enc_b), "relu")


def decode(Z: DiffValue, task: str, p: CellParams, mask=None) -> DiffValue:
    """Readout head: per-row MLP for node tasks, pooled MLP for graph tasks.

    Hidden decoder layers use relu; the last layer is linear (logits or
    regression values).
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    out = Z
    if task != "node_class":
        out = ad.masked_mean_pool(out, mask)
    for i, (w, b) in enumerate(p.dec):
        out = ad.matmul_add(out, w, b)
        if i + 1 < len(p.dec):
            out = ad.activation_apply(out, "relu")
    return out


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def make_cell_params(rng: np.random.Generator, kind: str, feat_dim: int,
                     hidden: int, out_dim: int, *, depth: int = 1,
                     tau: float = 1.0, sigma1: str = "relu_tanh",
                     sigma2: str = "relu", edge_mode: str = "zero",
                     edge_dim: int = 0, dec_hidden: tuple[int, ...] = ()) -> CellParams:
    """Glorot-initialized parameters for one model kind.

    gcn allocates depth independent layer matrices and no shared cell pair;
    every other kind allocates the shared pair once regardless of depth.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    shared = kind != "gcn"
    omega = ad.leaf(_glorot(rng, hidden, hidden), "omega_raw") if shared else None
    w = ad.leaf(_glorot(rng, hidden, hidden), "w_raw") if shared else None
    gcn_ws = []
    if kind == "gcn":
        gcn_ws = [ad.leaf(_glorot(rng, hidden, hidden), f"gcn_w{i}")
                  for i in range(depth)]
    w_e = None
    if edge_mode != "zero":
        if edge_dim <= 0:
            raise ValueError(f"edge_mode {edge_mode!r} requires edge_dim > 0")
        w_e = ad.leaf(_glorot(rng, edge_dim, hidden), "w_e")
    dec = []
    dims = (hidden, *dec_hidden, out_dim)
    for i in range(len(dims) - 1):
        dec.append((ad.leaf(_glorot(rng, dims[i], dims[i + 1]), f"dec{i}_w"),
                    ad.leaf(np.zeros((1, dims[i + 1])), f"dec{i}_b")))
    return CellParams(
        omega_raw=omega,
        w_raw=w,
        enc_w=ad.leaf(_glorot(rng, feat_dim, hidden), "enc_w"),
        enc_b=ad.leaf(np.zeros((1, hidden)), "enc_b"),
        dec=dec,
        tau=tau,
        sigma1=sigma1,
        sigma2=sigma2,
        edge_mode=edge_mode,
        w_e=w_e,
        adgn_b=ad.leaf(np.zeros((1, hidden)), "adgn_b") if kind == "adgn" else None,
        gcn_ws=gcn_ws,
    )


def _affine_chain(dims: tuple[int, ...]) -> int:
    return sum((dims[i] + 1) * dims[i + 1] for i in range(len(dims) - 1))


def _backbone_count(task: str, in_dim: int, hidden: int, depth: int,
                    out_dim: int) -> int:
    # node-task heads aggregate neighbor means, so each hidden layer carries
    # two matrices (aggregate + self) plus a bias; pooled heads are plain MLPs
    mats = 2 if task == "node_class" else 1
    total = 0
    d = in_dim
    for _ in range(depth):
        total += mats * d * hidden + hidden
        d = hidden
    return total + hidden * out_dim + out_dim


def param_count(kind: str, task: str, depth: int, feat_dim: int, hidden: int,
                out_dim: int, *, edge_mode: str = "zero", edge_dim: int = 0,
                dec_hidden: tuple[int, ...] = (), exit_hidden: int = 16,
                exit_depth: int = 1) -> dict[str, int]:
    """Exact scalar-parameter count, broken down by component.

    The shared-cell kinds (sas, eegnn, graff, adgn) have a core count that
    does not depend on depth; gcn's core is depth * hidden^2. The raw storage
    is what is counted: the symmetrized diffusion matrix stores hidden^2
    scalars even though only hidden*(hidden+1)/2 of its derived entries are
    unique.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    encoder = feat_dim * hidden + hidden
    if kind == "gcn":
        core = depth * hidden * hidden
    elif kind == "adgn":
        core = 2 * hidden * hidden + hidden
    else:
        core = 2 * hidden * hidden
    if edge_mode != "zero" and kind in ("sas", "eegnn"):
        core += edge_dim * hidden
    decoder = _affine_chain((hidden, *dec_hidden, out_dim))
    heads = 0
    if kind == "eegnn":
        heads = (_backbone_count(task, hidden, exit_hidden, exit_depth, 2)
                 + _backbone_count(task, hidden, exit_hidden, exit_depth, 1))
    counts = {"encoder": encoder, "core": core, "decoder": decoder,
              "exit_heads": heads}
    counts["total"] = sum(counts.values())
    return counts
