"""Graph storage, normalization, synthetic generators, and JSON I/O.

Undirected graphs are stored as CSR over directed arcs: every undirected edge
{u,v} appears as the two arcs (u,v) and (v,u). Per-arc edge features duplicate
the same row onto both arcs of a pair, which keeps one storage layout for both
the normalized adjacency product and the incidence aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass
import json

import numpy as np

__all__ = [
    "Graph",
    "ArcMatrix",
    "NormAdj",
    "canonicalize",
    "make_graph",
    "validate_graph",
    "degrees",
    "arc_list",
    "arc_rows",
    "pair_index",
    "norm_adj",
    "mean_adj",
    "spmm",
    "incidence_aggregate",
    "edge_homophily",
    "gen_minesweeper_grid",
    "gen_sbm",
    "save_graph",
    "load_graph",
    "load_graph_fields",
]


@dataclass
class Graph:
    """CSR-stored undirected graph with features, labels, and split masks.

    Invariants (enforced by canonicalize + validate_graph):
    no self-loops; arc (u,v) present iff (v,u) present; col_indices sorted
    ascending within each row; paired arcs carry identical edge-feature rows.
    """

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    X: np.ndarray
    E_feat: np.ndarray | None = None
    y: np.ndarray | None = None
    masks: dict[str, np.ndarray] | None = None

    @property
    def n_arcs(self) -> int:
        return int(self.col_indices.shape[0])


@dataclass
class ArcMatrix:
    """Sparse matrix living on a symmetric CSR arc pattern.

    values[k] weights arc k in the forward product; values_t[k] weights arc k
    in the transposed product (equal to values for symmetric matrices).
    """

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    values_t: np.ndarray


@dataclass
class NormAdj(ArcMatrix):
    """Symmetric degree-normalized adjacency: values[k] = (d_u * d_v)^-0.5.

    Zero diagonal (the pattern has no self-loops); all values in (0, 1].
    """


def canonicalize(edges, n: int) -> Graph:
    """Build a canonical CSR skeleton from an edge list.

    Self-loops are dropped, duplicates merged, and the reverse of every arc is
    added, so the result satisfies all Graph invariants. Node features default
    to an empty n x 0 matrix.
    """
    pairs = set()
    for u, v in edges:
        u = int(u)
        v = int(v)
        if not (0 <= u < n and 0 <= v < n):
            raise ValueError(f"edge ({u},{v}) out of range for n={n}")
        if u == v:
            continue
        pairs.add((u, v))
        pairs.add((v, u))
    if pairs:
        arr = np.array(sorted(pairs), dtype=np.int64)
        src, dst = arr[:, 0], arr[:, 1]
    else:
        src = np.zeros(0, dtype=np.int64)
        dst = np.zeros(0, dtype=np.int64)
    row_offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(row_offsets, src + 1, 1)
    row_offsets = np.cumsum(row_offsets)
    return Graph(n=n, row_offsets=row_offsets, col_indices=dst,
                 X=np.zeros((n, 0)))


def make_graph(edges, n, X, E_edge=None, y=None, masks=None) -> Graph:
    """Canonicalize an edge list and attach features, labels, and masks.

    E_edge, when given, maps each canonical undirected edge (u < v) to one
    feature row; the row is duplicated onto both arcs of the pair.
    """
    g = canonicalize(edges, n)
    g.X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    if g.X.shape[0] != n:
        raise ValueError(f"X has {g.X.shape[0]} rows, expected n={n}")
    if E_edge is not None:
        E_edge = np.asarray(E_edge, dtype=np.float64)
        rows = arc_rows(g)
        und = {}
        pos = 0
        for u, v in zip(rows, g.col_indices):
            key = (min(u, v), max(u, v))
            if key not in und:
                und[key] = pos
                pos += 1
        if E_edge.shape[0] != pos:
            raise ValueError(
                f"E_edge has {E_edge.shape[0]} rows, expected one per edge ({pos})")
        E = np.zeros((g.n_arcs, E_edge.shape[1]))
        for k, (u, v) in enumerate(zip(rows, g.col_indices)):
            E[k] = E_edge[und[(min(u, v), max(u, v))]]
        g.E_feat = E
    if y is not None:
        y = np.asarray(y)
        g.y = y
    if masks is not None:
        g.masks = {k: np.asarray(m, dtype=bool) for k, m in masks.items()}
    return g


def degrees(g: Graph) -> np.ndarray:
    return np.diff(g.row_offsets)


def arc_rows(g) -> np.ndarray:
    """Source node of each arc, in CSR order."""
    return np.repeat(np.arange(g.n, dtype=np.int64), np.diff(g.row_offsets))


def arc_list(g: Graph):
    """Directed arcs as (u, v) pairs in CSR order."""
    return list(zip(arc_rows(g).tolist(), g.col_indices.tolist()))


def pair_index(g) -> np.ndarray:
    """For each arc k = (u,v), the CSR index of the reverse arc (v,u)."""
    rows = arc_rows(g)
    keys = rows * g.n + g.col_indices          # ascending in CSR order
    rev = g.col_indices * g.n + rows
    idx = np.searchsorted(keys, rev)
    if not np.array_equal(keys[idx], rev):
        raise ValueError("arc set is not symmetric")
    return idx


def validate_graph(g: Graph) -> None:
    """Check every structural invariant; raises ValueError on the first breach."""
    if g.row_offsets.shape != (g.n + 1,):
        raise ValueError("row_offsets length must be n+1")
    if g.row_offsets[0] != 0 or np.any(np.diff(g.row_offsets) < 0):
        raise ValueError("row_offsets must start at 0 and be non-decreasing")
    if g.row_offsets[-1] != g.col_indices.shape[0]:
        raise ValueError("row_offsets[-1] must equal the arc count")
    rows = arc_rows(g)
    if np.any(rows == g.col_indices):
        raise ValueError("self-loop found")
    for u in range(g.n):
        seg = g.col_indices[g.row_offsets[u]:g.row_offsets[u + 1]]
        if np.any(np.diff(seg) <= 0):
            raise ValueError(f"col_indices not strictly sorted in row {u}")
    pi = pair_index(g)   # raises if any reverse arc is missing
    if g.X.shape[0] != g.n:
        raise ValueError("X row count must equal n")
    if g.E_feat is not None:
        if g.E_feat.shape[0] != g.n_arcs:
            raise ValueError("E_feat must carry one row per arc")
        if not np.array_equal(g.E_feat, g.E_feat[pi]):
            raise ValueError("paired arcs must carry identical edge-feature rows")
    if g.y is not None and g.y.ndim == 1 and g.y.shape[0] != g.n:
        raise ValueError("node-level y must have length n")
    if g.masks is not None:
        for name in ("train", "val", "test"):
            if name not in g.masks:
                raise ValueError(f"masks missing split '{name}'")
            if g.masks[name].shape != (g.n,):
                raise ValueError(f"mask '{name}' must have length n")


def norm_adj(g: Graph) -> NormAdj:
    """Degree-normalized adjacency of a canonical graph.

    Isolated nodes are a hard error: the normalization is undefined at degree
    zero and silently adding self-loops would break the no-self-loop premise
    the stability diagnostics rely on. Drop such nodes before calling.
    """
    d = degrees(g)
    if np.any(d == 0):
        bad = int(np.flatnonzero(d == 0)[0])
        raise ValueError(f"isolated node {bad} has degree 0; drop it before norm_adj")
    rows = arc_rows(g)
    vals = 1.0 / np.sqrt(d[rows] * d[g.col_indices])
    return NormAdj(n=g.n, row_offsets=g.row_offsets, col_indices=g.col_indices,
                   values=vals, values_t=vals)


def mean_adj(g: Graph) -> ArcMatrix:
    """Row-stochastic neighbor-mean operator: values[k] = 1/d_u for arc (u,v)."""
    d = degrees(g)
    if np.any(d == 0):
        bad = int(np.flatnonzero(d == 0)[0])
        raise ValueError(f"isolated node {bad} has degree 0; drop it before mean_adj")
    rows = arc_rows(g)
    vals = 1.0 / d[rows].astype(np.float64)
    vals_t = vals[pair_index(g)]
    return ArcMatrix(n=g.n, row_offsets=g.row_offsets, col_indices=g.col_indices,
                     values=vals, values_t=vals_t)


def spmm(a, H: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Sparse arc-matrix times dense matrix.

    out[u] = sum over arcs (u,v) of values[k] * H[v], summed in CSR arc order
    so results are bit-reproducible run to run.
    """
    H = np.asarray(H)
    if H.shape[0] != a.n:
        raise ValueError(f"H has {H.shape[0]} rows, expected {a.n}")
    vals = a.values_t if transpose else a.values
    contrib = vals[:, None] * H[a.col_indices]
    out = np.zeros((a.n, H.shape[1]))
    # reduceat only at non-empty rows; empty rows would otherwise pick up a
    # stray element instead of an empty sum.
    nz = np.flatnonzero(np.diff(a.row_offsets) > 0)
    if nz.size:
        out[nz] = np.add.reduceat(contrib, a.row_offsets[nz], axis=0)
    return out


def incidence_aggregate(g: Graph, E_feat: np.ndarray) -> np.ndarray:
    """Per-node sum of incident edge features (each edge counted once per endpoint).

    Implemented as a sum over each node's stored arcs, which equals the dense
    incidence product because paired arcs carry identical rows.
    """
    E_feat = np.asarray(E_feat)
    if E_feat.shape[0] != g.n_arcs:
        raise ValueError(f"E_feat has {E_feat.shape[0]} rows, expected {g.n_arcs}")
    out = np.zeros((g.n, E_feat.shape[1]))
    nz = np.flatnonzero(np.diff(g.row_offsets) > 0)
    if nz.size:
        out[nz] = np.add.reduceat(E_feat, g.row_offsets[nz], axis=0)
    return out


def edge_homophily(g: Graph) -> float:
    """Fraction of arcs whose endpoints share a label."""
    if g.y is None:
        raise ValueError("edge_homophily needs node labels")
    rows = arc_rows(g)
    if g.n_arcs == 0:
        return 0.0
    return float(np.mean(g.y[rows] == g.y[g.col_indices]))


# ------------------------------------------------------------------ generators

def gen_minesweeper_grid(rows: int, cols: int, mine_prob: float, seed: int,
                         unknown_frac: float = 0.5) -> Graph:
    """Minesweeper-style grid: 8-neighbor lattice, mine labels, count features.

    Node feature = one-hot count of mined neighbors (9 bins) plus an "unknown"
    indicator; a random unknown_frac of nodes get only the indicator with the
    count bins zeroed. Label = node is a mine. Deterministic in seed.
    """
    if rows < 2 or cols < 2:
        raise ValueError("rows and cols must both be >= 2")
    if not (0 < mine_prob < 1):
        raise ValueError("mine_prob must lie strictly between 0 and 1")
    if not (0 <= unknown_frac <= 1):
        raise ValueError("unknown_frac must lie in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    n = rows * cols
    mines = rng.random(n) < mine_prob
    edges = []
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == 0 and dc == 0:
                        continue
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < rows and 0 <= cc < cols:
                        edges.append((u, rr * cols + cc))
    g = canonicalize(edges, n)
    counts = np.zeros(n, dtype=np.int64)
    rws = arc_rows(g)
    np.add.at(counts, rws, mines[g.col_indices].astype(np.int64))
    unknown = rng.random(n) < unknown_frac
    X = np.zeros((n, 10))
    known = ~unknown
    X[known, counts[known]] = 1.0
    X[unknown, 9] = 1.0
    masks = _random_split(n, rng)
    g.X = X
    g.y = mines.astype(np.int64)
    g.masks = masks
    return g


def gen_sbm(sizes, p_in: float, p_out: float, seed: int,
            feature_dim: int = 8, feature_shift: float = 1.0) -> Graph:
    """Stochastic block model with block labels and mean-shifted Gaussian features."""
    for p in (p_in, p_out):
        if not (0 <= p <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    sizes = [int(s) for s in sizes]
    n = sum(sizes)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    edges = []
    for u in range(n):
        for v in range(u + 1, n):
            p = p_in if labels[u] == labels[v] else p_out
            if rng.random() < p:
                edges.append((u, v))
    g = canonicalize(edges, n)
    X = rng.normal(size=(n, feature_dim))
    shift_dirs = rng.normal(size=(len(sizes), feature_dim))
    norms = np.linalg.norm(shift_dirs, axis=1, keepdims=True)
    shift_dirs = shift_dirs / np.where(norms == 0, 1.0, norms)
    X = X + feature_shift * shift_dirs[labels]
    g.X = X
    g.y = labels.astype(np.int64)
    g.masks = _random_split(n, rng)
    return g


def _random_split(n, rng, frac_train=0.5, frac_val=0.25):
    perm = rng.permutation(n)
    n_train = int(round(frac_train * n))
    n_val = int(round(frac_val * n))
    masks = {k: np.zeros(n, dtype=bool) for k in ("train", "val", "test")}
    masks["train"][perm[:n_train]] = True
    masks["val"][perm[n_train:n_train + n_val]] = True
    masks["test"][perm[n_train + n_val:]] = True
    return masks


# ------------------------------------------------------------------------- I/O

def save_graph(g: Graph, path) -> None:
    """Write a graph as a JSON document; round trips bit-exactly on all arrays."""
    validate_graph(g)
    rows = arc_rows(g)
    und_edges = []
    und_rows = []
    for k, (u, v) in enumerate(zip(rows.tolist(), g.col_indices.tolist())):
        if u < v:
            und_edges.append([u, v])
            und_rows.append(k)
    doc = {"n": g.n, "edges": und_edges, "x": g.X.tolist()}
    if g.E_feat is not None:
        doc["edge_attr"] = g.E_feat.tolist()
    if g.y is not None:
        doc["y"] = g.y.tolist()
    if g.masks is not None:
        doc["masks"] = {k: [bool(b) for b in g.masks[k]] for k in ("train", "val", "test")}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _field(doc, name, required=True):
    if name not in doc:
        if required:
            raise ValueError(f"graph document missing field '{name}'")
        return None
    return doc[name]


def load_graph(path) -> Graph:
    """Load a JSON graph document, canonicalize, and validate.

    edge_attr rows align with the canonical CSR arc order.
    """
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed JSON in graph file: {exc}") from exc
    return load_graph_fields(doc)


def load_graph_fields(doc) -> Graph:
    """Build a validated Graph from an already-parsed JSON object."""
    if not isinstance(doc, dict):
        raise ValueError("graph document must be a JSON object")
    n = _field(doc, "n")
    if not isinstance(n, int) or n < 0:
        raise ValueError("field 'n' must be a non-negative integer")
    edges = _field(doc, "edges")
    x = _field(doc, "x")
    g = canonicalize(edges, n)
    X = np.asarray(x, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != n:
        raise ValueError(f"field 'x' must be an {n}-row matrix")
    g.X = X
    ea = _field(doc, "edge_attr", required=False)
    if ea is not None:
        E = np.asarray(ea, dtype=np.float64)
        if E.ndim != 2 or E.shape[0] != g.n_arcs:
            raise ValueError(
                f"field 'edge_attr' must carry one row per arc ({g.n_arcs}), got {E.shape[0]}")
        g.E_feat = E
    yv = _field(doc, "y", required=False)
    if yv is not None:
        y = np.asarray(yv)
        if y.ndim == 1 and y.shape[0] != n:
            raise ValueError(f"field 'y' must have length n={n}")
        g.y = y
    mv = _field(doc, "masks", required=False)
    if mv is not None:
        masks = {}
        for name in ("train", "val", "test"):
            if name not in mv:
                raise ValueError(f"field 'masks' missing split '{name}'")
            m = np.asarray(mv[name], dtype=bool)
            if m.shape != (n,):
                raise ValueError(f"mask '{name}' must have length n={n}")
            masks[name] = m
        g.masks = masks
    validate_graph(g)
    return g
