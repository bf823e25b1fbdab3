"""Training plumbing: config, losses, Adam, metrics, and the fit/eval loops.

Everything is deterministic in the seed: one PCG64 generator drives
initialization and per-epoch exit sampling, evaluation passes are noise-free,
and history/checkpoint serialization has no timestamps or environment
dependence, so identical (config, seed, data) reruns produce byte-identical
outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ACTIVATION_KINDS, DiffValue
from .cells import (CellParams, EDGE_MODES, MODEL_KINDS, TASKS, baseline_step,
                    decode, edge_term, encode, make_cell_params, sas_step)
from .exits import (ExitHeads, ExitState, eegnn_forward_graph,
                    eegnn_forward_node, exit_distribution, make_exit_heads)
from .graphs import Graph, incidence_aggregate, load_graph_fields, mean_adj, norm_adj

__all__ = [
    "ConfigError",
    "TrainDivergenceError",
    "RunConfig",
    "GraphSet",
    "Model",
    "OptimState",
    "LOSS_KINDS",
    "METRIC_KINDS",
    "loss_eval",
    "adam_step",
    "metric_eval",
    "scores_from_logits",
    "build_model",
    "forward_node",
    "train_run",
    "evaluate",
    "history_csv",
    "exit_csv",
    "save_checkpoint",
    "load_checkpoint",
    "load_dataset",
]

LOSS_KINDS = ("ce", "bce_logits", "mse", "l1")
METRIC_KINDS = ("accuracy", "auroc", "ap", "macro_f1", "mae")


class ConfigError(ValueError):
    """Invalid run configuration; carries every problem found, not just the first."""

    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


class TrainDivergenceError(RuntimeError):
    """Non-finite loss encountered; carries the epoch index."""

    def __init__(self, epoch, value):
        self.epoch = epoch
        super().__init__(f"non-finite loss {value} at epoch {epoch}")


@dataclass
class RunConfig:
    """One training run's knobs; validated all at once by from_dict."""

    task: str = "node_class"
    model: str = "sas"
    depth: int = 10
    hidden: int = 16
    tau: float = 1.0
    sigma1: str = "relu_tanh"
    sigma2: str = "relu"
    edge_mode: str = "zero"
    exit_hidden: int = 16
    exit_depth: int = 1
    nu0: float = 0.05
    dec_hidden: tuple = ()
    epochs: int = 300
    seed: int = 0
    metric: str = "auroc"
    loss: str = "ce"
    lr: float = 3e-3
    weight_decay: float = 0.0
    decoupled_wd: bool = False
    eval_sample: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        errors = [f"unknown config key {k!r}" for k in sorted(set(d) - known)]
        cfg = cls()
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "dec_hidden":
                v = tuple(v) if isinstance(v, (list, tuple)) else v
            try:
                setattr(cfg, f.name, type(getattr(cfg, f.name))(v)
                        if not isinstance(v, type(getattr(cfg, f.name))) else v)
            except (TypeError, ValueError):
                errors.append(f"config key {f.name!r}: cannot coerce {v!r}")
        errors += cfg._check()
        if errors:
            raise ConfigError(errors)
        return cfg

    def _check(self) -> list[str]:
        e = []
        checks = [
            (self.task in TASKS, f"task must be one of {TASKS}, got {self.task!r}"),
            (self.model in MODEL_KINDS,
             f"model must be one of {MODEL_KINDS}, got {self.model!r}"),
            (self.edge_mode in EDGE_MODES,
             f"edge_mode must be one of {EDGE_MODES}, got {self.edge_mode!r}"),
            (self.metric in METRIC_KINDS,
             f"metric must be one of {METRIC_KINDS}, got {self.metric!r}"),
            (self.loss in LOSS_KINDS,
             f"loss must be one of {LOSS_KINDS}, got {self.loss!r}"),
            (self.sigma1 in ACTIVATION_KINDS, f"sigma1 unknown: {self.sigma1!r}"),
            (self.sigma2 in ACTIVATION_KINDS, f"sigma2 unknown: {self.sigma2!r}"),
            (self.depth >= 1, f"depth must be >= 1, got {self.depth}"),
            (self.hidden >= 1, f"hidden must be >= 1, got {self.hidden}"),
            (self.exit_hidden >= 1,
             f"exit_hidden must be >= 1, got {self.exit_hidden}"),
            (self.exit_depth in (1, 2, 3),
             f"exit_depth must be 1, 2 or 3, got {self.exit_depth}"),
            (0.0 < self.tau <= 1.0, f"tau must lie in (0, 1], got {self.tau}"),
            (self.nu0 >= 0.0, f"nu0 must be >= 0, got {self.nu0}"),
            (self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}"),
            (self.lr >= 0.0, f"lr must be >= 0, got {self.lr}"),
            (self.weight_decay >= 0.0,
             f"weight_decay must be >= 0, got {self.weight_decay}"),
        ]
        e += [msg for ok, msg in checks if not ok]
        if not (isinstance(self.dec_hidden, tuple)
                and all(isinstance(h, int) and h >= 1 for h in self.dec_hidden)):
            e.append(f"dec_hidden must be a tuple of widths >= 1, got {self.dec_hidden!r}")
        return e

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["dec_hidden"] = list(self.dec_hidden)
        return d


@dataclass
class GraphSet:
    """Inductive dataset: one label row and one split per member graph."""

    graphs: list
    y: np.ndarray
    masks: dict

    def __post_init__(self):
        if len(self.graphs) != self.y.shape[0]:
            raise ValueError("one label row per graph required")
        for name in ("train", "val", "test"):
            if name not in self.masks:
                raise ValueError(f"missing split mask {name!r}")


@dataclass
class Model:
    cfg: RunConfig
    params: CellParams
    heads: ExitHeads | None
    feat_dim: int
    out_dim: int
    edge_dim: int = 0

    def parameters(self) -> list[tuple[str, DiffValue]]:
        out = [(f"cell.{n}", p) for n, p in self.params.parameters()]
        if self.heads is not None:
            out += [(f"heads.{n}", p) for n, p in self.heads.parameters()]
        return out


# ------------------------------------------------------------------- losses

def _row_mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    sel = np.asarray(mask, dtype=bool)
    if sel.shape != (n,):
        raise ValueError(f"mask length {sel.shape} does not match rows {n}")
    if not sel.any():
        raise ValueError("empty mask selects no rows")
    return sel


def loss_eval(pred: DiffValue, targets, kind: str, mask=None) -> DiffValue:
    """Mean-reduced scalar loss over the (optionally masked) rows."""
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    n, k = pred.shape
    sel = _row_mask(mask, n)
    cnt = int(sel.sum())
    if kind == "ce":
        t = np.asarray(targets, dtype=np.int64).reshape(-1)
        if t.shape != (n,):
            raise ValueError(f"ce targets must be {n} class indices, got {t.shape}")
        if k < 2:
            raise ValueError("ce needs >= 2 logit columns; use bce_logits for one")
        if ((t[sel] < 0) | (t[sel] >= k)).any():
            raise ValueError(f"class index outside [0, {k})")
        lp = ad.row_log_softmax(pred)
        pick = np.zeros((n, k))
        pick[np.flatnonzero(sel), t[sel]] = 1.0 / cnt
        return ad.neg(ad.sum_all(ad.mul_const(lp, pick)))
    t = np.asarray(targets, dtype=np.float64).reshape(pred.shape[0], -1)
    if t.shape != pred.shape:
        raise ValueError(f"targets shape {t.shape} must match predictions {pred.shape}")
    w = np.zeros_like(pred.value)
    w[sel] = 1.0 / (cnt * k)
    if kind == "bce_logits":
        if not np.isin(t[sel], (0.0, 1.0)).all():
            raise ValueError("bce_logits targets must be 0 or 1")
        # elementwise softplus(x) - x*y is the overflow-safe -log p(y)
        per = ad.sub(ad.activation_apply(pred, "softplus"), ad.mul_const(pred, t))
        return ad.sum_all(ad.mul_const(per, w))
    diff = ad.sub(pred, ad.constant(t))
    if kind == "mse":
        return ad.sum_all(ad.mul_const(ad.mul(diff, diff), w))
    return ad.sum_all(ad.mul_const(ad.abs_val(diff), w))


# ------------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    """Adam state: first/second moments keyed by parameter name."""

    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[tuple[str, DiffValue]], state: OptimState) -> None:
    """One bias-corrected Adam update in place; grads must already be summed."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params:
        g = p.grad
        if state.weight_decay != 0.0 and not state.decoupled:
            g = g + state.weight_decay * p.value
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.decoupled and state.weight_decay != 0.0:
            p.value *= 1.0 - state.lr * state.weight_decay
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ------------------------------------------------------------------- metrics

def _tied_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    r = np.arange(1, len(x) + 1, dtype=np.float64)
    bounds = np.flatnonzero(np.diff(sx) != 0.0)
    starts = np.concatenate(([0], bounds + 1))
    ends = np.concatenate((bounds, [len(sx) - 1]))
    for s, e in zip(starts, ends):
        if e > s:
            r[s:e + 1] = 0.5 * (s + e) + 1.0
    out = np.empty_like(r)
    out[order] = r
    return out


def _auroc(scores, labels) -> float:
    pos = labels == 1
    np_, nn = int(pos.sum()), int((~pos).sum())
    if np_ == 0 or nn == 0:
        raise ValueError("auroc undefined for single-class targets")
    ranks = _tied_ranks(scores)
    return float((ranks[pos].sum() - np_ * (np_ + 1) / 2.0) / (np_ * nn))


def _average_precision(scores, labels) -> float:
    pos_total = int((labels == 1).sum())
    if pos_total == 0:
        raise ValueError("average precision undefined without positive targets")
    order = np.argsort(-scores, kind="mergesort")
    y = labels[order]
    s = scores[order]
    tp = np.cumsum(y == 1)
    ranks = np.arange(1, len(y) + 1)
    last = np.concatenate((np.flatnonzero(np.diff(s) != 0.0), [len(s) - 1]))
    prec = tp[last] / ranks[last]
    rec = tp[last] / pos_total
    prev = np.concatenate(([0.0], rec[:-1]))
    return float(((rec - prev) * prec).sum())


def _macro_f1(pred_classes, targets, n_classes) -> float:
    total = 0.0
    for c in range(n_classes):
        tp = int(((pred_classes == c) & (targets == c)).sum())
        fp = int(((pred_classes == c) & (targets != c)).sum())
        fn = int(((pred_classes != c) & (targets == c)).sum())
        denom = 2 * tp + fp + fn
        total += (2.0 * tp / denom) if denom else 0.0
    return total / n_classes


def scores_from_logits(pred: np.ndarray) -> np.ndarray:
    """Monotone binary score from logits: column difference, or the lone column."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim == 2 and pred.shape[1] == 2:
        return pred[:, 1] - pred[:, 0]
    if pred.ndim == 2 and pred.shape[1] == 1:
        return pred[:, 0]
    if pred.ndim == 1:
        return pred
    raise ValueError(f"cannot derive a binary score from shape {pred.shape}")


def metric_eval(predictions, targets, kind: str) -> float:
    """Scalar quality measure.

    auroc/ap take a 1-D score vector and binary labels; accuracy/macro_f1
    take logits (argmax applied) or already-discrete class vectors; mae takes
    values shaped like its targets.
    """
    if kind not in METRIC_KINDS:
        raise ValueError(f"unknown metric kind {kind!r}")
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets)
    if kind == "mae":
        t = t.astype(np.float64)
        if p.shape != t.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
        return float(np.abs(p - t).mean())
    if kind in ("auroc", "ap"):
        scores = scores_from_logits(p)
        labels = t.reshape(-1).astype(np.int64)
        if scores.shape != labels.shape:
            raise ValueError(f"scores {scores.shape} vs labels {labels.shape}")
        return _auroc(scores, labels) if kind == "auroc" else _average_precision(scores, labels)
    labels = t.reshape(-1).astype(np.int64)
    if p.ndim == 2:
        classes = p.argmax(axis=1)
        n_classes = p.shape[1]
    else:
        classes = p.astype(np.int64)
        n_classes = int(max(classes.max(initial=0), labels.max(initial=0))) + 1
    if classes.shape != labels.shape:
        raise ValueError(f"predictions {classes.shape} vs labels {labels.shape}")
    if kind == "accuracy":
        return float((classes == labels).mean())
    return _macro_f1(classes, labels, n_classes)


# ------------------------------------------------------------------- model

def build_model(cfg: RunConfig, feat_dim: int, out_dim: int,
                rng: np.random.Generator, edge_dim: int = 0) -> Model:
    params = make_cell_params(
        rng, cfg.model, feat_dim, cfg.hidden, out_dim, depth=cfg.depth,
        tau=cfg.tau, sigma1=cfg.sigma1, sigma2=cfg.sigma2,
        edge_mode=cfg.edge_mode, edge_dim=edge_dim, dec_hidden=cfg.dec_hidden)
    heads = None
    if cfg.model == "eegnn":
        head_kind = "mean_gnn" if cfg.task == "node_class" else "mlp"
        heads = make_exit_heads(rng, head_kind, cfg.hidden, cfg.exit_hidden,
                                cfg.exit_depth, cfg.nu0)
    return Model(cfg=cfg, params=params, heads=heads, feat_dim=feat_dim,
                 out_dim=out_dim, edge_dim=edge_dim)


def _node_operators(model: Model, g: Graph):
    a = norm_adj(g)
    ma = mean_adj(g) if (model.heads is not None
                         and model.heads.kind == "mean_gnn") else None
    be = None
    if model.cfg.edge_mode != "zero":
        if g.E_feat is None:
            raise ValueError(f"edge_mode {model.cfg.edge_mode!r} needs edge features")
        be = ad.constant(incidence_aggregate(g, g.E_feat))
    return a, ma, be


def forward_node(model: Model, g: Graph, mode: str = "eval_argmax",
                 rng: np.random.Generator | None = None, *, ops=None,
                 noise=None, override_tau: float | None = None,
                 capture: list | None = None):
    """Logits for a node task; returns (logits, ExitState | None, records)."""
    a, ma, be = ops if ops is not None else _node_operators(model, g)
    cfg = model.cfg
    if cfg.model == "eegnn" and override_tau is None:
        Z, state, recs = eegnn_forward_node(
            g, model.params, model.heads, cfg.depth, rng, mode,
            a=a, ma=ma, be=be, noise=noise, capture=capture)
    else:
        tau = override_tau if override_tau is not None else model.params.tau
        H = encode(ad.constant(g.X), model.params)
        et = edge_term(be, model.params) if be is not None else None
        if capture is not None:
            capture.append(H.value.copy())
        for l in range(cfg.depth):
            if cfg.model in ("sas", "eegnn"):
                H = sas_step(H, a, model.params, tau=tau, edge_term=et)
            else:
                H = baseline_step(H, a, model.params, cfg.model, layer=l)
            if capture is not None:
                capture.append(H.value.copy())
        Z, state, recs = H, None, []
    return decode(Z, cfg.task, model.params), state, recs


def _forward_one_graph(model: Model, g: Graph, mode, rng, noise=None):
    cfg = model.cfg
    a = norm_adj(g)
    be = None
    if cfg.edge_mode != "zero":
        if g.E_feat is None:
            raise ValueError(f"edge_mode {cfg.edge_mode!r} needs edge features")
        be = ad.constant(incidence_aggregate(g, g.E_feat))
    if cfg.model == "eegnn":
        pooled, state, _ = eegnn_forward_graph(
            g, model.params, model.heads, cfg.depth, rng, mode, a=a, be=be,
            noise=noise)
        # decode pools again, but pooling one row is the exact identity
        return decode(pooled, cfg.task, model.params), state
    H = encode(ad.constant(g.X), model.params)
    et = edge_term(be, model.params) if be is not None else None
    for l in range(cfg.depth):
        if cfg.model == "sas":
            H = sas_step(H, a, model.params, tau=model.params.tau, edge_term=et)
        else:
            H = baseline_step(H, a, model.params, cfg.model, layer=l)
    return decode(H, cfg.task, model.params), None


def _forward_graph_set(model: Model, ds: GraphSet, mode, rng):
    preds, states = [], []
    for g in ds.graphs:
        out, state = _forward_one_graph(model, g, mode, rng)
        preds.append(out)
        states.append(state)
    return preds, states


def _graph_set_loss(preds, ds: GraphSet, kind, mask) -> DiffValue:
    sel = np.flatnonzero(_row_mask(mask, len(preds)))
    total = None
    for i in sel:
        li = loss_eval(preds[i], ds.y[i:i + 1], kind)
        total = li if total is None else ad.add(total, li)
    return ad.smul(total, 1.0 / len(sel))


# ------------------------------------------------------------------- loops

_HIGHER_BETTER = {"accuracy": True, "auroc": True, "ap": True,
                  "macro_f1": True, "mae": False}


def _metric_predictions(pred_value: np.ndarray, metric: str):
    if metric in ("auroc", "ap"):
        return scores_from_logits(pred_value)
    return pred_value


def _eval_node(model: Model, g: Graph, ops, split: str, mode="eval_argmax",
               rng=None):
    logits, state, _ = forward_node(model, g, mode, rng, ops=ops)
    mask = g.masks[split]
    value = metric_eval(_metric_predictions(logits.value[mask], model.cfg.metric),
                        g.y[mask], model.cfg.metric)
    loss = float(loss_eval(logits, g.y, model.cfg.loss, mask=mask).value[0, 0])
    return value, loss, state


def _eval_graph_set(model: Model, ds: GraphSet, split: str, mode="eval_argmax",
                    rng=None):
    preds, states = _forward_graph_set(model, ds, mode, rng)
    mask = np.asarray(ds.masks[split], dtype=bool)
    stack = np.vstack([p.value for p in preds])
    value = metric_eval(_metric_predictions(stack[mask], model.cfg.metric),
                        ds.y[mask], model.cfg.metric)
    loss = float(_graph_set_loss(preds, ds, model.cfg.loss, mask).value[0, 0])
    sel_states = [s for s, m in zip(states, mask) if m and s is not None]
    return value, loss, sel_states


def _mean_exit_layer(model: Model, states) -> float:
    if model.cfg.model != "eegnn":
        return float(model.cfg.depth)
    if isinstance(states, ExitState):
        return float(states.exit_layer.mean())
    if states:
        return float(np.concatenate([s.exit_layer for s in states]).mean())
    return float(model.cfg.depth)


def _check_node_data(cfg: RunConfig, g: Graph):
    problems = []
    if g.y is None:
        problems.append("dataset has no labels")
    for name in ("train", "val", "test"):
        if g.masks is None or name not in g.masks:
            problems.append(f"dataset is missing the {name!r} split mask")
    if problems:
        raise ConfigError(problems)


def train_run(cfg: RunConfig, data):
    """Fit a model; returns (model at best validation epoch, history rows).

    History rows are (epoch, train_loss, val_metric, test_metric,
    mean_exit_layer). Aborts with TrainDivergenceError on a non-finite loss.
    """
    node_task = cfg.task == "node_class"
    if node_task and not isinstance(data, Graph):
        raise ConfigError(["node_class task needs a single Graph dataset"])
    if not node_task and not isinstance(data, GraphSet):
        raise ConfigError([f"{cfg.task} task needs a GraphSet dataset"])
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    if node_task:
        _check_node_data(cfg, data)
        feat_dim = data.X.shape[1]
        y_for_dims = data.y
        edge_dim = 0 if data.E_feat is None else data.E_feat.shape[1]
    else:
        feat_dim = data.graphs[0].X.shape[1]
        y_for_dims = data.y
        g0 = data.graphs[0]
        edge_dim = 0 if g0.E_feat is None else g0.E_feat.shape[1]
    if cfg.loss == "ce":
        out_dim = int(np.asarray(y_for_dims).max()) + 1
    elif cfg.loss == "bce_logits":
        out_dim = 1
    else:
        out_dim = int(np.asarray(y_for_dims).reshape(len(y_for_dims), -1).shape[1])
    model = build_model(cfg, feat_dim, out_dim, rng, edge_dim=edge_dim)
    named = model.parameters()
    values = [p for _, p in named]
    opt = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay,
                     decoupled=cfg.decoupled_wd)
    ops = _node_operators(model, data) if node_task else None
    higher = _HIGHER_BETTER[cfg.metric]
    best_val = None
    best_snapshot = None
    history = []
    for epoch in range(cfg.epochs):
        if node_task:
            logits, _, _ = forward_node(model, data, "train_sample", rng, ops=ops)
            loss = loss_eval(logits, data.y, cfg.loss, mask=data.masks["train"])
        else:
            preds, _ = _forward_graph_set(model, data, "train_sample", rng)
            loss = _graph_set_loss(preds, data, cfg.loss, data.masks["train"])
        lv = float(loss.value[0, 0])
        if not np.isfinite(lv):
            raise TrainDivergenceError(epoch, lv)
        ad.zero_grads(values)
        ad.backward(loss)
        adam_step(named, opt)
        if node_task:
            val, _, vstate = _eval_node(model, data, ops, "val")
            test, _, _ = _eval_node(model, data, ops, "test")
            mel = _mean_exit_layer(model, vstate)
        else:
            val, _, vstates = _eval_graph_set(model, data, "val")
            test, _, _ = _eval_graph_set(model, data, "test")
            mel = _mean_exit_layer(model, vstates)
        history.append((epoch, lv, val, test, mel))
        if best_val is None or (val > best_val if higher else val < best_val):
            best_val = val
            best_snapshot = [p.value.copy() for p in values]
    if best_snapshot is not None:
        for p, snap in zip(values, best_snapshot):
            p.value[...] = snap
    return model, history


def evaluate(model: Model, data, split: str = "test", mode: str = "eval_argmax",
             rng: np.random.Generator | None = None) -> dict:
    """Metrics record for one split; exit summaries included for eegnn."""
    if mode == "train_sample" and rng is None:
        rng = np.random.Generator(np.random.PCG64(model.cfg.seed))
    if model.cfg.task == "node_class":
        ops = _node_operators(model, data)
        value, loss, state = _eval_node(model, data, ops, split, mode, rng)
        states = state
    else:
        value, loss, states = _eval_graph_set(model, data, split, mode, rng)
        state = states
    record = {
        "split": split,
        "mode": mode,
        "metric": model.cfg.metric,
        "value": value,
        "loss": loss,
        "mean_exit_layer": _mean_exit_layer(model, state),
    }
    if model.cfg.model == "eegnn":
        if isinstance(states, ExitState) or states:
            dist = exit_distribution(states)
        else:
            dist = None
        if dist is not None:
            record["exit"] = {
                "min_layer": dist["min_layer"],
                "median_layer": dist["median_layer"],
                "max_layer": dist["max_layer"],
                "mean_time": dist["mean_time"],
                "histogram": [int(c) for c in dist["histogram"]],
            }
    return record


# ------------------------------------------------------------------- io

def history_csv(history) -> str:
    lines = ["epoch,train_loss,val_metric,test_metric,mean_exit_layer"]
    for epoch, tl, vm, tm, mel in history:
        lines.append(f"{epoch},{tl!r},{vm!r},{tm!r},{mel!r}")
    return "\n".join(lines) + "\n"


def exit_csv(state: ExitState, agent_ids=None) -> str:
    """One row per selected node; agent_ids both selects and labels the rows."""
    ids = np.arange(state.exited.shape[0]) if agent_ids is None else np.asarray(agent_ids)
    lines = ["agent_id,exit_layer,exit_time"]
    for i in ids:
        lines.append(f"{int(i)},{int(state.exit_layer[i])},{float(state.exit_time[i])!r}")
    return "\n".join(lines) + "\n"


def save_checkpoint(model: Model, path) -> None:
    payload = {
        "format": 1,
        "config": model.cfg.to_dict(),
        "feat_dim": model.feat_dim,
        "out_dim": model.out_dim,
        "edge_dim": model.edge_dim,
        "params": {name: p.value.tolist() for name, p in model.parameters()},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(path) -> Model:
    with open(path) as fh:
        payload = json.load(fh)
    cfg = RunConfig.from_dict(payload["config"])
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    model = build_model(cfg, int(payload["feat_dim"]), int(payload["out_dim"]),
                        rng, edge_dim=int(payload["edge_dim"]))
    stored = payload["params"]
    names = [name for name, _ in model.parameters()]
    if set(names) != set(stored):
        missing = sorted(set(names) ^ set(stored))
        raise ValueError(f"checkpoint parameters do not match config: {missing}")
    for name, p in model.parameters():
        arr = np.asarray(stored[name], dtype=np.float64)
        if arr.shape != p.value.shape:
            raise ValueError(f"checkpoint {name} has shape {arr.shape}, "
                             f"expected {p.value.shape}")
        p.value[...] = arr
    return model


def load_dataset(path):
    """Graph JSON or graph-set JSON, decided by the top-level keys."""
    with open(path) as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ValueError("dataset file must hold a JSON object")
    if "graphs" in payload:
        graphs = [load_graph_fields(entry) for entry in payload["graphs"]]
        y = np.asarray(payload["y"], dtype=np.float64)
        masks = {k: np.asarray(v, dtype=bool) for k, v in payload["masks"].items()}
        return GraphSet(graphs=graphs, y=y, masks=masks)
    return load_graph_fields(payload)
