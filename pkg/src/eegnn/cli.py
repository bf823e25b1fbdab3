"""Single command over the whole kit: data generation, training, evaluation,
diagnostics, and parameter accounting.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure, 3 a diagnostic ran but landed outside its tolerance.

Option precedence is defaults, then command-line flags, then the --config
file: the file is the run's authoritative record, so its values win over
flags. Every output is byte-reproducible for a fixed config and seed: JSON
is written with sorted keys, floats keep their shortest round-trip form, and
nothing timestamps itself.

EEGNN_THREADS, when set, caps worker threads. Execution is sequential
either way; the variable is validated, clamped to [1, 64], and echoed into
the resolved config so runs record the setting they saw.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import diagnostics
from .cells import param_count
from .diagnostics import ToleranceError
from .graphs import edge_homophily, gen_minesweeper_grid, gen_sbm, save_graph
from .training import ConfigError, GraphSet, RunConfig, build_model, \
    evaluate, exit_csv, forward_node, history_csv, load_checkpoint, \
    load_dataset, metric_eval, save_checkpoint, scores_from_logits, train_run

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_TOLERANCE = 3

DIAG_NAMES = ("dirichlet", "energy_descent", "spectrum", "sensitivity",
              "depth_retention", "oracle_exit")

GEN_DEFAULTS = {
    "dataset": "minesweeper",
    "rows": 30, "cols": 30, "mine_prob": 0.2, "unknown_frac": 0.5,
    "sizes": [50, 50], "p_in": 0.7, "p_out": 0.1,
    "feature_dim": 8, "feature_shift": 1.0,
    "seed": 0,
}

DIAG_DEFAULTS = {
    "data": None,       # dataset path; a built-in block-model graph otherwise
    "steps": 50,        # energy_descent trajectory length
    "cases": 25,        # random instances for the suite diagnostics
    "step_tau": 0.05,   # step size used by energy_descent
    "depths": [2, 6],   # depth_retention grid
    "kinds": ["sas"],   # depth_retention model kinds
}


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; route it through the validation path
    def error(self, message):
        raise ConfigError([message])


def _write_json(doc, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read config file: {exc}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"malformed JSON in config file: {exc}"])
    if not isinstance(doc, dict):
        raise ConfigError(["config file must hold a JSON object"])
    return doc


def _threads() -> int:
    raw = os.environ.get("EEGNN_THREADS")
    if raw is None:
        return 1
    try:
        val = int(raw)
    except ValueError:
        raise ConfigError([f"EEGNN_THREADS must be an integer, got {raw!r}"])
    return min(max(val, 1), 64)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _merge(defaults: dict, flag_over: dict, file_cfg: dict) -> dict:
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise ConfigError([f"unknown config key {k!r}" for k in unknown])
    merged = dict(defaults)
    merged.update(flag_over)
    merged.update(file_cfg)
    return merged


def _run_config(args, file_cfg: dict) -> RunConfig:
    base = RunConfig().to_dict()
    if args.seed is not None:
        base["seed"] = args.seed
    base.update(file_cfg)
    return RunConfig.from_dict(base)


def _split_diag_config(file_cfg: dict) -> tuple[dict, dict]:
    run_keys = set(RunConfig().to_dict())
    diag, run, unknown = dict(DIAG_DEFAULTS), {}, []
    for key, val in file_cfg.items():
        if key in DIAG_DEFAULTS:
            diag[key] = val
        elif key in run_keys:
            run[key] = val
        else:
            unknown.append(key)
    if unknown:
        raise ConfigError([f"unknown config key {k!r}" for k in sorted(unknown)])
    return diag, run


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> None:
    file_cfg = _read_config(args.config)
    flag_over = {} if args.seed is None else {"seed": args.seed}
    cfg = _merge(GEN_DEFAULTS, flag_over, file_cfg)
    if cfg["dataset"] not in ("minesweeper", "sbm"):
        raise ConfigError([f"dataset must be 'minesweeper' or 'sbm', got {cfg['dataset']!r}"])
    try:
        if cfg["dataset"] == "minesweeper":
            g = gen_minesweeper_grid(int(cfg["rows"]), int(cfg["cols"]),
                                     float(cfg["mine_prob"]), int(cfg["seed"]),
                                     unknown_frac=float(cfg["unknown_frac"]))
        else:
            g = gen_sbm([int(s) for s in cfg["sizes"]], float(cfg["p_in"]),
                        float(cfg["p_out"]), int(cfg["seed"]),
                        feature_dim=int(cfg["feature_dim"]),
                        feature_shift=float(cfg["feature_shift"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError([str(exc)])
    out = _out_dir(args)
    save_graph(g, out / "graph.json")
    labels, counts = np.unique(g.y, return_counts=True)
    stats = {
        "n": g.n,
        "n_edges": g.n_arcs // 2,
        "n_arcs": g.n_arcs,
        "class_balance": {str(int(l)): float(c) / g.n
                          for l, c in zip(labels, counts)},
        "edge_homophily": edge_homophily(g),
    }
    _write_json(stats, out / "stats.json")
    cfg["threads"] = _threads()
    _write_json(cfg, out / "resolved_config.json")
    print(f"wrote graph.json ({g.n} nodes, {g.n_arcs // 2} edges) and stats.json to {out}")


def _metric_bundle(model, data, split: str = "test") -> dict:
    """Headline metric plus whatever companion metrics the task admits."""
    rec = evaluate(model, data, split)
    bundle = dict(rec)
    if model.cfg.task == "node_class":
        logits, _, _ = forward_node(model, data, "eval_argmax")
        sel = data.masks[split]
        lv, y = logits.value[sel], np.asarray(data.y)[sel]
        for name in ("accuracy", "macro_f1"):
            bundle[name] = metric_eval(lv, y, name)
        try:
            scores = scores_from_logits(lv)
            bundle["auroc"] = metric_eval(scores, y, "auroc")
            bundle["ap"] = metric_eval(scores, y, "ap")
        except ValueError:
            bundle["auroc"] = None
            bundle["ap"] = None
    return bundle


def _load_data(path):
    if path is None:
        raise ConfigError(["no dataset given: pass --data or config key 'data'"])
    return load_dataset(path)


def cmd_train(args) -> None:
    file_cfg = _read_config(args.config)
    data_path = file_cfg.pop("data", None) or args.data
    cfg = _run_config(args, file_cfg)
    data = _load_data(data_path)
    threads = _threads()
    model, history = train_run(cfg, data)
    out = _out_dir(args)
    resolved = cfg.to_dict()
    resolved["data"] = str(data_path)
    resolved["threads"] = threads
    _write_json(resolved, out / "resolved_config.json")
    (out / "history.csv").write_text(history_csv(history))
    save_checkpoint(model, out / "checkpoint.json")
    bundle = _metric_bundle(model, data)
    _write_json(bundle, out / "metrics.json")
    if cfg.model == "eegnn" and cfg.task == "node_class":
        _, state, _ = forward_node(model, data, "eval_argmax")
        test_ids = np.flatnonzero(data.masks["test"])
        (out / "exits.csv").write_text(exit_csv(state, agent_ids=test_ids))
    print(f"trained {cfg.model} for {len(history)} epochs; "
          f"test {bundle['metric']} = {bundle['value']}")


def cmd_evaluate(args) -> None:
    file_cfg = _read_config(args.config)
    data_path = file_cfg.pop("data", None) or args.data
    ckpt_path = file_cfg.pop("checkpoint", None) or args.checkpoint
    if ckpt_path is None:
        raise ConfigError(["no checkpoint given: pass --checkpoint or config key 'checkpoint'"])
    if file_cfg:
        raise ConfigError([f"unknown config key {k!r}" for k in sorted(file_cfg)])
    model = load_checkpoint(ckpt_path)
    data = _load_data(data_path)
    mode = "train_sample" if args.mode == "train" else "eval_argmax"
    rec = evaluate(model, data, "test", mode=mode,
                   rng=np.random.Generator(np.random.PCG64(model.cfg.seed)))
    out = _out_dir(args)
    resolved = model.cfg.to_dict()
    resolved.update({"data": str(data_path), "checkpoint": str(ckpt_path),
                     "mode": mode, "threads": _threads()})
    _write_json(resolved, out / "resolved_config.json")
    _write_json(rec, out / "metrics.json")
    print(f"test {rec['metric']} = {rec['value']}")


def _diag_graph(diag: dict, cfg: RunConfig):
    if diag["data"] is not None:
        data = load_dataset(diag["data"])
        if isinstance(data, GraphSet):
            raise ConfigError(["diagnostics need a single-graph dataset"])
        return data
    return gen_sbm((20, 20), 0.7, 0.1, cfg.seed, feature_dim=8)


def _fresh_model(cfg: RunConfig, g):
    out_dim = int(np.max(g.y)) + 1 if cfg.loss == "ce" else 1
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    return build_model(cfg, g.X.shape[1], out_dim, rng)


def cmd_diagnose(args) -> None:
    if args.name is None or args.name not in DIAG_NAMES:
        raise ConfigError([f"unknown diagnostic {args.name!r}; valid names: "
                           + ", ".join(DIAG_NAMES)])
    file_cfg = _read_config(args.config)
    diag, run_over = _split_diag_config(file_cfg)
    if "data" not in file_cfg and args.data is not None:
        diag["data"] = args.data
    base = RunConfig().to_dict()
    if args.seed is not None:
        base["seed"] = args.seed
    base.update(run_over)
    cfg = RunConfig.from_dict(base)
    out = _out_dir(args)
    resolved = cfg.to_dict()
    resolved.update(diag)
    resolved["diagnostic"] = args.name
    resolved["threads"] = _threads()
    _write_json(resolved, out / "resolved_config.json")

    report = {"diagnostic": args.name, "seed": cfg.seed}
    if args.name == "dirichlet":
        g = _diag_graph(diag, cfg)
        model = _fresh_model(cfg, g)
        tr_sum, tr_mean = diagnostics.dirichlet_traces(model, g)
        diagnostics.emit_trace(tr_sum, out / "dirichlet_sum.csv")
        diagnostics.emit_trace(tr_mean, out / "dirichlet_mean.csv")
        initial, final = float(tr_sum.values[0]), float(tr_sum.values[-1])
        report.update({"initial": initial, "final": final,
                       "final_over_initial": final / initial if initial else None,
                       "pass": True})
    elif args.name == "energy_descent":
        rep = diagnostics.descent_suite(int(diag["cases"]), int(diag["steps"]),
                                        float(diag["step_tau"]), seed=cfg.seed)
        report.update(rep)
    elif args.name == "spectrum":
        rep = diagnostics.spectrum_suite(int(diag["cases"]), seed=cfg.seed)
        report.update(rep)
    elif args.name == "sensitivity":
        g = _diag_graph(diag, cfg)
        model = _fresh_model(cfg, g)
        values = [diagnostics.sensitivity(model, g, l)
                  for l in range(cfg.depth + 1)]
        report.update({
            "layers": list(range(cfg.depth + 1)),
            "sensitivity": values,
            "log_sensitivity": [math.log(v) if v > 0 else None for v in values],
            "pass": values[-1] == 0.0,
        })
    elif args.name == "depth_retention":
        g = _diag_graph(diag, cfg)
        rows = diagnostics.depth_retention(g, list(diag["kinds"]),
                                           [int(d) for d in diag["depths"]], cfg)
        verdicts = {}
        for kind in diag["kinds"]:
            vals = [r["value"] for r in rows if r["kind"] == kind]
            gap = max(vals) - min(vals)
            verdicts[kind] = {"gap": gap}
            if kind in ("sas", "eegnn"):
                verdicts[kind]["pass"] = gap <= 0.05
        report.update({"rows": rows, "verdicts": verdicts,
                       "pass": all(v.get("pass", True) for v in verdicts.values())})
    else:  # oracle_exit
        g = _diag_graph(diag, cfg)
        model, _ = train_run(cfg, g)
        oracle, final = diagnostics.oracle_exit_eval(model, g)
        report.update({"oracle_accuracy": oracle, "final_accuracy": final,
                       "gain": oracle - final, "pass": oracle >= final})

    _write_json(report, out / "report.json")
    status = "pass" if report["pass"] else "FAIL"
    print(f"{args.name}: {status} (report.json in {out})")
    if not report["pass"]:
        raise ToleranceError(f"diagnostic {args.name} outside tolerance")


def cmd_param_count(args) -> None:
    file_cfg = _read_config(args.config)
    extras = {"feat_dim": 10, "out_dim": 2, "edge_dim": 0}
    for key in list(extras):
        if key in file_cfg:
            extras[key] = int(file_cfg.pop(key))
    cfg = _run_config(args, file_cfg)
    counts = param_count(cfg.model, cfg.task, cfg.depth, extras["feat_dim"],
                         cfg.hidden, extras["out_dim"],
                         edge_mode=cfg.edge_mode, edge_dim=extras["edge_dim"],
                         dec_hidden=cfg.dec_hidden, exit_hidden=cfg.exit_hidden,
                         exit_depth=cfg.exit_depth)
    doc = {"model": cfg.model, "depth": cfg.depth, "hidden": cfg.hidden,
           **extras, **counts}
    out = _out_dir(args)
    _write_json(doc, out / "counts.json")
    print(json.dumps(doc, sort_keys=True, indent=2))


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="eegnn", description="graph cell training and diagnostics")
    sub = ap.add_subparsers(dest="command", required=True)
    specs = [
        ("generate", cmd_generate, "write a synthetic benchmark graph"),
        ("train", cmd_train, "train a model and write history/checkpoint/metrics"),
        ("evaluate", cmd_evaluate, "score a saved checkpoint on a dataset"),
        ("diagnose", cmd_diagnose, "run one named diagnostic"),
        ("param-count", cmd_param_count, "parameter accounting for a config"),
    ]
    for name, fn, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="JSON config; overrides flags")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--out", metavar="DIR", default=".", help="output directory")
        p.add_argument("--mode", choices=("train", "eval"), default="eval",
                       help="forward mode for evaluation (sampled vs argmax exits)")
        if name in ("train", "evaluate", "diagnose"):
            p.add_argument("--data", metavar="PATH", help="dataset JSON")
        if name == "evaluate":
            p.add_argument("--checkpoint", metavar="PATH", help="checkpoint JSON")
        if name == "diagnose":
            p.add_argument("name", nargs="?",
                           help="one of: " + ", ".join(DIAG_NAMES))
        p.set_defaults(func=fn)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
        return EXIT_OK
    except ConfigError as exc:
        for msg in exc.messages:
            print(f"error: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    except ToleranceError as exc:
        print(f"tolerance: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
