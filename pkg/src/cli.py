"""
Command-line driver: search, ablate, compare, train, traverse, correlate.

Configuration precedence is flag > --config JSON > dataclass default; the
resolved values are echoed into each run's manifest.json.
"""

import argparse
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import pandas as pd

from src.analysis import correlate, traverse
from src.archspace import FlopsModel, cell_from_json, cell_to_json
from src.benchmark import load_records, resolve_bench
from src.controller import ControllerConfig, DNASController
from src.data_processing import records_frame
from src.errors import ConfigError, DNASError, MissingCheckpointError
from src.searchloop import SearchConfig, compare_with_random, initial_pool, run_ablation, run_search
from utils.data_utils import build_manifest, derive_seed, history_frame, write_csv, write_json, write_jsonl
from utils.plot_utils import correlation_figure, history_figure, traversal_figure, write_figure

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

# flag dest -> SearchConfig field
SEARCH_FLAGS = {
    "budget": "query_budget", "m_labeled": "m_labeled", "n_unlabeled": "n_unlabeled", "iters": "iters",
    "p_top": "p_top", "sigma": "sigma", "topk": "topk", "eps1": "eps1", "eps2": "eps2",
    "flops_limit": "flops_limit", "flops_margin": "flops_margin", "edge_band": "edge_band",
    "eta1": "eta1", "eta2": "eta2", "improve_steps": "improve_steps", "improve_max_steps": "improve_max_steps",
    "dense": "dense_sampling", "disentangle": "disentangle", "seed": "seed",
}
# flag dest -> ControllerConfig field
CONTROLLER_FLAGS = {
    "hidden_size": "hidden_size", "epochs": "epochs", "retrain_epochs": "retrain_epochs",
    "batch_size": "batch_size", "lr": "learning_rate", "alpha": "alpha", "lam": "lam", "mu": "mu", "beta": "beta",
    "free_bits": "free_bits", "kl_warmup": "kl_warmup_epochs",
}
# flag dest -> bench option
BENCH_FLAGS = {"bench": "bench", "bench_seed": "bench_seed", "noise": "noise", "max_nodes": "max_nodes"}
BENCH_DEFAULTS = {"bench": "synthetic", "bench_seed": 0, "noise": 0.02, "max_nodes": 5}


def _bool_flag(value):
    if value.lower() in ("y", "yes", "true", "1", "on"):
        return True
    if value.lower() in ("n", "no", "false", "0", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected yes/no, got {value!r}")


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--log-level", default="INFO")
    p.add_argument("--plots", action="store_true", help="also write plotly HTML figures")


def _add_bench(p):
    p.add_argument("--bench", help="synthetic | file:<path>")
    p.add_argument("--bench-seed", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--max-nodes", type=int)


def _add_controller(p):
    p.add_argument("--hidden-size", type=int)
    p.add_argument("--large", action="store_true", help="46-unit controller")
    p.add_argument("--epochs", type=int)
    p.add_argument("--retrain-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--free-bits", type=float, help="unpenalized KL nats per latent dimension")
    p.add_argument("--kl-warmup", type=int, help="epochs over which beta ramps up from 0")


def _add_search(p):
    p.add_argument("--budget", type=int)
    p.add_argument("--m-labeled", type=int)
    p.add_argument("--n-unlabeled", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--p-top", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--topk", type=int)
    p.add_argument("--eps1", type=float)
    p.add_argument("--eps2", type=float)
    p.add_argument("--flops-limit", type=float)
    p.add_argument("--flops-margin", type=float)
    p.add_argument("--edge-band", type=float)
    p.add_argument("--eta1", type=float)
    p.add_argument("--eta2", type=float)
    p.add_argument("--improve-steps", type=int)
    p.add_argument("--improve-max-steps", type=int)
    p.add_argument("--dense", type=_bool_flag)
    p.add_argument("--disentangle", type=_bool_flag)


def build_parser():
    parser = argparse.ArgumentParser(prog="dnas", description="Disentangled architecture search")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("search", "run the full search"),
                            ("ablate", "dense-sampling x disentangling grid"),
                            ("compare", "paired-seed search vs random search")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        _add_bench(p)
        _add_controller(p)
        _add_search(p)
        if name != "search":
            p.add_argument("--seeds", type=int, default=20, help="number of paired seeds")

    p = sub.add_parser("train", help="train a controller on a random labeled pool")
    _add_common(p)
    _add_bench(p)
    _add_controller(p)
    p.add_argument("--m-labeled", type=int)
    p.add_argument("--records", help="train on a JSONL file instead of a random pool")

    p = sub.add_parser("traverse", help="single-factor latent traversal")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--base", required=True, help="JSON file holding the base cell")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--lo", type=float, default=-0.4)
    p.add_argument("--hi", type=float, default=0.4)
    p.add_argument("--steps", type=int, default=9)

    p = sub.add_parser("correlate", help="factor / accuracy rank correlations")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--records", required=True, help="JSONL of oracle-evaluated cells")
    p.add_argument("--dims", default="all", help="'all' or comma-separated indices")
    return parser


def _load_config_file(path):
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except (OSError, ValueError) as e:
        raise ConfigError("--config", f"cannot read {path}: {e}") from e


def _overlay(base, args, mapping):
    for dest, key in mapping.items():
        value = getattr(args, dest, None)
        if value is not None:
            base[key] = value
    return base


def resolve_configs(args):
    """Return (SearchConfig, bench options) after applying file values and flags."""
    file_cfg = _load_config_file(args.config)
    bench_opts = _overlay({**BENCH_DEFAULTS, **file_cfg.get("bench_options", {})}, args, BENCH_FLAGS)

    controller_fields = {f.name for f in fields(ControllerConfig)}
    ctrl = {k: v for k, v in file_cfg.get("controller", {}).items() if k in controller_fields}
    if getattr(args, "large", False):
        ctrl.setdefault("hidden_size", 46)
    _overlay(ctrl, args, CONTROLLER_FLAGS)

    search_fields = {f.name for f in fields(SearchConfig)} - {"controller"}
    unknown = set(file_cfg) - search_fields - {"controller", "bench_options"}
    if unknown:
        raise ConfigError("--config", f"unknown keys {sorted(unknown)}")
    search = {k: v for k, v in file_cfg.items() if k in search_fields}
    _overlay(search, args, SEARCH_FLAGS)
    for key in ("flops_limit", "flops_margin"):
        if search.get(key) in ("inf", "Infinity"):
            search[key] = math.inf
    try:
        cfg = SearchConfig(controller=ControllerConfig(**ctrl), **search)
    except TypeError as e:
        raise ConfigError("--config", str(e)) from e
    return cfg, bench_opts


def _out_dir(args, command):
    out = Path(args.out or Path("runs") / command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bench_inputs(bench_opts):
    source = bench_opts["bench"]
    return [source[len("file:"):]] if source.startswith("file:") else []


def _make_bench(bench_opts, flops_model):
    return resolve_bench(bench_opts["bench"], flops_model, bench_seed=bench_opts["bench_seed"],
                         noise=bench_opts["noise"], max_nodes=bench_opts["max_nodes"])


def _write_manifest(out, command, cfg, bench_opts, flops_model, extra=None):
    config = {"search": cfg.to_dict(), "bench": bench_opts, "flops_model": flops_model.to_dict(), **(extra or {})}
    write_json(out / "manifest.json", build_manifest(command, config, cfg.seed, out, _bench_inputs(bench_opts)))


def cmd_search(args):
    cfg, bench_opts = resolve_configs(args)
    cfg.validate()
    out = _out_dir(args, "search")
    flops_model = FlopsModel()
    bench = _make_bench(bench_opts, flops_model)
    _write_manifest(out, "search", cfg, bench_opts, flops_model)

    state = run_search(cfg, bench, flops_model)

    history = history_frame(state.history)
    write_csv(out / "history.csv", history)
    write_jsonl(out / "evaluated.jsonl", [r.to_json() for r in state.labeled])
    dataset = pd.concat([records_frame(state.labeled, "oracle"), records_frame(state.pseudo, "pseudo")], ignore_index=True)
    write_csv(out / "dataset.csv", dataset)
    best = {**cell_to_json(state.best.cell), "acc": state.best.accuracy, "flops": state.best.flops} if state.best else None
    write_json(out / "best_cell.json", {"best": best, "queries": state.query_count,
                                        "budget_exhausted": state.budget_exhausted})
    if state.controller is not None and state.controller.is_trained:
        state.controller.save_model(out / "controller")
    if args.plots and len(history):
        write_figure(history_figure(history), out / "history.html")

    if state.best:
        print(f"best oracle accuracy: {state.best.accuracy:.4f} (flops {state.best.flops:.4g})")
    else:
        print("no evaluated cell satisfies the FLOPS limit")
    print(f"queries used: {state.query_count}/{cfg.query_budget}")
    return EXIT_OK


def cmd_ablate(args):
    cfg, bench_opts = resolve_configs(args)
    cfg.validate()
    out = _out_dir(args, "ablate")
    flops_model = FlopsModel()
    bench = _make_bench(bench_opts, flops_model)
    seeds = [derive_seed(cfg.seed, "ablation", i) for i in range(args.seeds)]
    _write_manifest(out, "ablate", cfg, bench_opts, flops_model, {"seeds": seeds})

    rows = run_ablation(cfg, bench, flops_model, seeds, jobs=args.jobs)
    frame = pd.DataFrame(rows, columns=["dense", "disen", "top1_mean", "top1_std", "top10_mean", "top10_std"])
    write_csv(out / "ablation.csv", frame)
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_compare(args):
    cfg, bench_opts = resolve_configs(args)
    cfg.validate()
    out = _out_dir(args, "compare")
    flops_model = FlopsModel()
    bench = _make_bench(bench_opts, flops_model)
    seeds = [derive_seed(cfg.seed, "compare", i) for i in range(args.seeds)]
    _write_manifest(out, "compare", cfg, bench_opts, flops_model, {"seeds": seeds})

    frame = pd.DataFrame(compare_with_random(cfg, bench, flops_model, seeds, jobs=args.jobs))
    write_csv(out / "compare.csv", frame)
    print(f"mean best: search {frame['dnas'].mean():.4f} vs random {frame['random'].mean():.4f}")
    return EXIT_OK


def cmd_train(args):
    cfg, bench_opts = resolve_configs(args)
    cfg.controller.validate()
    out = _out_dir(args, "train")
    flops_model = FlopsModel()
    if args.records:
        records = list(load_records(args.records).records.values())
    else:
        bench = _make_bench(bench_opts, flops_model)
        cells = initial_pool(bench, cfg.m_labeled, derive_seed(cfg.seed, "initial"))
        records = [bench.query(c) for c in cells]
    _write_manifest(out, "train", cfg, bench_opts, flops_model, {"records": args.records})

    controller = DNASController(cfg.controller, seed=derive_seed(cfg.seed, "controller"))
    history = controller.train_model(records, seed=derive_seed(cfg.seed, "pretrain", 0))
    controller.save_model(out / "controller")
    write_jsonl(out / "evaluated.jsonl", [r.to_json() for r in records])
    write_csv(out / "train_history.csv", pd.DataFrame(history.epochs))
    print(f"trained on {len(records)} records; final loss {history.totals[-1]:.4f}" if history.totals else "no epochs run")
    return EXIT_OK


def _load_controller(path):
    if not Path(path).is_dir():
        raise MissingCheckpointError(str(path))
    return DNASController.load_model(path)


def cmd_traverse(args):
    controller = _load_controller(args.checkpoint)
    out = _out_dir(args, "traverse")
    with open(args.base, encoding="utf-8") as f:
        obj = json.load(f)
    base = cell_from_json(obj.get("best") or obj)
    if args.lo >= args.hi:
        raise ConfigError("--lo/--hi", "lo must be smaller than hi")
    if args.steps < 2:
        raise ConfigError("--steps", "need at least 2 steps")
    if not 0 <= args.dim < controller.config.latent_dim:
        raise ConfigError("--dim", f"must lie in [0, {controller.config.latent_dim})")

    report = traverse(controller, base, args.dim, args.lo, args.hi, args.steps)
    frame = report.to_frame()
    write_csv(out / f"traversal_{args.dim}.csv", frame)
    if args.plots:
        write_figure(traversal_figure(frame, args.dim), out / f"traversal_{args.dim}.html")
    print(f"traversal of dim {args.dim}: mean edit distance {frame['edit_distance'].mean():.2f}")
    return EXIT_OK


def cmd_correlate(args):
    controller = _load_controller(args.checkpoint)
    out = _out_dir(args, "correlate")
    records = list(load_records(args.records).records.values())
    latent_dim = controller.config.latent_dim
    if args.dims == "all":
        dims = list(range(latent_dim))
    else:
        try:
            dims = [int(d) for d in args.dims.split(",")]
        except ValueError as e:
            raise ConfigError("--dims", "expected 'all' or comma-separated integers") from e
        if any(not 0 <= d < latent_dim for d in dims):
            raise ConfigError("--dims", f"indices must lie in [0, {latent_dim})")

    codes = controller.encode_means([r.cell for r in records])
    summary = []
    for dim in dims:
        report = correlate(codes, records, dim)
        frame = report.to_frame()
        write_csv(out / f"corr_{dim}.csv", frame)
        if args.plots:
            write_figure(correlation_figure(frame, dim), out / f"corr_{dim}.html")
        summary.append({"dim": dim, "kendall_tau": report.tau})
    summary = pd.DataFrame(summary)
    write_csv(out / "corr_summary.csv", summary)
    strongest = summary.iloc[summary["kendall_tau"].abs().argmax()]
    print(f"strongest factor: dim {int(strongest['dim'])} (tau {strongest['kendall_tau']:.3f})")
    return EXIT_OK


COMMANDS = {
    "search": cmd_search,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
    "train": cmd_train,
    "traverse": cmd_traverse,
    "correlate": cmd_correlate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, MissingCheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DNASError as e:
        logger.error("%s", e)
        return EXIT_RUNTIME
    except Exception:
        logger.exception("command %s failed", args.command)
        return EXIT_RUNTIME
