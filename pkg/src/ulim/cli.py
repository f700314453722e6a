"""Command-line entry point: ``ulim <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import plotting
from .config import RetrievalConfig, RunConfig
from .datamodel import load_data, read_catalog, save_data
from .dual_interest import train
from .evalharness import (CSV_COLUMNS, VARIANTS, VariantConfig, VariantModels, evaluate,
                          run_experiment, sweep_k, write_csv)
from .numerics import ConfigError
from .pgin import predict_topk, train_pgin
from .retrieval import bench_serving, build_indexes, cascaded_retrieve
from .storage import load_indexes, load_model, save_indexes, save_model
from .synth import synth_generate

log = logging.getLogger("ulim")

LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _run_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _variant_config(args) -> RunConfig:
    return VariantConfig(args.variant).apply(_run_config(args.config))


def _dump(obj):
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _history(data, user: int):
    if user not in data.histories:
        raise KeyError(f"user {user} has no history in the data directory")
    return data.histories[user]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    run = _run_config(args.config)
    data = synth_generate(run.data)
    save_data(data, args.out)
    log.info("wrote %d users, %d items to %s", len(data.histories), data.catalog.n_items, args.out)


def cmd_train(args):
    run = _variant_config(args)
    data = load_data(args.data)
    result = train(data, run.model, run.sequence, run.train)
    save_model(result.model, args.out, result.trace)


def cmd_train_pgin(args):
    run = _variant_config(args)
    data = load_data(args.data)
    result = train_pgin(data, run.sequence, run.pgin)
    save_model(result.model, args.out, result.trace)


def cmd_build_index(args):
    model = load_model(args.model)
    catalog = read_catalog(args.catalog)
    indexes = build_indexes(model, catalog, ivf=not args.no_ivf, seed=args.seed)
    save_indexes(indexes, args.out, meta={"model": str(args.model), "seed": args.seed})


def _serving(args):
    data = load_data(args.data)
    dual = load_model(args.model)
    pgin = load_model(args.pgin) if args.pgin else None
    indexes = load_indexes(args.index) if args.index else build_indexes(dual, data.catalog, seed=0)
    return data, dual, pgin, indexes


def cmd_retrieve(args):
    data, dual, pgin, indexes = _serving(args)
    cfg = RetrievalConfig(k=args.k, n_total=args.n, mode=args.mode, nprobe=args.nprobe,
                          quota=not args.no_quota, workers=args.workers)
    cfg.validate()
    result = cascaded_retrieve(_history(data, args.user), dual, pgin, indexes, cfg)
    _dump({"user_id": args.user, **result.to_json()})


def cmd_predict_cats(args):
    data = load_data(args.data)
    pgin = load_model(args.model)
    out = pgin.predict(_history(data, args.user))
    cats = predict_topk(out.y_hat, args.k)
    _dump({"user_id": args.user, "categories": cats, "p_poi": round(out.p_poi, 6),
           "y_hat_topk": [round(float(out.y_hat[c]), 6) for c in cats]})


def cmd_bench(args):
    data, dual, pgin, indexes = _serving(args)
    users = [int(json.loads(line)["user_id"]) for line in Path(args.load).read_text().splitlines() if line.strip()]
    histories = [_history(data, u) for u in users]
    grid = [("exact", 0, k) for k in args.ks] + [("ivf", p, k) for k in args.ks for p in args.nprobes]
    base = RetrievalConfig(n_total=args.n, quota=not args.no_quota, workers=args.workers)
    rows = bench_serving(histories, dual, pgin, indexes, base, grid, repeats=args.repeats)
    write_csv(args.out, rows)
    if not args.no_plot:
        plotting.plot_bench(rows, plotting.figure_path(args.out))


EVAL_SPEC_KEYS = {"data", "model", "pgin", "index", "variant", "cutoffs", "k", "mode", "nprobe", "quota"}


def cmd_eval(args):
    spec = json.loads(Path(args.spec).read_text())
    unknown = sorted(set(spec) - EVAL_SPEC_KEYS)
    if unknown:
        raise ConfigError(f"{args.spec}: unknown keys {unknown}")
    for key in ("data", "model"):
        if key not in spec:
            raise ConfigError(f"{args.spec}: missing required key {key!r}")
    data = load_data(spec["data"])
    dual = load_model(spec["model"])
    pgin = load_model(spec["pgin"]) if spec.get("pgin") else None
    indexes = load_indexes(spec["index"]) if spec.get("index") else build_indexes(dual, data.catalog, ivf=False)
    run = RunConfig()
    models = VariantModels(spec.get("variant", "ulim"), run, dual, pgin, indexes)
    rows = evaluate(models, data, spec.get("cutoffs", run.eval.cutoffs), spec.get("k", run.retrieval.k),
                    mode=spec.get("mode", "exact"), nprobe=spec.get("nprobe", 0),
                    quota=spec.get("quota", True), timing=args.timing)
    write_csv(args.out, rows, CSV_COLUMNS)
    if not args.no_plot:
        plotting.plot_hit_rate(rows, plotting.figure_path(args.out))


def cmd_ablate(args):
    run = _run_config(args.config)
    rows = run_experiment(run, seeds=args.seeds, timing=args.timing)
    write_csv(args.out, rows, CSV_COLUMNS + ["seed"])
    if not args.no_plot:
        plotting.plot_ablation(rows, plotting.figure_path(args.out))


def cmd_sweep_k(args):
    data = load_data(args.data)
    dual = load_model(args.model)
    pgin = load_model(args.pgin)
    indexes = load_indexes(args.index) if args.index else build_indexes(dual, data.catalog, ivf=False)
    models = VariantModels("ulim", RunConfig(), dual, pgin, indexes)
    bad = [k for k in args.ks if not 0 <= k <= pgin.n_categories]
    if bad:
        raise ConfigError(f"K values {bad} outside [0, {pgin.n_categories}]")
    rows = sweep_k(models, data, args.ks, args.cutoff, timing=not args.no_timing)
    write_csv(args.out, rows, CSV_COLUMNS + ["mean_ms"])
    if not args.no_plot:
        plotting.plot_sweep(rows, plotting.figure_path(args.out))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ulim",
        description="Long-term multi-interest retrieval: data generation, training, indexing, "
                    "serving and offline evaluation.")
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>")
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic behavior log")
    p.add_argument("--config", help="run config JSON (its 'data' section is used)")
    p.add_argument("--out", required=True)

    for name, func, text in (("train", cmd_train, "train the dual-interest model"),
                             ("train-pgin", cmd_train_pgin, "train the next-category network")):
        p = add(name, func, text)
        p.add_argument("--data", required=True)
        p.add_argument("--config")
        p.add_argument("--variant", default="ulim", choices=list(VARIANTS))
        p.add_argument("--out", required=True)

    p = add("build-index", cmd_build_index, "embed the catalog and build per-category indexes")
    p.add_argument("--model", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-ivf", action="store_true", help="skip the inverted-file structures")

    def serving_args(p, pgin_required=False):
        p.add_argument("--data", required=True)
        p.add_argument("--model", required=True, help="dual-interest model dir")
        p.add_argument("--pgin", required=pgin_required, help="PGIN model dir")
        p.add_argument("--index", help="index dir (built in memory when omitted)")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--no-quota", action="store_true")

    p = add("retrieve", cmd_retrieve, "cascaded retrieval for one user")
    serving_args(p)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--mode", choices=["exact", "ivf"], default="exact")
    p.add_argument("--nprobe", type=int, default=0)

    p = add("predict-cats", cmd_predict_cats, "top-K next categories for one user")
    p.add_argument("--model", required=True, help="PGIN model dir")
    p.add_argument("--data", required=True)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--k", type=int, default=4)

    p = add("bench", cmd_bench, "serving latency and recall against exact search")
    serving_args(p)
    p.add_argument("--load", required=True, help="JSON-lines file of {user_id}")
    p.add_argument("--out", required=True)
    p.add_argument("--ks", type=_int_list, default=[1, 4])
    p.add_argument("--nprobes", type=_int_list, default=[1, 2, 4, 0])
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--no-plot", action="store_true")

    p = add("eval", cmd_eval, "hit rate of trained models on held-out next clicks")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true", help="fill the latency columns")
    p.add_argument("--no-plot", action="store_true")

    p = add("ablate", cmd_ablate, "train and evaluate every variant on synthetic data")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--timing", action="store_true")
    p.add_argument("--no-plot", action="store_true")

    p = add("sweep-k", cmd_sweep_k, "hit rate and latency against K (exact search, no quota)")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--pgin", required=True)
    p.add_argument("--index")
    p.add_argument("--ks", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--cutoff", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--no-plot", action="store_true")
    return parser


def main(argv=None) -> int:
    level = os.environ.get("ULIM_LOG", "warning").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001
        log.debug("stage failed", exc_info=True)
        # str(KeyError) wraps the message in quotes
        message = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        json.dump({"error": type(exc).__name__, "command": args.command, "message": message}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
