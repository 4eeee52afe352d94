"""Command-line entry point.

Exit codes: 0 ok, 1 usage or configuration error, 2 numerical abort,
3 failed gradient check.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import experiments as ex
from .gradcheck import TOLERANCE, run_gradcheck
from .model import NumericalError, RcfrModel, fit
from .numerics import derive_seed

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _config_overrides(args, base: dict) -> dict:
    doc = dict(base)
    if getattr(args, "config", None):
        doc.update(ex.load_config_json(args.config))
    for flag, key in (("alpha", "alpha"), ("lambda_w", "lambda_w"), ("lambda_h", "lambda_h"),
                      ("max_epochs", "max_epochs"), ("alpha_mode", "alpha_mode")):
        v = getattr(args, flag, None)
        if v is not None:
            doc[key] = v
    return doc


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout, False
    return open(path, "w", newline="", encoding="utf-8"), True


def _emit(reports, path):
    fh, close = _open_out(path)
    try:
        ex.write_results(reports, fh)
    finally:
        if close:
            fh.close()


# ---------------------------------------------------------------- subcommands


def cmd_synth_da(args) -> int:
    if args.method not in ex.DA_METHODS:
        raise UsageError(f"unknown method {args.method!r}; valid methods: {', '.join(ex.DA_METHODS)}")
    cfg = ex.da_config().replace(**_config_overrides(args, {}))
    cfg = cfg.replace(seed=args.seed)
    m = args.m if args.m is not None else args.n
    source, target, _, truth = ex.gen_synthetic_da(args.n, m, args.d, args.seed)
    rep = ex.run_da_cell(args.n, m, args.d, args.seed, args.method, cfg, timing=args.timing)
    if args.model_out:
        if args.method == "rcfr":
            model = fit(source, target, cfg)[0]
        else:
            model = ex.fit_da(args.method, source, target, truth, cfg)
        model.save(args.model_out, cfg)
    _emit([rep], args.out)
    return EXIT_OK


def _cate_datasets(args):
    if args.data:
        sets = ex.load_cate_csv(args.data, args.n_features)
        if args.realizations:
            sets = sets[: args.realizations]
        return sets, "csv:" + ",".join(args.data)
    spec = ex.CateSpec(gamma=args.gamma, effect=args.synthetic, noise=args.noise)
    count = args.realizations or 10
    sets = [ex.gen_synthetic_cate(args.n, args.d, derive_seed(args.seed, 10_000 + i), spec) for i in range(count)]
    name = f"synthetic-cate(effect={args.synthetic},gamma={args.gamma},noise={args.noise},n={args.n},d={args.d})"
    return sets, name


def cmd_cate(args) -> int:
    if args.method not in ex.CATE_METHODS:
        raise UsageError(f"unknown method {args.method!r}; valid methods: {', '.join(ex.CATE_METHODS)}")
    if not args.data and not args.synthetic:
        raise UsageError("give --data PATH or --synthetic {linear,quadratic}")
    cfg = ex.cate_config().replace(**_config_overrides(args, {}))
    split = tuple(float(v) for v in args.split.split(","))
    sets, name = _cate_datasets(args)
    oracle = cfg.alpha_mode == "oracle" and args.method in ("rcfr", "rcfr-w1")
    reports = []
    for i, data in enumerate(sets):
        seed = derive_seed(args.seed, i)
        if oracle:
            rep = ex.run_cate_oracle(data, cfg, seed, f"{name}#{i}", learn_weights=args.method == "rcfr", split=split)
        else:
            rep = ex.run_cate_realization(data, args.method, cfg, seed, f"{name}#{i}", split, timing=args.timing)
        reports.append(rep)
    label = reports[0].method
    if cfg.alpha_mode == "adaptive" and args.method in ("rcfr", "rcfr-w1"):
        label = f"{args.method}-adaptive"
        for r in reports:
            r.method = label
    summary = ex.summarize(reports, label, name)
    _emit(reports + summary, args.out)
    print(ex.table1_line(*summary), file=sys.stderr)
    if args.data and args.method == "rcfr":
        first = np.array([r.rmse_tau for r in reports[:10]])
        verdict = "met" if first.mean() <= 0.85 else "not met"
        print(f"informational: mean rmse_tau over first {first.size} realizations = {first.mean():.3f} "
              f"(soft target 0.85 {verdict})", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    doc = ex.load_config_json(args.config)
    cells, master = ex.sweep_cells_from_config(doc)
    if args.seed is not None:
        master = args.seed
    if not cells:
        raise UsageError("sweep grid is empty")
    reports = ex.run_sweep(cells, jobs=args.jobs, master_seed=master, timing=args.timing)
    for i, r in enumerate(reports):
        if r.error:
            print(f"cell {i} failed: {r.error}", file=sys.stderr)
    _emit(reports, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.seed)
    ok = True
    for name, err in report.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name:<28s} max rel err {err:.3e}  {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_inspect(args) -> int:
    path = args.path
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if "header" in doc:
            model = RcfrModel.from_dict(doc)
            hdr = doc["header"]
            print(f"model: in_dim={model.in_dim} rep_dim={model.rep_dim} arms={model.n_arms} "
                  f"alpha={hdr['alpha']:.6g} normalize_rep={model.normalize_rep}")
            if hdr.get("config"):
                print("config: " + json.dumps(hdr["config"], sort_keys=True))
        else:
            cells, master = ex.sweep_cells_from_config(doc)
            print(f"sweep: {len(cells)} cells, master seed {master}")
        return EXIT_OK
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    if header == ex.RESULT_COLUMNS:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        print(f"results: {len(rows)} rows, methods {sorted({r['method'] for r in rows})}")
        return EXIT_OK
    sets = ex.load_cate_csv(path, args.n_features)
    for i, ds in enumerate(sets):
        tau = f" mean tau={ds.tau.mean():.4f}" if ds.has_truth else ""
        print(f"realization {i}: n={len(ds)} d={ds.x.shape[1]} treated={ds.t.mean():.3f}{tau}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rcfr", description="Re-weighted counterfactual regression experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common_train(sp):
        sp.add_argument("--config", help="JSON file of TrainConfig fields (explicit flags win)")
        sp.add_argument("--alpha", type=float, help="imbalance penalty weight")
        sp.add_argument("--lambda-w", dest="lambda_w", type=float, help="weight-norm penalty")
        sp.add_argument("--lambda-h", dest="lambda_h", type=float, help="hypothesis L2 penalty")
        sp.add_argument("--max-epochs", dest="max_epochs", type=int, help="training epochs cap")
        sp.add_argument("--seed", type=int, default=0, help="master seed for all randomness (default 0)")
        sp.add_argument("--out", default="-", help="results CSV path ('-' for standard output)")
        sp.add_argument("--timing", action="store_true", help="fill wall_ms (makes output non-reproducible)")

    s = sub.add_parser("synth-da", help="one synthetic domain-adaptation cell")
    s.add_argument("--n", type=int, default=100, help="labeled source samples")
    s.add_argument("--m", type=int, help="unlabeled target samples (default: n)")
    s.add_argument("--d", type=int, default=10, help="input dimension (default 10)")
    s.add_argument("--method", default="rcfr", help=f"one of {', '.join(ex.DA_METHODS)}")
    s.add_argument("--model-out", help="write the trained model as JSON")
    common_train(s)
    s.set_defaults(func=cmd_synth_da)

    c = sub.add_parser("cate", help="treatment-effect experiment over realizations")
    c.add_argument("--data", nargs="+", help="CSV file(s) in the treatment,y_factual,y_cfactual,mu0,mu1,x1..x25 layout")
    c.add_argument("--n-features", dest="n_features", type=int, default=ex.IHDP_FEATURES, help="covariate columns per block")
    c.add_argument("--synthetic", choices=("linear", "quadratic"), help="use generated data with this effect shape")
    c.add_argument("--n", type=int, default=500, help="rows per synthetic realization")
    c.add_argument("--d", type=int, default=5, help="covariates per synthetic realization")
    c.add_argument("--gamma", type=float, default=2.0, help="synthetic confounding strength")
    c.add_argument("--noise", type=float, default=0.0, help="synthetic outcome noise std")
    c.add_argument("--realizations", type=int, help="number of realizations (synthetic default 10; files: limit)")
    c.add_argument("--method", default="rcfr", help=f"one of {', '.join(ex.CATE_METHODS)}")
    c.add_argument("--alpha-mode", dest="alpha_mode", choices=("fixed", "adaptive", "oracle"), help="how alpha is set")
    c.add_argument("--split", default=",".join(str(v) for v in ex.SPLIT), help="fit,early-stop,test fractions")
    common_train(c)
    c.set_defaults(func=cmd_cate)

    w = sub.add_parser("sweep", help="grid of configurations from a JSON sweep document")
    w.add_argument("--config", required=True, help="sweep JSON: master_seed, methods, datasets, base_config, grid")
    w.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    w.add_argument("--seed", type=int, help="override the document's master seed")
    w.add_argument("--out", default="-", help="results CSV path ('-' for standard output)")
    w.add_argument("--timing", action="store_true", help="fill wall_ms (makes output non-reproducible)")
    w.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    g.add_argument("--seed", type=int, default=0, help="seed for the random test problems")
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="summarise a model JSON, sweep JSON, dataset CSV or results CSV")
    i.add_argument("path", help="file to summarise")
    i.add_argument("--n-features", dest="n_features", type=int, default=ex.IHDP_FEATURES, help="covariate columns per block")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"rcfr: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ex.SchemaError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"rcfr: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
