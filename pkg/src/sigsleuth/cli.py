"""Command-line interface.

Every command takes its inputs as explicit file paths and writes one report.
All randomness flows from ``--seed``; ``--workers`` only changes speed.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
import argparse
import csv
import datetime
import io
import json
import os
import sys

from . import __version__
from . import calibrate, data, simlab, streams, strength, subspace
from .errors import ConfigError, DataError, SigsleuthError
from .forest import Forest, ForestConfig, fit as fit_forest
from .teststats import Statistic

STATISTICS = [s.value for s in Statistic]
METHODS = ["asymptotic", "bootstrap", "permutation", "slow-permutation"]


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _float_list(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _distortion(text):
    col, _, factor = text.rpartition(":")
    if not col:
        col, factor = "x0", text
    try:
        return col, float(factor)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected COLUMN:FACTOR, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _forest_args(p, trees=100):
    g = p.add_argument_group("forest")
    g.add_argument("--trees", type=_positive_int, default=trees)
    g.add_argument("--min-leaf", type=_positive_int, default=5)
    g.add_argument("--max-depth", type=_positive_int, default=None)
    g.add_argument("--features", default="sqrt", help="features tried per split: 'sqrt' or an integer")
    g.add_argument("--platt", action="store_true", help="recalibrate votes on out-of-bag predictions")


def _forest_config(args, seed_key):
    fps = args.features
    if fps != "sqrt":
        try:
            fps = int(fps)
        except ValueError:
            raise ConfigError(f"--features must be 'sqrt' or an integer, got {fps!r}") from None
    return ForestConfig(
        n_trees=args.trees,
        min_leaf=args.min_leaf,
        max_depth=args.max_depth,
        features_per_split=fps,
        seed=streams.int_seed(args.seed, seed_key),
        platt=args.platt,
    )


def _data_args(p, signal=False):
    p.add_argument("--background", required=True, help="background CSV")
    p.add_argument("--experimental", required=True, help="experimental CSV")
    if signal:
        p.add_argument("--signal", help="signal CSV (model-dependent statistics)")
    p.add_argument("--test-size", type=_positive_int, default=None,
                   help="rows per test half; default half of the smaller sample")


def _out_arg(p):
    p.add_argument("--out", "-o", help="output file; stdout when omitted")


def build_parser():
    parser = _Parser(prog="sigsleuth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sigsleuth {__version__}")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=_positive_int, default=None,
                        help=f"parallel workers; default from {streams.WORKERS_ENV} or 1")
    parser.add_argument("--no-timestamp", action="store_true", help="omit the timestamp and runtimes")
    parser.add_argument("--format", choices=("json", "csv"), default=None,
                        help="report format; power-study defaults to csv, the rest to json")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw synthetic background/experimental/signal samples")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--toy", choices=("fig3",), help="two-dimensional line-signal toy")
    src.add_argument("--model", default="desk", help="'desk', 'misspecified' or a JSON file with "
                     "'background' and 'signal' mixtures")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--n", type=_positive_int, default=2000, help="experimental rows")
    p.add_argument("--m-b", type=_positive_int, default=None, help="background rows; default n")
    p.add_argument("--m-s", type=int, default=1000, help="labelled signal rows; 0 for none")
    p.add_argument("--distort", type=_distortion, default=None, metavar="COLUMN:FACTOR",
                   help="shrink a column of the experimental signal rows towards its minimum")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("preprocess", help="filter, transform and subsample an event CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--higgs", action="store_true", help="two-jet Higgs challenge recipe")
    p.add_argument("--jet", type=int, default=None, help="keep rows with this jet count")
    p.add_argument("--jet-column", default="PRI_jet_num", help="column holding the jet count")
    p.add_argument("--drop", nargs="*", default=(), help="column patterns to drop")
    p.add_argument("--log", nargs="*", default=(), help="columns to log-transform")
    p.add_argument("--rotate-anchor", default=None, help="phi column the others are measured from")
    p.add_argument("--sample", type=int, default=None, help="draw this many rows by weight")
    p.add_argument("--replace", action="store_true", help="sample with replacement")

    p = sub.add_parser("train", help="train a forest separating two samples")
    p.add_argument("--class0", required=True, help="CSV for label 0 (background)")
    p.add_argument("--class1", required=True, help="CSV for label 1 (experimental or signal)")
    p.add_argument("--out", "-o", required=True)
    _forest_args(p)

    p = sub.add_parser("test", help="test for a signal in experimental data")
    _data_args(p, signal=True)
    p.add_argument("--stat", required=True, choices=STATISTICS)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--cycles", type=_positive_int, default=1000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--budget", type=_positive_int, default=calibrate.DEFAULT_RETRAIN_BUDGET,
                   help="maximum trees trained by a slow permutation test")
    p.add_argument("--allow-expensive", action="store_true")
    _forest_args(p)
    _out_arg(p)

    p = sub.add_parser("estimate-strength", help="estimate the signal proportion")
    _data_args(p)
    p.add_argument("--T", dest="T", type=float, default=strength.DEFAULT_THRESHOLD)
    p.add_argument("--b", dest="b", type=float, default=strength.DEFAULT_BIN_WIDTH)
    p.add_argument("--cycles", type=_positive_int, default=100, help="bootstrap cycles")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--intervals", choices=("all", "none"), default="all",
                   help="'none' skips the bootstrap and reports the GLM interval only")
    _forest_args(p)
    _out_arg(p)

    p = sub.add_parser("active-subspace", help="directions the classifier output depends on")
    p.add_argument("--background", required=True)
    p.add_argument("--experimental", required=True)
    p.add_argument("--forest", help="trained forest; gradients are then taken at all given rows")
    p.add_argument("--test-size", type=_positive_int, default=None)
    p.add_argument("--h", type=float, default=0.5, help="kernel scale divisor")
    p.add_argument("--eigenvectors", type=_positive_int, default=None, help="number of vectors emitted")
    p.add_argument("--cycles", type=int, default=None,
                   help="bootstrap cycles (default 500 when training, 0 with --forest)")
    p.add_argument("--alpha", type=float, default=0.05)
    _forest_args(p)
    _out_arg(p)

    p = sub.add_parser("power-study", help="rejection rates over simulated replicates")
    p.add_argument("--model", default="desk")
    p.add_argument("--tests", default="mi-auc:permutation",
                   help="comma-separated STAT:METHOD pairs")
    p.add_argument("--lambdas", type=_float_list, default=(0.0, 0.05, 0.1, 0.2))
    p.add_argument("--ns", type=_int_list, default=(2000,))
    p.add_argument("--m-b", type=_positive_int, default=None)
    p.add_argument("--m-s", type=_positive_int, default=1000)
    p.add_argument("--replicates", type=_positive_int, default=100)
    p.add_argument("--cycles", type=_positive_int, default=200)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--distort", type=_distortion, default=None, metavar="COLUMN:FACTOR")
    p.add_argument("--allow-expensive", action="store_true")
    _forest_args(p, trees=50)
    _out_arg(p)
    return parser


def _load(path):
    if not os.path.isfile(path):
        raise ConfigError(f"input file not found: {path}")
    return data.load_csv(path)


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
        return
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _json_report(doc, args):
    doc = {"command": args.command, "version": __version__, **doc}
    if not args.no_timestamp:
        doc["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def _split_for(args, X, W):
    seed = streams.int_seed(args.seed, "split")
    return data.SplitSpec.halves(X.n, W.n, seed, args.test_size)


def _models(name):
    if name == "desk":
        return simlab.desk_models()
    if name == "misspecified":
        return simlab.misspecified_models()
    if not os.path.isfile(name):
        raise ConfigError(f"unknown model {name!r}: expected 'desk', 'misspecified' or a JSON file")
    with open(name, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return simlab.MixtureModel.from_dict(doc["background"]), simlab.MixtureModel.from_dict(doc["signal"])
    except KeyError as exc:
        raise ConfigError(f"{name}: missing mixture {exc}") from None


def cmd_simulate(args):
    os.makedirs(args.out_dir, exist_ok=True)
    m_b = args.m_b or args.n
    written = {}
    if args.toy == "fig3":
        X, W = simlab.fig3_toy(m_b, args.n, args.lam, args.seed)
        tables = {"background": X, "experimental": W}
    else:
        bg, sig = _models(args.model)
        X = simlab.sample_mixture(bg, m_b, streams.rng(args.seed, "background"), data.BACKGROUND)
        W = simlab.make_experimental(bg, sig, args.n, args.lam, streams.rng(args.seed, "experimental"))
        if args.distort is not None:
            W = simlab.distort_signal(W, *args.distort)
        tables = {"background": X, "experimental": W}
        if args.m_s > 0:
            Y = simlab.sample_mixture(sig, args.m_s, streams.rng(args.seed, "signal"), data.SIGNAL)
            tables["signal"] = Y.replace(column_names=X.column_names)
        with open(os.path.join(args.out_dir, "models.json"), "w", encoding="utf-8") as fh:
            json.dump({"background": bg.to_dict(), "signal": sig.to_dict()}, fh, indent=2)
        written["models"] = "models.json"
    for name, table in tables.items():
        data.write_csv(table, os.path.join(args.out_dir, f"{name}.csv"))
        written[name] = f"{name}.csv"
    doc = {"files": written, "lambda": args.lam, "rows": {k: t.n for k, t in tables.items()}}
    _emit(_json_report(doc, args), os.path.join(args.out_dir, "simulate.json"))
    return 0


def cmd_preprocess(args):
    if args.higgs:
        recipe = data.higgs_recipe()
    else:
        recipe = data.PreprocessRecipe(
            jet_filter=args.jet,
            jet_column=args.jet_column,
            drop_columns=tuple(args.drop),
            log_columns=tuple(args.log),
            phi_rotation_anchor=args.rotate_anchor,
        )
    if not os.path.isfile(args.input):
        raise ConfigError(f"input file not found: {args.input}")
    table = data.preprocess(data.load_csv(args.input, recipe), recipe)
    if args.sample is not None:
        table = data.weighted_sample(table, args.sample, args.replace, streams.rng(args.seed, "preprocess"))
    data.write_csv(table, args.out)
    return 0


def cmd_train(args):
    X, Y = _load(args.class0), _load(args.class1)
    if X.column_names != Y.column_names:
        raise DataError("the two samples have different columns")
    f = fit_forest(X, Y, _forest_config(args, "forest"), workers=args.workers)
    f.save(args.out)
    return 0


def cmd_test(args):
    stat = Statistic.parse(args.stat)
    method = calibrate.NullMethod.parse(args.method)
    if stat.supervised and not args.signal:
        raise ConfigError(f"{stat.value} needs --signal")
    X, W = _load(args.background), _load(args.experimental)
    Y = _load(args.signal) if stat.supervised else None
    for other in (W, Y):
        if other is not None and other.column_names != X.column_names:
            raise DataError("input samples have different columns")
    spec = calibrate.NullSpec(method, args.cycles, streams.int_seed(args.seed, "null"), args.alpha)
    cfg = _forest_config(args, "forest")
    (report,), _ = calibrate.run_tests(
        [(stat, spec)], X, W, Y, _split_for(args, X, W), cfg, slow_cfg=cfg,
        budget=args.budget, allow_expensive=args.allow_expensive, workers=args.workers,
    )
    _emit(_json_report(report.to_dict(), args), args.out)
    return 0


def cmd_estimate_strength(args):
    X, W = _load(args.background), _load(args.experimental)
    if W.column_names != X.column_names:
        raise DataError("input samples have different columns")
    cfg = _forest_config(args, "forest")
    split = _split_for(args, X, W)
    if args.intervals == "none":
        est = strength.estimate_lambda(X, W, cfg, split, args.T, args.b, args.alpha, args.workers)
    else:
        est = strength.bootstrap_lambda(X, W, cfg, split, args.T, args.b, args.cycles, args.alpha,
                                        streams.int_seed(args.seed, "bootstrap"), args.workers)
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(est.fit.edges[:-1], est.fit.edges[1:], est.fit.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        _emit(buf.getvalue(), args.out)
    else:
        _emit(_json_report(est.to_dict(), args), args.out)
    return 0


def cmd_active_subspace(args):
    X, W = _load(args.background), _load(args.experimental)
    if W.column_names != X.column_names:
        raise DataError("input samples have different columns")
    scfg = subspace.SmootherConfig(h=args.h)
    if args.forest:
        if args.cycles:
            raise ConfigError("bootstrap bands need re-training; drop --forest or set --cycles 0")
        if not os.path.isfile(args.forest):
            raise ConfigError(f"forest file not found: {args.forest}")
        f = Forest.load(args.forest)
        pts = data.EventTable.concat([X, W])
        g = subspace.local_linear_gradients(pts.features, subspace.logit_surface(f, pts, scfg.epsilon), scfg)
        report = subspace.active_subspace(g, X.column_names)
    else:
        cycles = 500 if args.cycles is None else args.cycles
        cfg = _forest_config(args, "forest")
        split = _split_for(args, X, W)
        if cycles:
            report = subspace.bootstrap_subspace(X, W, cfg, scfg, split, cycles, args.alpha,
                                                 streams.int_seed(args.seed, "bootstrap"),
                                                 args.eigenvectors, args.workers)
        else:
            report = subspace.subspace_from_data(X, W, cfg, scfg, split, args.workers)
    doc = report.to_dict(args.eigenvectors)
    doc["h"] = args.h
    _emit(_json_report(doc, args), args.out)
    return 0


def _parse_tests(text, cycles, seed):
    tests = []
    for item in text.split(","):
        stat, _, method = item.strip().partition(":")
        if not method:
            raise ConfigError(f"expected STAT:METHOD, got {item!r}")
        tests.append((Statistic.parse(stat), calibrate.NullSpec(method, cycles, seed)))
    return tests


def cmd_power_study(args):
    bg, sig = _models(args.model)
    design = simlab.ExperimentDesign(
        lambdas=args.lambdas, ns=args.ns, m_b=args.m_b, m_s=args.m_s, replicates=args.replicates,
        seed=args.seed, alpha=args.alpha, distortion=args.distort,
    )
    tests = _parse_tests(args.tests, args.cycles, streams.int_seed(args.seed, "null"))
    cfg = _forest_config(args, "forest")
    table = simlab.power_study(design, bg, sig, tests, cfg, slow_cfg=cfg,
                               allow_expensive=args.allow_expensive, workers=args.workers)
    timing = not args.no_timestamp
    if (args.format or "csv") == "csv":
        _emit(table.to_csv(timing), args.out)
    else:
        _emit(_json_report(table.to_dict(timing), args), args.out)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "test": cmd_test,
    "estimate-strength": cmd_estimate_strength,
    "active-subspace": cmd_active_subspace,
    "power-study": cmd_power_study,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.workers is None:
            args.workers = streams.resolve_workers()
        return COMMANDS[args.command](args)
    except SigsleuthError as exc:
        print(f"sigsleuth: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"sigsleuth: error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
