"""Command line interface.

Subcommands: simulate, fit, predict, summarize, benchmark. Runs are driven
by flags, an optional JSON config file, or both; flags win on conflict. The
fully resolved configuration and the package version are embedded in every
artifact (JSON reports carry them as fields, CSV and text artifacts as a
leading ``#`` comment line readable with ``pandas.read_csv(comment="#")``).

Exit codes: 0 success, 1 validation or usage error, 2 estimation refused
(for example an overlap violation).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pandas as pd

from . import __version__, analysis, kernels, sampler, simbench
from .data import DataError, from_frame
from .sampler import EstimationRefused, Hyperparams


class _Parser(argparse.ArgumentParser):
    """argparse parser that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


_HP_KEYS = tuple(Hyperparams.__dataclass_fields__)


def _add_hp_flags(sp) -> None:
    for key in _HP_KEYS:
        flag = "--" + key.replace("_", "-")
        sp.add_argument(flag, type=float, default=None, dest=key,
                        help=f"override Hyperparams.{key}")


def _hp_from(resolved: dict) -> Hyperparams:
    kwargs = {}
    for key in _HP_KEYS:
        val = resolved.get(key)
        if val is None:
            continue
        field_type = Hyperparams.__dataclass_fields__[key].type
        kwargs[key] = int(val) if field_type == "int" else float(val)
    return Hyperparams(**kwargs)


def _resolve(args, parser, defaults: dict) -> dict:
    """Overlay CLI flags on the JSON config on the hard defaults."""
    cfg = {}
    path = getattr(args, "config", None)
    if path:
        with open(path) as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            parser.error("config file must hold a JSON object")
        unknown = sorted(set(cfg) - set(defaults))
        if unknown:
            parser.error(f"unknown config keys: {unknown}")
    resolved = {}
    for key, hard in defaults.items():
        val = getattr(args, key, None)
        if val is None:
            val = cfg.get(key, hard)
        resolved[key] = val
    return resolved


def _comment_line(command: str, resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"),
                      default=str)
    return f"# lbcf {__version__} {command} config={blob}\n"


def _backend_from_name(name, parser):
    if name in (None, "auto"):
        return None
    table = kernels.available_backends()
    if name not in table:
        parser.error(f"backend {name!r} not available; "
                     f"choices: {sorted(table)} or auto")
    return table[name]


def _default_threads() -> int:
    return os.cpu_count() or 1


# -- simulate -----------------------------------------------------------------

def _cmd_simulate(args, parser) -> int:
    defaults = {"dgp": None, "n_train": 500, "n_test": 1000,
                "sigma_dgp": 1.0, "null_tau": False, "seed": 0,
                "out_dir": None}
    r = _resolve(args, parser, defaults)
    if r["dgp"] not in (1, 2):
        parser.error("--dgp must be 1 or 2")
    if r["out_dir"] is None:
        parser.error("--out-dir is required")
    if r["dgp"] == 2 and (args.n_test is not None
                          or args.sigma_dgp is not None or args.null_tau):
        parser.error("--n-test, --sigma-dgp and --null-tau apply to dgp 1")
    os.makedirs(r["out_dir"], exist_ok=True)
    comment = _comment_line("simulate", r)

    def _write(name, frame):
        path = os.path.join(r["out_dir"], name)
        with open(path, "w") as fh:
            fh.write(comment)
            frame.to_csv(fh, index=False)

    if r["dgp"] == 1:
        inst = simbench.gen_dgp1(int(r["n_train"]), int(r["n_test"]),
                                 float(r["sigma_dgp"]), int(r["seed"]),
                                 null_tau=bool(r["null_tau"]))
        _write("train.csv", inst.train_frame())
        _write("test.csv", inst.test_frame())
        _write("truth_train.csv", inst.truth_frame("train"))
        _write("truth_test.csv", inst.truth_frame("test"))
    else:
        inst = simbench.gen_dgp2(int(r["n_train"]), int(r["seed"]))
        _write("data.csv", inst.frame())
        truth = pd.DataFrame({"wave": sorted(inst.ate),
                              "ate": [inst.ate[w] for w in sorted(inst.ate)]})
        _write("truth.csv", truth)
    manifest = {"command": "simulate", "package_version": __version__,
                "config": r}
    with open(os.path.join(r["out_dir"], "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote dgp{r['dgp']} files to {r['out_dir']}", file=sys.stderr)
    return 0


# -- fit ----------------------------------------------------------------------

def _fit_chain_worker(payload):
    data, hp, propensity, seed, n_chains, backend_name, chain = payload
    backend = None if backend_name in (None, "auto") \
        else kernels.available_backends()[backend_name]
    return sampler.fit(data, hp, propensity=propensity, seed=seed,
                       n_chains=n_chains, keep_forests=True, backend=backend,
                       chain_filter={chain})


def _cmd_fit(args, parser) -> int:
    defaults = {"data": None, "out": None, "seed": 0, "n_chains": 1,
                "propensity_method": "probit_forest", "weight_col": None,
                "threads": None, "backend": "auto"}
    defaults.update({key: None for key in _HP_KEYS})
    r = _resolve(args, parser, defaults)
    if r["data"] is None or r["out"] is None:
        parser.error("--data and --out are required")
    threads = int(r["threads"]) if r["threads"] is not None \
        else _default_threads()
    r["threads"] = threads
    backend = _backend_from_name(r["backend"], parser)

    df = pd.read_csv(r["data"], comment="#")
    if r["weight_col"]:
        if r["weight_col"] not in df.columns:
            raise DataError(f"weight column {r['weight_col']!r} not in data")
        df = df.rename(columns={r["weight_col"]: "weight"})
    data = from_frame(df)
    hp = _hp_from(r)
    hpr = hp.resolved()
    r.update({key: hpr[key] for key in _HP_KEYS})

    n_chains = int(r["n_chains"])
    total = len(data.pv) if data.pv is not None else n_chains
    print(f"fitting {total} chain(s) on {data.n} subjects, "
          f"{data.T} waves", file=sys.stderr)
    if threads > 1 and total > 1:
        payloads = [(data, hp, r["propensity_method"], int(r["seed"]),
                     n_chains, r["backend"], c) for c in range(total)]
        with ProcessPoolExecutor(max_workers=min(threads, total)) as pool:
            parts = list(pool.map(_fit_chain_worker, payloads))
        draws = sampler.merge_chain_runs(parts)
    else:
        draws = sampler.fit(data, hp, propensity=r["propensity_method"],
                            seed=int(r["seed"]), n_chains=n_chains,
                            keep_forests=True, backend=backend,
                            progress=sys.stderr)
    draws.meta["cli"] = {"command": "fit", "config": r,
                         "package_version": __version__}
    sampler.save_draws(draws, r["out"])
    print(f"saved {draws.n_draws} draws from {total} chain(s) "
          f"to {r['out']}", file=sys.stderr)
    return 0


# -- predict ------------------------------------------------------------------

def _cmd_predict(args, parser) -> int:
    defaults = {"draws": None, "data": None, "out": None, "level": 0.95,
                "backend": "auto"}
    r = _resolve(args, parser, defaults)
    if r["draws"] is None or r["data"] is None or r["out"] is None:
        parser.error("--draws, --data and --out are required")
    backend = _backend_from_name(r["backend"], parser)
    level = float(r["level"])

    draws = sampler.load_draws(r["draws"])
    newdata = from_frame(pd.read_csv(r["data"], comment="#"))
    comp = sampler.predict(draws, newdata, backend=backend)
    T = draws.meta["T"]

    cols = {"id": list(map(str, newdata.ids))}

    def _summary(prefix, mat):
        lo, hi = analysis.central_interval(mat, level)
        cols[f"{prefix}_mean"] = mat.mean(axis=0)
        cols[f"{prefix}_lo"] = lo
        cols[f"{prefix}_hi"] = hi

    _summary("mu", comp["mu"])
    for w in range(2, T + 1):
        _summary(f"delta.{w}", comp["delta"][w])
        _summary(f"tau.{w}", comp["tau"][w])
    for t in range(1, T + 1):
        _summary(f"yhat.{t}", comp["yhat"][:, :, t - 1])
    with open(r["out"], "w") as fh:
        fh.write(_comment_line("predict", r))
        pd.DataFrame(cols).to_csv(fh, index=False)
    print(f"wrote predictions for {newdata.n} rows to {r['out']}",
          file=sys.stderr)
    return 0


# -- summarize ----------------------------------------------------------------

def _cmd_summarize(args, parser) -> int:
    defaults = {"draws": None, "out_dir": None, "level": 0.95}
    r = _resolve(args, parser, defaults)
    if r["draws"] is None or r["out_dir"] is None:
        parser.error("--draws and --out-dir are required")
    level = float(r["level"])
    draws = sampler.load_draws(r["draws"])
    os.makedirs(r["out_dir"], exist_ok=True)
    comment = _comment_line("summarize", r)

    analysis.export_report(
        draws, os.path.join(r["out_dir"], "report.json"), level=level,
        extra={"cli": {"command": "summarize", "config": r,
                       "package_version": __version__}})
    with open(os.path.join(r["out_dir"], "subject_effects.csv"), "w") as fh:
        fh.write(comment)
        analysis.export_subject_effects(draws, fh, level)
    with open(os.path.join(r["out_dir"], "ate_samples.csv"), "w") as fh:
        fh.write(comment)
        analysis.export_ate_samples(draws, fh)
    for w in draws.waves:
        s = analysis.ate_posterior(draws, w)
        path = os.path.join(r["out_dir"], f"ate_hist_wave{w}.txt")
        with open(path, "w") as fh:
            fh.write(comment)
            analysis.export_histogram(s, fh)
    if draws.forests is not None and all(f is not None
                                         for f in draws.forests):
        imp = {kind: analysis.variable_importance(draws, kind)
               for kind in ("mu", "delta", "tau")}
        blob = {"command": "summarize", "package_version": __version__,
                "config": r, "importance": imp}
        with open(os.path.join(r["out_dir"], "importance.json"), "w") as fh:
            json.dump(blob, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"wrote summaries to {r['out_dir']}", file=sys.stderr)
    return 0


# -- benchmark ------------------------------------------------------------------

def _cmd_benchmark(args, parser) -> int:
    defaults = {"dgp": None, "n_reps": 10, "estimators": "lbcf",
                "seed": 0, "sigma_dgp": 1.0, "null_tau": False,
                "n_train": 500, "n_test": 1000,
                "propensity_method": None, "true_propensity": False,
                "out_dir": None, "threads": None, "backend": "auto",
                "level": 0.95, "n_chains": 1}
    defaults.update({key: None for key in _HP_KEYS})
    r = _resolve(args, parser, defaults)
    if r["dgp"] not in (1, 2):
        parser.error("--dgp must be 1 or 2")
    if r["out_dir"] is None:
        parser.error("--out-dir is required")
    if r["true_propensity"] and r["propensity_method"] is not None:
        parser.error("--true-propensity conflicts with --propensity-method")
    _backend_from_name(r["backend"], parser)  # validate the name early
    threads = int(r["threads"]) if r["threads"] is not None \
        else _default_threads()
    r["threads"] = threads
    propensity = r["propensity_method"] or "probit_forest"
    hp = _hp_from(r)
    r.update({key: hp.resolved()[key] for key in _HP_KEYS})

    if isinstance(r["estimators"], (list, tuple)):
        estimators = [str(e) for e in r["estimators"]]
    else:
        estimators = [e.strip() for e in str(r["estimators"]).split(",")
                      if e.strip()]
    backend_name = None if r["backend"] == "auto" else r["backend"]
    report = simbench.run_benchmark(
        int(r["dgp"]), int(r["n_reps"]), estimators,
        seed=int(r["seed"]), out_dir=r["out_dir"], threads=threads,
        hp=hp, sigma_dgp=float(r["sigma_dgp"]),
        n_train=int(r["n_train"]), n_test=int(r["n_test"]),
        null_tau=bool(r["null_tau"]), propensity=propensity,
        true_propensity=bool(r["true_propensity"]),
        backend_name=backend_name, level=float(r["level"]),
        n_chains=int(r["n_chains"]), progress=sys.stderr)
    report["cli"] = {"command": "benchmark", "config": r,
                     "package_version": __version__}
    with open(os.path.join(r["out_dir"], "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    print(f"benchmark report in {r['out_dir']}", file=sys.stderr)
    return 0


# -- entry point ----------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="lbcf", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version",
                        version=f"lbcf {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    sp = sub.add_parser("simulate", help="write a simulated dataset")
    sp.add_argument("--config", default=None)
    sp.add_argument("--dgp", type=int, default=None)
    sp.add_argument("--n-train", type=int, default=None, dest="n_train")
    sp.add_argument("--n-test", type=int, default=None, dest="n_test")
    sp.add_argument("--sigma-dgp", type=float, default=None, dest="sigma_dgp")
    sp.add_argument("--null-tau", action="store_true", default=None,
                    dest="null_tau")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out-dir", default=None, dest="out_dir")
    sp.set_defaults(func=_cmd_simulate)

    sp = sub.add_parser("fit", help="fit the model to a panel CSV")
    sp.add_argument("--config", default=None)
    sp.add_argument("--data", default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--n-chains", type=int, default=None, dest="n_chains")
    sp.add_argument("--propensity-method", default=None,
                    dest="propensity_method",
                    choices=["logistic", "probit_forest", "supplied"])
    sp.add_argument("--weight-col", default=None, dest="weight_col")
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--backend", default=None,
                    choices=["auto", "compiled", "python"])
    _add_hp_flags(sp)
    sp.set_defaults(func=_cmd_fit)

    sp = sub.add_parser("predict", help="apply saved draws to new data")
    sp.add_argument("--config", default=None)
    sp.add_argument("--draws", default=None)
    sp.add_argument("--data", default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("--level", type=float, default=None)
    sp.add_argument("--backend", default=None,
                    choices=["auto", "compiled", "python"])
    sp.set_defaults(func=_cmd_predict)

    sp = sub.add_parser("summarize", help="reports from a draw file")
    sp.add_argument("--config", default=None)
    sp.add_argument("--draws", default=None)
    sp.add_argument("--out-dir", default=None, dest="out_dir")
    sp.add_argument("--level", type=float, default=None)
    sp.set_defaults(func=_cmd_summarize)

    sp = sub.add_parser("benchmark", help="replicated simulation benchmark")
    sp.add_argument("--config", default=None)
    sp.add_argument("--dgp", type=int, default=None)
    sp.add_argument("--n-reps", type=int, default=None, dest="n_reps")
    sp.add_argument("--estimators", default=None,
                    help="comma list: lbcf,bart_diff")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--sigma-dgp", type=float, default=None, dest="sigma_dgp")
    sp.add_argument("--null-tau", action="store_true", default=None,
                    dest="null_tau")
    sp.add_argument("--n-train", type=int, default=None, dest="n_train")
    sp.add_argument("--n-test", type=int, default=None, dest="n_test")
    sp.add_argument("--propensity-method", default=None,
                    dest="propensity_method",
                    choices=["logistic", "probit_forest", "supplied"])
    sp.add_argument("--true-propensity", action="store_true", default=None,
                    dest="true_propensity")
    sp.add_argument("--out-dir", default=None, dest="out_dir")
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--backend", default=None,
                    choices=["auto", "compiled", "python"])
    sp.add_argument("--level", type=float, default=None)
    sp.add_argument("--n-chains", type=int, default=None, dest="n_chains")
    _add_hp_flags(sp)
    sp.set_defaults(func=_cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args, parser)
    except SystemExit as exc:
        code = exc.code
        return 0 if code is None else int(code)
    except EstimationRefused as exc:
        print(f"estimation refused: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
