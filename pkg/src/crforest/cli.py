"""Command-line interface: ``crforest {train,predict,ci,simulate,bench}``.

Exit status is 0 on success, 1 for runtime failures and 2 for usage errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (ConfigError, CovariateShiftSpec, DataError, DomainError, ForestConfig, load_config,
                   load_covariates, load_dataset)
from .forest import ClusteredForest, ExtrapolationWarning, fit_forest

__all__ = ["CommandPlan", "UsageError", "parse_invocation", "execute", "main"]

# simulation sizes per design when run from the command line
SIM_SIZES = {"shift_equicorr": 2000, "ar2_inference": 500, "theorem2": 3000, "intro_2d": 2000}


class UsageError(Exception):
    """Bad command line; maps to exit status 2."""


@dataclass
class CommandPlan:
    subcommand: str
    config: ForestConfig | None = None
    paths: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crforest", description="Clustered random forests.")
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def forest_flags(sp):
        sp.add_argument("--config", help="JSON file with ForestConfig fields")
        sp.add_argument("--weight-class", choices=["identity", "equicorrelated", "ar1"])
        sp.add_argument("--rho-strategy", choices=["fixed", "q_shift", "train", "moment"])
        sp.add_argument("--rho-fixed", type=float)
        sp.add_argument("--k", type=int)
        sp.add_argument("--B", type=int)
        sp.add_argument("--R", type=int)
        sp.add_argument("--beta", type=float)
        sp.add_argument("--s-corr", type=int)
        sp.add_argument("--alpha-ci", type=float)
        sp.add_argument("--threads", type=int, default=1)

    tr = sub.add_parser("train", help="fit a forest and write the model")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--shift", default="training")
    tr.add_argument("--dump-trees", help="also write the tree partitions to this JSON file")
    forest_flags(tr)

    for name in ("predict", "ci"):
        sp = sub.add_parser(name, help=f"{name} at query points")
        sp.add_argument("--model", required=True)
        sp.add_argument("--query", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int)
        if name == "ci":
            sp.add_argument("--alpha-ci", type=float)

    sm = sub.add_parser("simulate", help="run a replicated simulation experiment")
    sm.add_argument("--dgp", required=True, choices=sorted(SIM_SIZES))
    sm.add_argument("--reps", type=int, required=True)
    sm.add_argument("--seed", type=int, required=True)
    sm.add_argument("--out", required=True)
    sm.add_argument("--target", help="comma-separated target point for interval experiments")
    sm.add_argument("--shift", help="shifted target for the shift experiment")
    forest_flags(sm)

    bn = sub.add_parser("bench", help="time the per-tree evaluation step")
    bn.add_argument("--seed", type=int, required=True)
    bn.add_argument("--out", required=True)
    bn.add_argument("--k", type=int, default=10)
    bn.add_argument("--weight-class", choices=["equicorrelated", "ar1"], default="equicorrelated")
    return p


def parse_shift(text: str) -> CovariateShiftSpec:
    """``training``, ``point:x1,..,xd``, ``box:lo1:hi1,...`` or ``file:path``."""
    if text is None or text == "training":
        return CovariateShiftSpec.training()
    kind, _, body = text.partition(":")
    try:
        if kind == "point":
            return CovariateShiftSpec.point([float(v) for v in body.split(",")])
        if kind == "box":
            pairs = [tuple(float(u) for u in part.split(":")) for part in body.split(",")]
            if any(len(pr) != 2 for pr in pairs):
                raise ValueError
            return CovariateShiftSpec.box([a for a, _ in pairs], [b for _, b in pairs])
        if kind == "file":
            return CovariateShiftSpec.empirical(load_covariates(body))
    except (ValueError, DomainError) as exc:
        raise UsageError(f"cannot parse --shift {text!r}: {exc}") from None
    raise UsageError(f"unknown --shift form {text!r}; use training, point:, box: or file:")


def _merged_config(args) -> ForestConfig:
    doc = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        doc = load_config(path).to_dict()
    if args.rho_fixed is not None and args.rho_strategy not in (None, "fixed"):
        raise UsageError(f"--rho-fixed conflicts with --rho-strategy {args.rho_strategy}")
    over = {"weight_class": args.weight_class, "rho_strategy": args.rho_strategy, "k": args.k,
            "B": args.B, "R": args.R, "beta": args.beta, "s_corr": args.s_corr, "alpha_ci": args.alpha_ci}
    doc.update({key: v for key, v in over.items() if v is not None})
    if args.rho_fixed is not None:
        doc["rho_strategy"] = "fixed"
        doc["rho_fixed"] = args.rho_fixed
    if args.beta is not None:
        doc["s_I"] = None
    if doc.get("rho_strategy", "q_shift") != "fixed":
        doc["rho_fixed"] = None
    doc["seed"] = args.seed
    try:
        return ForestConfig.from_dict(doc)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def parse_invocation(argv) -> CommandPlan:
    """Turn an argument list into a plan; raises :class:`UsageError`."""
    args = _build_parser().parse_args(list(argv))
    sc = args.subcommand
    if sc == "train":
        if not Path(args.data).exists():
            raise UsageError(f"data file not found: {args.data}")
        return CommandPlan(sc, _merged_config(args),
                           {"data": args.data, "out": args.out, "dump": args.dump_trees},
                           {"shift": parse_shift(args.shift), "threads": args.threads})
    if sc in ("predict", "ci"):
        for key in ("model", "query"):
            if not Path(getattr(args, key)).exists():
                raise UsageError(f"{key} file not found: {getattr(args, key)}")
        opts = {"alpha_ci": getattr(args, "alpha_ci", None)}
        return CommandPlan(sc, None, {"model": args.model, "query": args.query, "out": args.out}, opts)
    if sc == "simulate":
        if args.reps < 1:
            raise UsageError("--reps must be positive")
        target = None
        if args.target:
            try:
                target = [float(v) for v in args.target.split(",")]
            except ValueError:
                raise UsageError(f"cannot parse --target {args.target!r}") from None
        return CommandPlan(sc, _merged_config(args), {"out": args.out},
                           {"dgp": args.dgp, "reps": args.reps, "seed": args.seed, "target": target,
                            "shift": parse_shift(args.shift) if args.shift else None,
                            "threads": args.threads, "explicit": _explicit(args)})
    return CommandPlan(sc, None, {"out": args.out},
                       {"seed": args.seed, "k": args.k, "weight_class": args.weight_class})


def _explicit(args):
    return {key for key in ("config", "weight_class", "rho_strategy", "rho_fixed", "k", "B", "R", "beta",
                            "s_corr", "alpha_ci") if getattr(args, key, None) is not None}


def _write_predictions(path, X, columns):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j + 1}" for j in range(X.shape[1])] + list(columns))
        cols = [np.asarray(c) for c in columns.values()]
        for i in range(X.shape[0]):
            w.writerow([repr(float(v)) for v in X[i]] + [repr(float(c[i])) for c in cols])


def _simulate(plan: CommandPlan):
    from .simulation import (DgpSpec, coverage_experiment, shift_experiment, theorem2_experiment)
    o = plan.options
    dgp = o["dgp"]
    spec = DgpSpec(dgp, I=SIM_SIZES[dgp], seed=o["seed"])
    cfg = plan.config
    if dgp == "theorem2":
        return theorem2_experiment(spec, o["reps"], o["seed"], k=cfg.k if "k" in o["explicit"] else 20)
    if dgp == "shift_equicorr":
        if "B" not in o["explicit"]:
            cfg = dataclasses.replace(cfg, B=200)
        if "weight_class" not in o["explicit"]:
            cfg = dataclasses.replace(cfg, weight_class="equicorrelated")
        return shift_experiment(spec, cfg, o["reps"], o["seed"], o["shift"])
    target = o["target"] or [1.0] * spec.d
    if len(target) != spec.d:
        raise UsageError(f"--target needs {spec.d} coordinates")
    if "R" not in o["explicit"]:
        cfg = dataclasses.replace(cfg, R=50, B=cfg.B if "B" in o["explicit"] else 100)
    if "weight_class" not in o["explicit"]:
        cfg = dataclasses.replace(cfg, weight_class="ar1" if dgp == "ar2_inference" else "equicorrelated")
    if "beta" not in o["explicit"] and cfg.s_I is None:
        # largest equal sizes that fit three disjoint sets in a half-sample
        s = (spec.I // 2) // 3
        cfg = dataclasses.replace(cfg, s_I=s, s_corr=s)
    methods = {"RF": dataclasses.replace(cfg, weight_class="identity", rho_strategy="fixed", rho_fixed=0.0),
               "CRF": cfg}
    return coverage_experiment(spec, methods, target, o["reps"], o["seed"])


def execute(plan: CommandPlan) -> int:
    """Run a plan; returns the exit status."""
    sc = plan.subcommand
    if sc == "train":
        ds = load_dataset(plan.paths["data"])
        forest = fit_forest(ds, plan.config, plan.options["shift"], n_jobs=plan.options["threads"])
        forest.save(plan.paths["out"])
        if plan.paths.get("dump"):
            doc = {"trees": [{"r": t.r, "b": t.b, "rho_hat": None if t.degenerate else t.rho_hat,
                              "partition": t.partition.to_dict()} for t in forest.trees]}
            Path(plan.paths["dump"]).write_text(json.dumps(doc), encoding="utf-8")
        n_bad = sum(t.degenerate for t in forest.trees)
        print(f"trained {len(forest.trees)} trees ({n_bad} degenerate) on I={ds.I}, N={ds.N}; "
              f"model written to {plan.paths['out']}")
        return 0
    if sc in ("predict", "ci"):
        forest = ClusteredForest.load(plan.paths["model"])
        X = load_covariates(plan.paths["query"], forest.d)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ExtrapolationWarning)
            if sc == "predict":
                cols = {"mu_hat": forest.predict(X)}
            else:
                est = forest.confidence_interval(X, plan.options["alpha_ci"])
                cols = {"mu_hat": est.point, "v_hat": est.variance, "lo": est.lo, "hi": est.hi}
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        _write_predictions(plan.paths["out"], X, cols)
        return 0
    if sc == "simulate":
        report = _simulate(plan)
        out = Path(plan.paths["out"])
        report.write(out, out.with_suffix(".csv"))
        print(json.dumps(report.metrics, indent=2))
        return 0
    if sc == "bench":
        from .simulation import bench_evaluation
        rows = bench_evaluation(k=plan.options["k"], weight_class=plan.options["weight_class"],
                                seed=plan.options["seed"])
        with Path(plan.paths["out"]).open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["N", "leaves", "seconds"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        for r in rows:
            print(f"N={r['N']:>6d}  leaves={r['leaves']:>5d}  {r['seconds'] * 1e3:8.2f} ms")
        return 0
    raise UsageError(f"unknown subcommand {sc}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        plan = parse_invocation(argv)
        return execute(plan)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError,) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (DataError, DomainError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
