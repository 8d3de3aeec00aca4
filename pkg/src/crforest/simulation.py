"""Data-generating processes, error metrics and replicated experiments."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from .data import ClusteredDataset, ConfigError, CovariateShiftSpec, ForestConfig, leaf_mass
from .forest import ExtrapolationWarning, fit_forest
from .partition import fit_partition
from .rho import _argmin, loss_values, residuals_from_design
from .solver import assemble_design, fitted_leaf_values
from .weights import WeightSpec

__all__ = [
    "DgpSpec",
    "ExperimentReport",
    "generate",
    "sigma_shift",
    "sigma_ramp",
    "ar2_stationary_cov",
    "evaluate_mspe",
    "coverage_experiment",
    "shift_experiment",
    "theorem2_experiment",
    "normality_experiment",
    "bench_evaluation",
    "theorem2_optima",
]

DGP_IDS = ("intro_2d", "shift_equicorr", "ar2_inference", "theorem2")
_DEFAULTS = {
    "intro_2d": dict(n=2, d=2, corr=0.8),
    "shift_equicorr": dict(n=4, d=1, corr=0.8),
    "ar2_inference": dict(n=5, d=1),
    "theorem2": dict(n=2, d=1, corr=0.5),
}


@dataclass
class DgpSpec:
    """Parameters of one simulation design.

    ``n``, ``d`` and ``corr`` default per design. ``phi`` are the AR(2)
    coefficients of ``ar2_inference``; ``eta``, ``a`` and ``b`` shape the
    variance ramp of ``theorem2``.
    """

    id: str
    I: int = 1000
    n: int | None = None
    d: int | None = None
    corr: float | None = None
    phi: tuple = (0.6, 0.3)
    eta: float = 4.0
    a: tuple = (0.0, 0.25)
    b: tuple = (0.75, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.id not in DGP_IDS:
            raise ConfigError(f"unknown design {self.id!r}; choose from {DGP_IDS}")
        for key, val in _DEFAULTS[self.id].items():
            if getattr(self, key) is None:
                setattr(self, key, val)
        if self.I < 1 or self.n < 1 or self.d < 1:
            raise ConfigError("I, n and d must be positive")
        if self.id == "ar2_inference":
            p1, p2 = self.phi
            if not (p1 + p2 < 1 and p2 - p1 < 1 and abs(p2) < 1):
                raise ConfigError(f"AR(2) coefficients {self.phi} are not stationary")
        if self.id in ("intro_2d", "shift_equicorr", "theorem2") and not -1 / max(self.n - 1, 1) < self.corr < 1:
            raise ConfigError("correlation must keep the covariance positive definite")
        if self.id == "intro_2d" and self.d < 2:
            raise ConfigError("intro_2d needs d >= 2")
        if self.id == "theorem2":
            if not (0 <= self.a[0] < self.a[1] < self.b[0] < self.b[1] <= 1):
                raise ConfigError("theorem2 needs 0 <= a1 < a2 < b1 < b2 <= 1")

    def truth(self) -> Callable[[np.ndarray], np.ndarray]:
        """Mean function, applied to rows of covariates."""
        if self.id == "intro_2d":
            return lambda X: np.tanh(np.asarray(X)[:, 0]) + np.tanh(np.asarray(X)[:, 1])
        if self.id == "shift_equicorr":
            return lambda X: np.tanh(np.asarray(X)[:, 0])
        if self.id == "ar2_inference":
            return lambda X: 4.0 * np.sin(np.asarray(X)[:, 0])
        return lambda X: np.zeros(np.asarray(X).shape[0])


def sigma_shift(x):
    """Noise scale of the shift design: ``1/4 + 1 / (1 + exp(4x))``."""
    return 0.25 + 1.0 / (1.0 + np.exp(4.0 * np.asarray(x, dtype=float)))


def sigma_ramp(x, eta=4.0, a2=0.25, b1=0.75):
    """1 on ``[0, a2]``, linear up to ``eta`` on ``(a2, b1)``, ``eta`` afterwards."""
    x = np.asarray(x, dtype=float)
    mid = ((eta - 1.0) * x + (b1 - eta * a2)) / (b1 - a2)
    return np.where(x <= a2, 1.0, np.where(x < b1, mid, eta))


def ar2_stationary_cov(phi, n, innov_var=1.0):
    """Autocovariance matrix of a stationary AR(2) series of length ``n``.

    Autocorrelations follow the Yule-Walker recursion
    ``r_h = phi_1 r_{h-1} + phi_2 r_{h-2}`` with ``r_1 = phi_1 / (1 - phi_2)``.
    """
    p1, p2 = phi
    acf = [1.0, p1 / (1.0 - p2)]
    while len(acf) < max(n, 3):
        acf.append(p1 * acf[-1] + p2 * acf[-2])
    gamma0 = innov_var / (1.0 - p1 * acf[1] - p2 * acf[2])
    j = np.arange(n)
    return gamma0 * np.array(acf)[np.abs(j[:, None] - j[None, :])]


def _equicorr_chol(n, corr):
    return np.linalg.cholesky((1.0 - corr) * np.eye(n) + corr * np.ones((n, n)))


def generate(spec: DgpSpec, rng: np.random.Generator | None = None):
    """Draw one dataset.

    Returns
    -------
    ds : ClusteredDataset
    truth : callable
        The mean function, mapping an (m, d) array to m values.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    I, n, d = spec.I, spec.n, spec.d
    mu = spec.truth()
    if spec.id == "theorem2":
        X = rng.uniform(0.0, 1.0, size=(I, n, d))
    else:
        X = rng.standard_normal(size=(I, n, d))
    flat = X.reshape(-1, d)
    if spec.id == "ar2_inference":
        p1, p2 = spec.phi
        cov2 = ar2_stationary_cov(spec.phi, 2)
        eps = np.empty((I, n))
        eps[:, :min(n, 2)] = rng.multivariate_normal(np.zeros(2), cov2, size=I)[:, :min(n, 2)]
        innov = rng.standard_normal(size=(I, n))
        for j in range(2, n):
            eps[:, j] = p1 * eps[:, j - 1] + p2 * eps[:, j - 2] + innov[:, j]
    else:
        z = rng.standard_normal(size=(I, n)) @ _equicorr_chol(n, spec.corr).T
        if spec.id == "shift_equicorr":
            scale = sigma_shift(X[:, :, 0])
        elif spec.id == "theorem2":
            scale = sigma_ramp(X[:, :, 0], spec.eta, spec.a[1], spec.b[0])
        else:
            scale = np.ones((I, n))
        eps = z * scale
    y = mu(flat) + eps.reshape(-1)
    return ClusteredDataset.from_arrays(y, flat, np.full(I, n)), mu


def evaluate_mspe(forest, truth, shift: CovariateShiftSpec, n_eval: int = 10000,
                  rng: np.random.Generator | None = None) -> float:
    """Mean squared error of the forest against ``truth`` over draws from Q."""
    if n_eval < 1:
        raise ValueError("n_eval must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    X = shift.sample(n_eval, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        pred = forest.predict(X)
    return float(np.mean((np.asarray(pred) - truth(X)) ** 2))


@dataclass
class ExperimentReport:
    """Per-method summaries plus one record per replication."""

    name: str
    reps: int
    metrics: dict
    runtime: float
    records: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "reps": self.reps, "runtime_seconds": self.runtime,
                "settings": self.settings, "metrics": self.metrics}

    def write(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, default=_jsonable), encoding="utf-8")
        if csv_path is not None and self.records:
            keys = list(self.records[0])
            with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
                w.writeheader()
                w.writerows(self.records)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    return str(o)


def _rep_seed(seed, rep):
    return int(np.random.SeedSequence([int(seed), int(rep)]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _forest_interval(ds, cfg, target):
    forest = fit_forest(ds, cfg, CovariateShiftSpec.point(target))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        return forest.confidence_interval(np.asarray(target, dtype=float))


def coverage_experiment(spec: DgpSpec, cfg: ForestConfig | dict, target, reps: int, seed: int = 0,
                        estimator: Callable | None = None, progress: Callable | None = None) -> ExperimentReport:
    """Coverage, width and squared error of intervals for ``mu(target)``.

    Parameters
    ----------
    cfg : ForestConfig or dict of name -> ForestConfig
        Several configs are run on the same datasets and forest seeds.
    estimator : callable, optional
        ``estimator(ds, cfg, target) -> IntervalEstimate``; defaults to a
        forest fitted with a point-mass target at ``target``.
    """
    if reps < 1:
        raise ValueError("reps must be positive")
    methods = cfg if isinstance(cfg, dict) else {"forest": cfg}
    estimator = estimator or _forest_interval
    target = np.atleast_1d(np.asarray(target, dtype=float))
    t0 = time.perf_counter()
    records = []
    for rep in range(reps):
        s = _rep_seed(seed, rep)
        ds, mu = generate(dataclasses.replace(spec, seed=s), np.random.default_rng(s))
        truth = float(mu(target.reshape(1, -1))[0])
        for name, c in methods.items():
            est = estimator(ds, dataclasses.replace(c, seed=s % 2 ** 63), target)
            records.append({"rep": rep, "method": name, "truth": truth, "point": float(est.point),
                            "variance": float(est.variance), "lo": float(est.lo), "hi": float(est.hi),
                            "covered": bool(est.lo <= truth <= est.hi), "width": float(est.hi - est.lo),
                            "sq_error": float((est.point - truth) ** 2)})
        if progress is not None:
            progress(rep)
    metrics = {}
    for name in methods:
        rs = [r for r in records if r["method"] == name]
        metrics[name] = {"coverage": float(np.mean([r["covered"] for r in rs])),
                         "mean_width": float(np.mean([r["width"] for r in rs])),
                         "mse": float(np.mean([r["sq_error"] for r in rs]))}
    return ExperimentReport("coverage", reps, metrics, time.perf_counter() - t0, records,
                            {"dgp": dataclasses.asdict(spec), "target": target.tolist()})


def shift_experiment(spec: DgpSpec, cfg: ForestConfig, reps: int, seed: int = 0,
                     shift: CovariateShiftSpec | None = None, n_eval: int = 2000,
                     progress: Callable | None = None) -> ExperimentReport:
    """Compare weighting strategies under a shifted and the training covariate law.

    Methods, all sharing the same subsets and partitions:

    - ``RF``: unweighted (rho = 0);
    - ``CRF_shift``: rho chosen for the shifted target;
    - ``CRF_train``: rho chosen for the training covariate law;
    - ``TRAIN``: rho minimising the training loss.

    The shifted MSPE uses Monte-Carlo draws from ``shift`` (default
    ``Unif[1, 2]``); the training MSPE uses fresh standard normal draws.
    """
    shift = shift if shift is not None else CovariateShiftSpec.box([1.0] * spec.d, [2.0] * spec.d)
    base = dataclasses.replace(cfg, rho_fixed=None, rho_strategy="q_shift")
    methods = {
        "RF": (dataclasses.replace(cfg, rho_strategy="fixed", rho_fixed=0.0), shift),
        "CRF_shift": (base, shift),
        "CRF_train": (base, CovariateShiftSpec.training()),
        "TRAIN": (dataclasses.replace(base, rho_strategy="train"), shift),
    }
    t0 = time.perf_counter()
    records = []
    for rep in range(reps):
        s = _rep_seed(seed, rep)
        rng = np.random.default_rng(s)
        ds, mu = generate(dataclasses.replace(spec, seed=s), rng)
        train_q = CovariateShiftSpec.empirical(rng.standard_normal(size=(n_eval, spec.d)))
        shift_draws = CovariateShiftSpec.empirical(shift.sample(n_eval, rng))
        for name, (c, q) in methods.items():
            forest = fit_forest(ds, dataclasses.replace(c, seed=s % 2 ** 63), q)
            records.append({"rep": rep, "method": name,
                            "mspe_train": evaluate_mspe(forest, mu, train_q),
                            "mspe_shift": evaluate_mspe(forest, mu, shift_draws),
                            "mean_rho": float(np.nanmean(forest.rho_hat))})
        if progress is not None:
            progress(rep)
    metrics = {}
    for name in methods:
        rs = [r for r in records if r["method"] == name]
        metrics[name] = {"median_mspe_train": float(np.median([r["mspe_train"] for r in rs])),
                         "median_mspe_shift": float(np.median([r["mspe_shift"] for r in rs])),
                         "mean_rho": float(np.mean([r["mean_rho"] for r in rs]))}
    return ExperimentReport("shift", reps, metrics, time.perf_counter() - t0, records,
                            {"dgp": dataclasses.asdict(spec), "shift": shift.to_dict()})


def theorem2_optima(eta: float, corr: float) -> tuple[float, float]:
    """Limiting optimal rho for the low- and high-variance target intervals."""
    return (1 + eta) / (1 + eta ** 2) * corr, eta * (1 + eta) / (1 + eta ** 2) * corr


def theorem2_experiment(spec: DgpSpec, reps: int, seed: int = 0, k: int = 20, split_frac: float = 1 / 3,
                        grid_size: int = 33, progress: Callable | None = None) -> ExperimentReport:
    """Optimal rho for two target intervals under the variance-ramp design.

    Each replication grows one partition on ``split_frac`` of the clusters
    and evaluates both Q-weighted losses on the rest, with equicorrelated
    weights.
    """
    if spec.id != "theorem2":
        raise ConfigError("theorem2_experiment needs the theorem2 design")
    q1 = CovariateShiftSpec.box([spec.a[0]], [spec.a[1]])
    q2 = CovariateShiftSpec.box([spec.b[0]], [spec.b[1]])
    cfg = ForestConfig(s_I=1, k=k, alpha_split=0.05, pi_frac=1.0, rho_strategy="fixed", rho_fixed=0.0)
    wspec = WeightSpec("equicorrelated")
    grid = wspec.grid(grid_size)
    t0 = time.perf_counter()
    records = []
    for rep in range(reps):
        s = _rep_seed(seed, rep)
        rng = np.random.default_rng(s)
        ds, _ = generate(dataclasses.replace(spec, seed=s), rng)
        perm = rng.permutation(ds.I)
        n_split = int(split_frac * ds.I)
        rows_s, _ = ds.rows(perm[:n_split])
        part = fit_partition(ds.X[rows_s], ds.y[rows_s], cfg, root_lo=[0.0], root_hi=[1.0])
        design = assemble_design(part, ds, perm[n_split:])
        rows_c, _ = ds.rows(perm[n_split:])
        res = residuals_from_design(design, ds.y[rows_c])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            l1 = loss_values(res, wspec, grid, leaf_mass(q1, part))
            l2 = loss_values(res, wspec, grid, leaf_mass(q2, part))
        r1, r2 = _argmin(grid, l1), _argmin(grid, l2)
        i1, i2 = int(np.argmin(np.abs(grid - r1))), int(np.argmin(np.abs(grid - r2)))
        records.append({"rep": rep, "rho_q1": r1, "rho_q2": r2,
                        "loss_q1_at_q1": float(l1[i1]), "loss_q1_at_q2": float(l1[i2])})
        if progress is not None:
            progress(rep)
    r1 = np.array([r["rho_q1"] for r in records])
    r2 = np.array([r["rho_q2"] for r in records])
    worse = np.array([r["loss_q1_at_q2"] > r["loss_q1_at_q1"] for r in records])
    o1, o2 = theorem2_optima(spec.eta, spec.corr)
    metrics = {"frac_rho_q2_above_q1": float(np.mean(r2 > r1)),
               "frac_q1_loss_worse_at_q2_rho": float(np.mean(worse)),
               "median_rho_q1": float(np.median(r1)), "median_rho_q2": float(np.median(r2)),
               "limit_rho_q1": o1, "limit_rho_q2": o2}
    return ExperimentReport("theorem2", reps, metrics, time.perf_counter() - t0, records,
                            {"dgp": dataclasses.asdict(spec), "k": k})


def normality_experiment(spec: DgpSpec, cfg: ForestConfig, target, reps: int, seed: int = 0,
                         progress: Callable | None = None) -> ExperimentReport:
    """Kolmogorov-Smirnov check of the standardized forest estimate at ``target``.

    Estimates are centered and scaled by their mean and standard deviation
    across replications before testing against the standard normal.
    """
    target = np.atleast_1d(np.asarray(target, dtype=float))
    t0 = time.perf_counter()
    records = []
    for rep in range(reps):
        s = _rep_seed(seed, rep)
        ds, mu = generate(dataclasses.replace(spec, seed=s), np.random.default_rng(s))
        forest = fit_forest(ds, dataclasses.replace(cfg, seed=s % 2 ** 63), CovariateShiftSpec.point(target))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ExtrapolationWarning)
            records.append({"rep": rep, "estimate": float(forest.predict(target))})
        if progress is not None:
            progress(rep)
    est = np.array([r["estimate"] for r in records])
    z = (est - est.mean()) / est.std(ddof=1)
    ks = stats.kstest(z, "norm")
    truth = float(spec.truth()(target.reshape(1, -1))[0])
    metrics = {"ks_statistic": float(ks.statistic), "ks_pvalue": float(ks.pvalue),
               "mean_estimate": float(est.mean()), "sd_estimate": float(est.std(ddof=1)), "truth": truth}
    return ExperimentReport("normality", reps, metrics, time.perf_counter() - t0, records,
                            {"dgp": dataclasses.asdict(spec), "target": target.tolist()})


def bench_evaluation(sizes=(10_000, 20_000, 40_000), k: int = 10, n: int = 5, rho: float = 0.5,
                     weight_class: str = "equicorrelated", repeats: int = 7, seed: int = 0) -> list[dict]:
    """Wall time of one tree's evaluation step at several sample sizes.

    For each size ``N`` a partition is grown on ``N`` split observations and
    the timed step assembles the design of ``N`` fresh observations and
    solves the weighted leaf values at fixed ``rho`` (best of ``repeats``).
    """
    rows = []
    spec = WeightSpec(weight_class, rho)
    cfg = ForestConfig(s_I=1, k=k, rho_strategy="fixed", rho_fixed=0.0)
    for N in sizes:
        I = int(N) // n
        dgp = DgpSpec("shift_equicorr", I=I, n=n, corr=0.5) if weight_class != "ar1" else DgpSpec("ar2_inference", I=I, n=n)
        ds_split, _ = generate(dgp, np.random.default_rng([seed, int(N), 0]))
        ds_eval, _ = generate(dgp, np.random.default_rng([seed, int(N), 1]))
        part = fit_partition(ds_split.X, ds_split.y, cfg)
        best = math.inf
        for _ in range(repeats + 1):
            t = time.perf_counter()
            design = assemble_design(part, ds_eval)
            fitted_leaf_values(design, spec, ds_eval.y)
            best = min(best, time.perf_counter() - t)
        rows.append({"N": ds_eval.N, "leaves": part.n_leaves, "seconds": best})
    return rows
