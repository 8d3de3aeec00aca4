"""End-to-end acceptance criteria.

Each test logs one PASS/FAIL line (collected in the terminal summary and in
``acceptance_results.json``) and then asserts the criterion at its stated
tolerance. The two replicated forest studies take tens of minutes on one
core; deselect them with ``-m "not slow"``.
"""
import dataclasses
import warnings

import numpy as np
import pytest

from conftest import record
from crforest.data import CovariateShiftSpec, ForestConfig
from crforest.forest import fit_forest, fit_tree, observation_weights, spec_from_config
from crforest.rho import MassWarning, loss_q, loss_train
from crforest.simulation import (DgpSpec, bench_evaluation, coverage_experiment, generate, normality_experiment,
                                 shift_experiment, theorem2_experiment)
from crforest.solver import basis_solve, fitted_leaf_values
from crforest.weights import weight_constants
from oracles import dense_loss, dense_normal, random_design, random_residuals, spec_of

CLASSES = ["identity", "equicorrelated", "ar1"]


@pytest.mark.slow
def test_shift_optimality_ordering():
    cfg = ForestConfig(k=10, B=200, R=1, beta=0.9, weight_class="equicorrelated", rho_grid=17)
    rep = shift_experiment(DgpSpec("shift_equicorr", I=2000), cfg, reps=100, seed=2024)
    m = rep.metrics
    crf, rf, train = (m[k]["median_mspe_shift"] for k in ("CRF_shift", "RF", "TRAIN"))
    ordered = crf < rf < train
    ratio = m["CRF_train"]["median_mspe_train"] / m["TRAIN"]["median_mspe_train"]
    ok = ordered and abs(ratio - 1) <= 0.10
    record("shift-optimality ordering", ok,
           f"shifted MSPE CRF={crf:.3e} RF={rf:.3e} TRAIN={train:.3e}; "
           f"training MSPE CRF/TRAIN={ratio:.3f}; {rep.runtime / 60:.1f} min")
    assert ordered
    assert abs(ratio - 1) <= 0.10


@pytest.mark.slow
def test_coverage_and_width():
    # 83 clusters per subset: the largest equal split/eval/corr sizes inside a half-sample of 250
    base = ForestConfig(s_I=83, s_corr=83, k=10, B=100, R=50, weight_class="ar1")
    methods = {"RF": dataclasses.replace(base, weight_class="identity", rho_strategy="fixed", rho_fixed=0.0),
               "CRF": base}
    rep = coverage_experiment(DgpSpec("ar2_inference", I=500), methods, [1.0], reps=200, seed=2024)
    rf, crf = rep.metrics["RF"], rep.metrics["CRF"]
    cov_ok = all(0.90 <= m["coverage"] <= 0.985 for m in (rf, crf))
    width_ok = crf["mean_width"] < rf["mean_width"]
    mse_ok = crf["mse"] < rf["mse"]
    record("coverage and width", cov_ok and width_ok and mse_ok,
           f"coverage RF={rf['coverage']:.3f} CRF={crf['coverage']:.3f}; "
           f"width RF={rf['mean_width']:.3f} CRF={crf['mean_width']:.3f}; "
           f"MSE RF={rf['mse']:.2e} CRF={crf['mse']:.2e}; {rep.runtime / 60:.1f} min")
    assert 0.90 <= rf["coverage"] <= 0.985
    assert 0.90 <= crf["coverage"] <= 0.985
    assert width_ok
    assert mse_ok


def test_solver_oracle_equivalence():
    rng = np.random.default_rng(11)
    worst = 0.0
    for i in range(200):
        design, _ = random_design(rng, int(rng.integers(1, 31)), int(rng.integers(1, 51)))
        spec = spec_of(CLASSES[i % 3], rng.random())
        A, G = dense_normal(design, spec)
        y = rng.normal(size=design.n_rows)
        occ = design.counts > 0
        ref = np.linalg.solve(A[np.ix_(occ, occ)], (G @ y)[occ])
        worst = max(worst, np.max(np.abs(fitted_leaf_values(design, spec, y)[occ] - ref)))
        sub, idx = design.compact()
        Ainv = np.linalg.inv(A[np.ix_(idx, idx)])
        cols = np.arange(sub.M)
        worst = max(worst, np.max(np.abs(basis_solve(sub, spec, cols) - Ainv)))
    record("solver oracle equivalence", worst <= 1e-8, f"max abs error {worst:.2e} over 200 designs")
    assert worst <= 1e-8


def test_loss_oracle_equivalence():
    rng = np.random.default_rng(12)
    worst = 0.0
    n = 0
    while n < 100:
        res = random_residuals(rng, int(rng.integers(1, 16)), int(rng.integers(2, 41)))
        spec = spec_of(CLASSES[n % 3], rng.random())
        occ = res.design.counts > 0
        q = np.where(occ, rng.random(res.design.M), 0.0)
        q /= q.sum()
        ref_q = dense_loss(res, spec, q)
        ref_t = dense_loss(res, spec, res.design.counts)
        if ref_t <= 1e-20 * (1 + res.eps @ res.eps):
            continue  # residuals are zero up to round-off; relative error is undefined
        with warnings.catch_warnings():
            warnings.simplefilter("error", MassWarning)
            got_q = loss_q(res, spec, spec.rho, q)
        worst = max(worst, abs(got_q - ref_q) / ref_q, abs(loss_train(res, spec, spec.rho) - ref_t) / ref_t)
        n += 1
    record("loss oracle equivalence", worst <= 1e-8, f"max relative error {worst:.2e} over 100 instances")
    assert worst <= 1e-8


def test_linear_time_evaluation():
    rows = bench_evaluation(sizes=(10_000, 20_000, 40_000), k=10, repeats=9, seed=1)
    ratio = rows[-1]["seconds"] / rows[0]["seconds"]
    detail = ", ".join(f"N={r['N']}: {r['seconds'] * 1e3:.2f} ms" for r in rows)
    record("linear-time evaluation", ratio <= 5.5, f"T(4N)/T(N)={ratio:.2f}; {detail}")
    assert ratio <= 5.5


def test_rho_zero_reduction():
    ds, _ = generate(DgpSpec("shift_equicorr", I=400), np.random.default_rng(13))
    cfg = ForestConfig(s_I=40, k=10, B=50, R=4, seed=13, weight_class="equicorrelated",
                       rho_strategy="fixed", rho_fixed=0.0)
    crf = fit_forest(ds, cfg)
    X = np.random.default_rng(14).normal(size=(1000, 1))
    # the unweighted honest forest, assembled by hand from the same subsets and partitions
    bags = {}
    for t in crf.trees:
        rows, _ = ds.rows(t.eval_ids)
        leaf = t.partition.leaf_index(ds.X[rows])
        means = np.bincount(leaf, ds.y[rows], t.partition.n_leaves) / np.bincount(leaf, minlength=t.partition.n_leaves)
        bags.setdefault(t.r, []).append(means[t.partition.leaf_index(X)])
    ref = np.mean([np.mean(v, axis=0) for v in bags.values()], axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        diff = float(np.max(np.abs(crf.predict(X) - ref)))
        rf = fit_forest(ds, dataclasses.replace(cfg, weight_class="identity"))
        diff = max(diff, float(np.max(np.abs(crf.predict(X) - rf.predict(X)))))
    record("rho=0 reduction", diff <= 1e-12, f"max abs difference {diff:.1e} on 1000 queries")
    assert diff <= 1e-12


def test_weight_invariants():
    rng = np.random.default_rng(15)
    worst_sum, worst_ratio = 0.0, 0.0
    for t in range(50):
        cls = ["equicorrelated", "ar1"][t % 2]
        ds, _ = generate(DgpSpec("ar2_inference", I=120), rng)
        rho = spec_of(cls, rng.random()).rho
        cfg = ForestConfig(s_I=30, s_corr=0, k=5, B=1, R=1, weight_class=cls, rho_strategy="fixed",
                           rho_fixed=rho).resolve(ds.I)
        ids = rng.permutation(ds.I)
        tree = fit_tree(ds, (ids[:30], ids[30:60], ids[:0]), cfg)
        spec = spec_from_config(cfg)
        C, c = weight_constants(spec, ds.sizes)
        for x in rng.normal(scale=1.5, size=(100, 1)):
            _, w = observation_weights(tree, ds, x, spec)
            worst_sum = max(worst_sum, abs(w.sum() - 1))
            worst_ratio = max(worst_ratio, np.abs(w).sum() / (5 * C / c))
    ok = worst_sum <= 1e-10 and worst_ratio <= 1
    record("weight invariants", ok,
           f"max |sum w - 1| = {worst_sum:.1e}; max sum|w| / (5 C_W / c_W) = {worst_ratio:.3f}")
    assert worst_sum <= 1e-10
    assert worst_ratio <= 1


def test_target_dependent_rho_direction():
    rep = theorem2_experiment(DgpSpec("theorem2", I=3000), reps=100, seed=2024)
    m = rep.metrics
    ok = m["frac_rho_q2_above_q1"] >= 0.8 and m["frac_q1_loss_worse_at_q2_rho"] >= 0.8
    record("target-dependent rho direction", ok,
           f"rho(Q2) > rho(Q1) in {m['frac_rho_q2_above_q1']:.0%}; Q1 loss worse at rho(Q2) in "
           f"{m['frac_q1_loss_worse_at_q2_rho']:.0%}; medians {m['median_rho_q1']:.3f} / {m['median_rho_q2']:.3f} "
           f"(limits {m['limit_rho_q1']:.3f} / {m['limit_rho_q2']:.3f})")
    assert m["frac_rho_q2_above_q1"] >= 0.8
    assert m["frac_q1_loss_worse_at_q2_rho"] >= 0.8


@pytest.mark.slow
def test_normality():
    cfg = ForestConfig(s_I=83, s_corr=83, k=10, B=100, R=1, weight_class="ar1")
    rep = normality_experiment(DgpSpec("ar2_inference", I=500), cfg, [1.0], reps=300, seed=2024)
    p = rep.metrics["ks_pvalue"]
    record("normality", p > 0.01, f"KS p-value {p:.3f} over 300 replications; {rep.runtime / 60:.1f} min")
    assert p > 0.01
