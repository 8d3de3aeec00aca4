import dataclasses
import json

import numpy as np
import pytest

from crforest.data import ConfigError, CovariateShiftSpec, ForestConfig
from crforest.simulation import (DgpSpec, ar2_stationary_cov, bench_evaluation, coverage_experiment, generate,
                                 normality_experiment, shift_experiment, sigma_ramp, sigma_shift,
                                 theorem2_experiment, theorem2_optima)


def test_ar2_yule_walker_frozen():
    # r1 = 0.6 / 0.7, r2 = 0.6 r1 + 0.3, gamma0 = 1 / (1 - 0.6 r1 - 0.3 r2)
    C = ar2_stationary_cov((0.6, 0.3), 3)
    assert C[0, 0] == pytest.approx(4.142011834, rel=1e-9)
    assert C[0, 1] / C[0, 0] == pytest.approx(6 / 7)
    assert C[0, 2] / C[0, 0] == pytest.approx(0.6 * 6 / 7 + 0.3)
    np.testing.assert_allclose(C, C.T)


def test_ar2_draws_are_stationary():
    ds, _ = generate(DgpSpec("ar2_inference", I=20000), np.random.default_rng(0))
    y = ds.y.reshape(-1, 5) - 4 * np.sin(ds.X[:, 0]).reshape(-1, 5)
    var = y.var(axis=0)
    np.testing.assert_allclose(var, 4.142, rtol=0.04)
    lag1 = np.mean(y[:, 1:] * y[:, :-1], axis=0) / var.mean()
    np.testing.assert_allclose(lag1, 6 / 7, atol=0.02)


def test_equicorrelated_draws():
    ds, _ = generate(DgpSpec("shift_equicorr", I=20000), np.random.default_rng(1))
    e = (ds.y - np.tanh(ds.X[:, 0])) / sigma_shift(ds.X[:, 0])
    e = e.reshape(-1, 4)
    c = np.corrcoef(e.T)
    assert c[np.triu_indices(4, 1)] == pytest.approx(0.8, abs=0.02)


def test_noise_profiles():
    assert sigma_shift(0.0) == pytest.approx(0.75)
    assert sigma_shift(10.0) == pytest.approx(0.25, abs=1e-12)
    x = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(sigma_ramp(x), [1.0, 1.0, 2.5, 4.0, 4.0])


def test_theorem2_limits_frozen():
    o1, o2 = theorem2_optima(4.0, 0.5)
    assert o1 == pytest.approx(5 / 17 * 0.5)
    assert o2 == pytest.approx(20 / 17 * 0.5)
    assert round(o1, 3) == 0.147 and round(o2, 3) == 0.588


def test_designs_are_seed_deterministic():
    for dgp in ("intro_2d", "shift_equicorr", "ar2_inference", "theorem2"):
        spec = DgpSpec(dgp, I=50)
        a, _ = generate(spec, np.random.default_rng(3))
        b, _ = generate(spec, np.random.default_rng(3))
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.X, b.X)
        assert a.d == spec.d and a.N == spec.I * spec.n


def test_spec_validation():
    with pytest.raises(ConfigError):
        DgpSpec("nope")
    with pytest.raises(ConfigError):
        DgpSpec("ar2_inference", phi=(0.9, 0.3))
    with pytest.raises(ConfigError):
        DgpSpec("theorem2", a=(0.0, 0.8))


def test_small_experiments_run_and_report(tmp_path):
    cfg = ForestConfig(s_I=12, s_corr=12, k=5, B=3, R=3, weight_class="ar1", rho_grid=5)
    methods = {"RF": dataclasses.replace(cfg, weight_class="identity", rho_strategy="fixed", rho_fixed=0.0),
               "CRF": cfg}
    cov = coverage_experiment(DgpSpec("ar2_inference", I=100), methods, [1.0], reps=3, seed=1)
    for name in methods:
        m = cov.metrics[name]
        assert 0 <= m["coverage"] <= 1 and m["mean_width"] > 0 and np.isfinite(m["mse"])
    cov.write(tmp_path / "c.json", tmp_path / "c.csv")
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["metrics"]["CRF"]["coverage"] == cov.metrics["CRF"]["coverage"]
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 1 + 6
    again = coverage_experiment(DgpSpec("ar2_inference", I=100), methods, [1.0], reps=3, seed=1)
    assert again.metrics == cov.metrics

    sh = shift_experiment(DgpSpec("shift_equicorr", I=100),
                          dataclasses.replace(cfg, weight_class="equicorrelated", R=1), reps=2, seed=2, n_eval=200)
    assert set(sh.metrics) == {"RF", "CRF_shift", "CRF_train", "TRAIN"}
    assert sh.metrics["RF"]["mean_rho"] == 0.0
    assert all(np.isfinite(v) for m in sh.metrics.values() for v in m.values())

    th = theorem2_experiment(DgpSpec("theorem2", I=300), reps=3, seed=3)
    assert 0 <= th.metrics["frac_rho_q2_above_q1"] <= 1

    no = normality_experiment(DgpSpec("ar2_inference", I=100), dataclasses.replace(cfg, R=1), [1.0], reps=5)
    assert 0 <= no.metrics["ks_pvalue"] <= 1


def test_bench_rows():
    rows = bench_evaluation(sizes=(2000, 4000), repeats=1)
    assert [r["N"] for r in rows] == [2000, 4000]
    assert all(r["seconds"] > 0 and r["leaves"] > 1 for r in rows)
    assert rows[1]["leaves"] > rows[0]["leaves"]


def test_shift_sampler_for_box():
    q = CovariateShiftSpec.box([1.0], [2.0])
    X = q.sample(500, np.random.default_rng(0))
    assert X.shape == (500, 1) and X.min() >= 1 and X.max() <= 2
