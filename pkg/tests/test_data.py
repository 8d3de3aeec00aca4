import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crforest.data import (ClusteredDataset, ConfigError, CovariateShiftSpec, DataError, DomainError, ForestConfig,
                           leaf_mass, load_config, load_covariates, load_dataset, save_config, save_dataset)
from crforest.partition import TreePartition

# leaves: x1 <= 0.5 ; x1 > 0.5 & x2 <= 0.25 ; x1 > 0.5 & x2 > 0.25
PART = TreePartition.from_splits((0, 0.5, None, (1, 0.25, None, None)), [0, 0], [1, 1])


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_groups_by_first_appearance(tmp_path):
    p = write(tmp_path / "d.csv", "cluster_id,y,x1\nb,1,0.1\na,2,0.2\nb,3,0.3\nc,4,0.4\na,5,0.5\n")
    ds = load_dataset(p)
    assert ds.ids == ["b", "a", "c"]
    np.testing.assert_array_equal(ds.y, [1, 3, 2, 5, 4])
    np.testing.assert_array_equal(ds.ptr, [0, 2, 4, 5])
    assert (ds.I, ds.N, ds.d) == (3, 5, 1)


@pytest.mark.parametrize("body,match", [
    ("", "empty input"),
    ("cluster_id,y,x1\n", "empty input"),
    ("cluster_id,y,x1\na,1,nan\n", "row 2"),
    ("cluster_id,y,x1\na,1,0\na,oops,0\n", "row 3"),
    ("cluster_id,y,x1\na,1\n", "fields"),
    ("id,y,x1\na,1,2\n", "header"),
])
def test_load_rejects(tmp_path, body, match):
    with pytest.raises(DataError, match=match):
        load_dataset(write(tmp_path / "d.csv", body))


def test_dimension_check(tmp_path):
    with pytest.raises(DataError):
        load_dataset(write(tmp_path / "d.csv", "cluster_id,y,x1\na,1,2\n"), d=2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=8), st.integers(1, 3), st.integers(0, 2**31))
def test_round_trip_idempotent(tmp_path_factory, sizes, d, seed):
    rng = np.random.default_rng(seed)
    N = sum(sizes)
    ids = [f"c{i}" for i in rng.permutation(len(sizes))]
    ds = ClusteredDataset.from_arrays(rng.normal(size=N), rng.normal(size=(N, d)), sizes, ids)
    tmp = tmp_path_factory.mktemp("rt")
    save_dataset(ds, tmp / "a.csv")
    ds2 = load_dataset(tmp / "a.csv")
    save_dataset(ds2, tmp / "b.csv")
    assert (tmp / "a.csv").read_bytes() == (tmp / "b.csv").read_bytes()
    np.testing.assert_array_equal(ds.y, ds2.y)
    np.testing.assert_array_equal(ds.X, ds2.X)
    assert ds2.ids == ids


def test_rows_of_subset():
    ds = ClusteredDataset.from_arrays(np.arange(6.0), np.arange(6.0), [2, 1, 3])
    rows, ptr = ds.rows([2, 0])
    np.testing.assert_array_equal(rows, [3, 4, 5, 0, 1])
    np.testing.assert_array_equal(ptr, [0, 3, 5])


def test_covariates_with_and_without_header(tmp_path):
    a = load_covariates(write(tmp_path / "a.csv", "x1,x2\n1,2\n3,4\n"))
    b = load_covariates(write(tmp_path / "b.csv", "1,2\n3,4\n"), d=2)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(DataError):
        load_covariates(tmp_path / "b.csv", d=3)


def test_config_round_trip_and_errors(tmp_path):
    cfg = ForestConfig(k=7, B=3, R=2, weight_class="ar1")
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    write(tmp_path / "bad.json", json.dumps({"k": 3, "bogus": 1}))
    with pytest.raises(ConfigError, match="bogus"):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        ForestConfig(rho_strategy="q_shift", rho_fixed=0.2)
    with pytest.raises(ConfigError):
        ForestConfig(honesty=False)


def test_resolve_sizes_and_feasibility():
    cfg = ForestConfig().resolve(1000)
    assert cfg.s_I == int(1000 ** 0.9 / 3) == 167
    assert cfg.s_corr == 167
    # with little bags only half the clusters are available per bag
    with pytest.raises(ConfigError, match="exceeds"):
        ForestConfig(R=2).resolve(1000)
    assert ForestConfig(rho_strategy="fixed", rho_fixed=0.0, s_I=10).resolve(100).s_corr == 0


def test_point_mass():
    np.testing.assert_array_equal(leaf_mass(CovariateShiftSpec.point([0.7, 0.1]), PART), [0, 1, 0])
    # a point on a cut belongs to the left child
    np.testing.assert_array_equal(leaf_mass(CovariateShiftSpec.point([0.5, 0.9]), PART), [1, 0, 0])
    with pytest.raises(DomainError):
        leaf_mass(CovariateShiftSpec.point([1.5, 0.1]), PART)
    with pytest.raises(DomainError):
        leaf_mass(CovariateShiftSpec.point([0.5]), PART)


def test_box_mass_hand_computed():
    # [0.25, 0.75] x [0, 1]: half in the left leaf, the right half splits 1:3 across x2 = 0.25
    m = leaf_mass(CovariateShiftSpec.box([0.25, 0], [0.75, 1]), PART)
    np.testing.assert_allclose(m, [0.5, 0.125, 0.375], atol=1e-15)
    flat = leaf_mass(CovariateShiftSpec.box([0.6, 0.0], [0.6, 1.0]), PART)
    np.testing.assert_allclose(flat, [0, 0.25, 0.75])


def test_empirical_and_training_mass():
    rows = np.array([[0.1, 0.1], [0.9, 0.9], [0.9, 0.95], [0.8, 0.2]])
    np.testing.assert_allclose(leaf_mass(CovariateShiftSpec.empirical(rows), PART), [0.25, 0.25, 0.5])
    np.testing.assert_allclose(leaf_mass(CovariateShiftSpec.training(), PART, rows), [0.25, 0.25, 0.5])
    with pytest.raises(DomainError):
        leaf_mass(CovariateShiftSpec.training(), PART)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.sampled_from(["point", "box", "empirical"]),
       st.integers(0, 2**31))
def test_mass_is_a_distribution(u, kind, seed):
    if kind == "point":
        q = CovariateShiftSpec.point(u[:2])
    elif kind == "box":
        q = CovariateShiftSpec.box(np.minimum(u[:2], u[2:]), np.maximum(u[:2], u[2:]))
    else:
        q = CovariateShiftSpec.empirical(np.random.default_rng(seed).random((5, 2)))
    m = leaf_mass(q, PART)
    assert np.all(m >= 0)
    assert abs(m.sum() - 1) <= 1e-12


def test_shift_spec_validation_and_dict():
    with pytest.raises(DomainError):
        CovariateShiftSpec.box([1.0], [0.0])
    with pytest.raises(DomainError):
        CovariateShiftSpec.empirical(np.empty((0, 2)))
    for q in (CovariateShiftSpec.point([1, 2]), CovariateShiftSpec.box([0], [1]), CovariateShiftSpec.training()):
        assert CovariateShiftSpec.from_dict(q.to_dict()).to_dict() == q.to_dict()
