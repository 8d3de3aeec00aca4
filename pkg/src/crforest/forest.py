"""Honest clustered trees and forests with little-bags inference."""
from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import _kernels as K
from .data import ClusteredDataset, ConfigError, CovariateShiftSpec, ForestConfig, leaf_mass
from .partition import TreePartition, fit_partition
from .rho import estimate_rho, residuals_from_design
from .solver import CGNonConvergence, design_from_leaves, fitted_leaf_values
from .weights import WeightSpec

__all__ = [
    "ClusteredTree",
    "ClusteredForest",
    "IntervalEstimate",
    "ExtrapolationWarning",
    "DegenerateTreeWarning",
    "tree_stream",
    "draw_subsets",
    "fit_tree",
    "fit_forest",
    "predict",
    "variance_little_bags",
    "confidence_interval",
    "integrated_mean",
    "recommend_ratio",
    "estimate_v_hat",
    "observation_weights",
    "save_forest",
    "load_forest",
]

STAGE_BAG = 0
STAGE_SUBSET = 1
STAGE_SPLIT_NOISE = 2


class ExtrapolationWarning(UserWarning):
    """A query lies outside the bounding box of the training covariates."""


class DegenerateTreeWarning(RuntimeWarning):
    """A tree could not be fitted and is left out of the aggregate."""


def tree_stream(seed: int, r: int, b: int, stage: int) -> np.random.Generator:
    """Counter-based random stream keyed by ``(seed, r, b, stage)``.

    The key fixes the Philox key; ``(stage, b, r)`` occupy the high counter
    words so distinct triples never share counter values.
    """
    return np.random.Generator(np.random.Philox(key=int(seed) % 2 ** 128,
                                                counter=[0, int(stage), int(b), int(r)]))


def spec_from_config(cfg: ForestConfig) -> WeightSpec:
    gamma = None
    if cfg.gamma_lo is not None or cfg.gamma_hi is not None:
        lo, hi = WeightSpec(cfg.weight_class).gamma
        gamma = (lo if cfg.gamma_lo is None else cfg.gamma_lo, hi if cfg.gamma_hi is None else cfg.gamma_hi)
    lo = (gamma or WeightSpec(cfg.weight_class).gamma)[0]
    rho0 = min(max(0.0, lo), (gamma or WeightSpec(cfg.weight_class).gamma)[1])
    return WeightSpec(cfg.weight_class, rho0, gamma)


@dataclass(eq=False)
class ClusteredTree:
    """One fitted tree.

    ``leaf_values`` is finite everywhere: a leaf without evaluation rows
    takes the count-weighted mean of the occupied leaves below its nearest
    ancestor that has any (recorded in ``imputed``).
    """

    partition: TreePartition
    rho_hat: float
    leaf_values: np.ndarray
    split_ids: np.ndarray
    eval_ids: np.ndarray
    corr_ids: np.ndarray
    r: int = 0
    b: int = 0
    degenerate: bool = False
    eval_counts: np.ndarray | None = None
    imputed: dict = field(default_factory=dict)
    curve: object = None

    def predict(self, X) -> np.ndarray:
        return self.leaf_values[self.partition.leaf_index(X)]


def _impute_empty(part: TreePartition, values, counts):
    """Fill empty leaves; returns the filled values and the mixing rules."""
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return values, {}
    n = part.n_nodes
    leaf_sets = [None] * n
    # children are always numbered after their parent
    for node in range(n - 1, -1, -1):
        if part.feature[node] < 0:
            m = int(part.leaf_of[node])
            leaf_sets[node] = [m] if counts[m] > 0 else []
        else:
            leaf_sets[node] = leaf_sets[part.left[node]] + leaf_sets[part.right[node]]
    parent = np.full(n, -1)
    inner = np.flatnonzero(part.feature >= 0)
    parent[part.left[inner]] = inner
    parent[part.right[inner]] = inner
    node_of_leaf = np.empty(part.n_leaves, dtype=np.int64)
    leaves = np.flatnonzero(part.feature < 0)
    node_of_leaf[part.leaf_of[leaves]] = leaves
    out = values.copy()
    rules = {}
    for m in empty:
        node = node_of_leaf[m]
        while not leaf_sets[node]:
            node = parent[node]
        src = np.array(leaf_sets[node], dtype=np.int64)
        w = counts[src] / counts[src].sum()
        out[m] = float(w @ values[src])
        rules[int(m)] = (src, w)
    return out, rules


def draw_subsets(cfg: ForestConfig, I: int, r: int, b: int, pool: np.ndarray):
    """Disjoint split / eval / corr cluster sets for tree ``(r, b)``."""
    rng = tree_stream(cfg.seed, r, b, STAGE_SUBSET)
    if not cfg.honesty:
        sub = np.sort(rng.choice(I, int(math.floor(cfg.subsample_frac * I)), replace=False))
        return sub, sub, np.empty(0, dtype=np.int64)
    perm = rng.permutation(pool)
    s, sc = cfg.s_I, cfg.s_corr
    return perm[:s], perm[s:2 * s], perm[2 * s:2 * s + sc]


def bag_pool(cfg: ForestConfig, I: int, r: int) -> np.ndarray:
    """Half-sample of clusters used by bag ``r`` (all clusters when R = 1)."""
    if cfg.R == 1 or not cfg.honesty:
        return np.arange(I)
    rng = tree_stream(cfg.seed, r, 0, STAGE_BAG)
    return np.sort(rng.choice(I, I // 2, replace=False))


def fit_tree(ds: ClusteredDataset, ids, cfg: ForestConfig, shift: CovariateShiftSpec | None = None,
             rng: np.random.Generator | None = None, spec: WeightSpec | None = None,
             r: int = 0, b: int = 0, keep_curve: bool = False) -> ClusteredTree:
    """Fit one clustered tree.

    Parameters
    ----------
    ds : ClusteredDataset
    ids : tuple of three int arrays
        Cluster positions for splitting, evaluation and correlation
        estimation.
    cfg : ForestConfig
        A resolved config (see :meth:`ForestConfig.resolve`).
    shift : CovariateShiftSpec, optional
        Target distribution for ``q_shift``; defaults to ``training``.
    rng : Generator, optional
        Stream for split randomness (only used with ``mtry``).
    """
    split_ids, eval_ids, corr_ids = (np.asarray(a, dtype=np.int64) for a in ids)
    if cfg.honesty:
        if (np.intersect1d(split_ids, eval_ids).size or np.intersect1d(split_ids, corr_ids).size
                or np.intersect1d(eval_ids, corr_ids).size):
            raise ValueError("honest trees need disjoint cluster sets")
    spec = spec if spec is not None else spec_from_config(cfg)
    shift = shift if shift is not None else CovariateShiftSpec.training()
    rows, _ = ds.rows(split_ids)
    part = fit_partition(ds.X[rows], ds.y[rows], cfg, rng)
    rows_e, ptr_e = ds.rows(eval_ids)
    design_e = design_from_leaves(part.leaf_index(ds.X[rows_e]), ptr_e, part.n_leaves)

    def degenerate(why):
        warnings.warn(f"tree ({r}, {b}) left out: {why}", DegenerateTreeWarning, stacklevel=3)
        return ClusteredTree(part, float("nan"), np.zeros(part.n_leaves), split_ids, eval_ids, corr_ids,
                             r, b, True, design_e.counts)

    if design_e.n_rows == 0:
        return degenerate("no evaluation rows")
    curve = None
    try:
        if cfg.weight_class == "identity":
            rho = 0.0
        elif cfg.rho_strategy == "fixed":
            rho = spec.with_rho(cfg.rho_fixed).rho
        else:
            rows_c, ptr_c = ds.rows(corr_ids)
            Xc = ds.X[rows_c]
            design_c = design_from_leaves(part.leaf_index(Xc), ptr_c, part.n_leaves)
            res = residuals_from_design(design_c, ds.y[rows_c])
            masses = None
            if cfg.rho_strategy == "q_shift":
                masses = leaf_mass(shift, part, train_rows=Xc)
            curve = estimate_rho(res, spec, cfg.rho_strategy, masses, cfg.rho_grid,
                                 tol=cfg.cg_tol, max_iter=cfg.cg_max_iter)
            rho = curve.rho_hat
        values = fitted_leaf_values(design_e, spec.with_rho(rho), ds.y[rows_e], cfg.cg_tol, cfg.cg_max_iter)
    except (ValueError, CGNonConvergence) as exc:
        return degenerate(str(exc))
    values, rules = _impute_empty(part, values, design_e.counts)
    return ClusteredTree(part, float(rho), values, split_ids, eval_ids, corr_ids, r, b, False,
                         design_e.counts, rules, curve if keep_curve else None)


class ClusteredForest:
    """R bags of B clustered trees.

    Use :func:`fit_forest` to build one.
    """

    def __init__(self, trees, cfg: ForestConfig, shift: CovariateShiftSpec, box, d: int):
        self.trees = list(trees)
        self.cfg = cfg
        self.shift = shift
        self.box = (np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float))
        self.d = int(d)
        self._packed = None

    @property
    def R(self) -> int:
        return self.cfg.R

    @property
    def B(self) -> int:
        return self.cfg.B

    @property
    def rho_hat(self) -> np.ndarray:
        return np.array([t.rho_hat for t in self.trees])

    def _pack(self):
        if self._packed is None:
            live = [t for t in self.trees if not t.degenerate]
            if not live:
                raise RuntimeError("every tree in the forest is degenerate")
            sizes = np.array([t.partition.n_nodes for t in live])
            vsizes = np.array([t.partition.n_leaves for t in live])
            cat = lambda name: np.ascontiguousarray(np.concatenate([getattr(t.partition, name) for t in live]))
            self._packed = dict(
                offsets=np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64),
                feature=cat("feature"), threshold=cat("threshold"), left=cat("left"),
                right=cat("right"), leaf_of=cat("leaf_of"),
                roots=np.zeros(len(live), dtype=np.int64),
                values=np.ascontiguousarray(np.concatenate([t.leaf_values for t in live])),
                value_offsets=np.concatenate([[0], np.cumsum(vsizes)[:-1]]).astype(np.int64),
                bags=np.array([t.r for t in live], dtype=np.int64),
            )
        return self._packed

    def _rows(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.ascontiguousarray(X.reshape(1, -1) if single else X)
        if X.shape[1] != self.d:
            raise ValueError(f"queries have {X.shape[1]} covariates, forest expects {self.d}")
        return X, single

    def extrapolated(self, X) -> np.ndarray:
        X, _ = self._rows(X)
        return np.any((X < self.box[0]) | (X > self.box[1]), axis=1)

    def tree_predictions(self, X) -> np.ndarray:
        """Predictions of every non-degenerate tree, shape (n_trees, n)."""
        X, _ = self._rows(X)
        p = self._pack()
        return K.forest_predict(p["offsets"], p["feature"], p["threshold"], p["left"], p["right"],
                                p["leaf_of"], p["roots"], p["values"], p["value_offsets"], X)

    def bag_means(self, X) -> np.ndarray:
        """Per-bag mean predictions, shape (n_bags, n); empty bags dropped."""
        preds = self.tree_predictions(X)
        bags = self._pack()["bags"]
        present = np.unique(bags)
        sums = np.zeros((self.R, preds.shape[1]))
        np.add.at(sums, bags, preds)
        counts = np.bincount(bags, minlength=self.R)
        return sums[present] / counts[present, None]

    def predict(self, X, return_flags: bool = False):
        """Forest prediction: the mean over bags of within-bag tree means."""
        Xr, single = self._rows(X)
        flags = self.extrapolated(Xr)
        if flags.any():
            warnings.warn(f"{int(flags.sum())} queries lie outside the training box",
                          ExtrapolationWarning, stacklevel=2)
        mu = self.bag_means(Xr).mean(axis=0)
        if single:
            mu, flags = float(mu[0]), bool(flags[0])
        return (mu, flags) if return_flags else mu

    def variance(self, X):
        """Little-bags variance: the spread of bag means around their average."""
        if self.R < 2:
            raise ValueError("variance estimation needs R >= 2 little bags; refit with a larger R")
        if not self.cfg.honesty:
            raise ValueError("variance estimation is not available for dishonest forests")
        Xr, single = self._rows(X)
        bm = self.bag_means(Xr)
        v = np.mean((bm - bm.mean(axis=0)) ** 2, axis=0)
        return float(v[0]) if single else v

    def confidence_interval(self, X, alpha_ci: float | None = None) -> "IntervalEstimate":
        alpha_ci = self.cfg.alpha_ci if alpha_ci is None else alpha_ci
        if not 0 < alpha_ci < 1:
            raise ValueError("alpha_ci must lie in (0, 1)")
        Xr, single = self._rows(X)
        if self.R < 2:
            raise ValueError("confidence intervals need R >= 2 little bags; refit with a larger R")
        bm = self.bag_means(Xr)
        mu = bm.mean(axis=0)
        v = np.mean((bm - mu) ** 2, axis=0)
        est = interval_from(mu, v, alpha_ci)
        if single:
            est = IntervalEstimate(float(est.point[0]), float(est.variance[0]),
                                   float(est.lo[0]), float(est.hi[0]))
        return est

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict:
        return {
            "format": "crforest-model/1",
            "config": self.cfg.to_dict(),
            "shift": self.shift.to_dict(),
            "box": [self.box[0].tolist(), self.box[1].tolist()],
            "d": self.d,
            "trees": [_tree_to_dict(t) for t in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusteredForest":
        if doc.get("format") != "crforest-model/1":
            raise ValueError("not a crforest model document")
        cfg = ForestConfig.from_dict(doc["config"])
        trees = [_tree_from_dict(t) for t in doc["trees"]]
        return cls(trees, cfg, CovariateShiftSpec.from_dict(doc["shift"]), doc["box"], doc["d"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ClusteredForest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _enc(a):
    a = np.asarray(a, dtype=float)
    return [v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan") for v in a.ravel().tolist()]


def _tree_to_dict(t: ClusteredTree) -> dict:
    p = t.partition
    return {
        "r": t.r, "b": t.b, "degenerate": t.degenerate, "rho_hat": _enc([t.rho_hat])[0],
        "split": t.split_ids.tolist(), "eval": t.eval_ids.tolist(), "corr": t.corr_ids.tolist(),
        "values": _enc(t.leaf_values),
        "eval_counts": None if t.eval_counts is None else t.eval_counts.tolist(),
        "imputed": {str(m): [s.tolist(), w.tolist()] for m, (s, w) in t.imputed.items()},
        "nodes": {"feature": p.feature.tolist(), "threshold": p.threshold.tolist(),
                  "left": p.left.tolist(), "right": p.right.tolist(), "leaf_of": p.leaf_of.tolist()},
        "leaves": {"lo": _enc(p.leaf_lo), "hi": _enc(p.leaf_hi), "count": p.leaf_count.tolist(),
                   "saturated": p.saturated.tolist(), "splits": p.leaf_splits.tolist(),
                   "depth": p.leaf_depth.tolist()},
    }


def _tree_from_dict(doc: dict) -> ClusteredTree:
    nd, lv = doc["nodes"], doc["leaves"]
    M = len(lv["count"])
    d = len(lv["lo"]) // M if M else 0
    part = TreePartition(
        np.array(nd["feature"], dtype=np.int64), np.array(nd["threshold"], dtype=float),
        np.array(nd["left"], dtype=np.int64), np.array(nd["right"], dtype=np.int64),
        np.array(nd["leaf_of"], dtype=np.int64),
        np.array(lv["lo"], dtype=float).reshape(M, d), np.array(lv["hi"], dtype=float).reshape(M, d),
        np.array(lv["count"], dtype=np.int64), np.array(lv["saturated"], dtype=bool),
        np.array(lv["splits"], dtype=np.int64).reshape(M, d), np.array(lv["depth"], dtype=np.int64))
    imputed = {int(m): (np.array(s, dtype=np.int64), np.array(w, dtype=float))
               for m, (s, w) in doc.get("imputed", {}).items()}
    ec = doc.get("eval_counts")
    return ClusteredTree(part, float(doc["rho_hat"]), np.array(doc["values"], dtype=float),
                         np.array(doc["split"], dtype=np.int64), np.array(doc["eval"], dtype=np.int64),
                         np.array(doc["corr"], dtype=np.int64), doc["r"], doc["b"], doc["degenerate"],
                         None if ec is None else np.array(ec, dtype=np.int64), imputed)


def save_forest(forest: ClusteredForest, path) -> None:
    forest.save(path)


def load_forest(path) -> ClusteredForest:
    return ClusteredForest.load(path)


@dataclass(frozen=True)
class IntervalEstimate:
    point: object
    variance: object
    lo: object
    hi: object


def interval_from(mu, v, alpha_ci) -> IntervalEstimate:
    """Normal interval ``mu -/+ z_{1 - alpha/2} sqrt(v)``."""
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    half = norm.ppf(1.0 - alpha_ci / 2.0) * np.sqrt(v)
    return IntervalEstimate(mu, v, mu - half, mu + half)


def fit_forest(ds: ClusteredDataset, cfg: ForestConfig, shift: CovariateShiftSpec | None = None,
               n_jobs: int = 1, keep_curves: bool = False) -> ClusteredForest:
    """Fit R x B honest clustered trees.

    Every tree's subsets and split randomness come from streams keyed by
    ``(cfg.seed, r, b)``, so the result does not depend on ``n_jobs`` or on
    the order in which trees are fitted.
    """
    cfg = cfg.resolve(ds.I)
    if not cfg.honesty and cfg.R != 1:
        raise ConfigError("dishonest forests use a single bag (R = 1)")
    shift = shift if shift is not None else CovariateShiftSpec.training()
    shift.check_dim(ds.d)
    spec = spec_from_config(cfg)
    if cfg.rho_strategy == "fixed" and cfg.weight_class != "identity":
        spec.with_rho(cfg.rho_fixed)
    pools = [bag_pool(cfg, ds.I, r) for r in range(cfg.R)]

    def one(task):
        r, b = task
        ids = draw_subsets(cfg, ds.I, r, b, pools[r])
        noise = tree_stream(cfg.seed, r, b, STAGE_SPLIT_NOISE) if cfg.mtry else None
        return fit_tree(ds, ids, cfg, shift, noise, spec, r, b, keep_curves)

    tasks = [(r, b) for r in range(cfg.R) for b in range(cfg.B)]
    if n_jobs is None or n_jobs <= 1:
        trees = [one(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            trees = list(ex.map(one, tasks))
    if all(t.degenerate for t in trees):
        raise RuntimeError("every tree in the forest is degenerate")
    return ClusteredForest(trees, cfg, shift, ds.bounds(), ds.d)


# --------------------------------------------------------- functional API

def predict(forest: ClusteredForest, x):
    return forest.predict(x)


def variance_little_bags(forest: ClusteredForest, x):
    return forest.variance(x)


def confidence_interval(forest: ClusteredForest, x, alpha_ci: float | None = None) -> IntervalEstimate:
    return forest.confidence_interval(x, alpha_ci)


def integrated_mean(forest: ClusteredForest, shift: CovariateShiftSpec, n_draws: int = 10000,
                    seed: int = 0) -> float:
    """Integral of the forest prediction against Q (Monte Carlo for a box)."""
    shift.check_dim(forest.d)
    X = shift.sample(n_draws, np.random.default_rng(seed))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        return float(np.mean(forest.predict(X)))


def recommend_ratio(I, n_c, d, alpha_split, pi_frac, c_bias, v_hat) -> float:
    """Plug-in choice of ``s_I / k``.

    ``2 * (c_bias^2 phi I / (n_c^(2 phi / d) v_hat))^(d / (2 phi + d))`` with
    ``phi = pi_frac * log(1 / (1 - alpha)) / log(1 / alpha)``.
    """
    for name, v in dict(I=I, n_c=n_c, d=d, alpha_split=alpha_split, pi_frac=pi_frac,
                        c_bias=c_bias, v_hat=v_hat).items():
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    phi = pi_frac * math.log(1.0 / (1.0 - alpha_split)) / math.log(1.0 / alpha_split)
    base = c_bias ** 2 * phi * I / (n_c ** (2.0 * phi / d) * v_hat)
    return 2.0 * base ** (d / (2.0 * phi + d))


def estimate_v_hat(forest: ClusteredForest, shift: CovariateShiftSpec, n_draws: int = 1000,
                   seed: int = 0) -> float:
    """Scale-free variance input for :func:`recommend_ratio`.

    ``k`` times the Q-average of the across-tree variance of tree
    predictions.
    """
    X = shift.sample(n_draws, np.random.default_rng(seed))
    preds = forest.tree_predictions(X)
    return float(forest.cfg.k * np.mean(np.var(preds, axis=0)))


def observation_weights(tree: ClusteredTree, ds: ClusteredDataset, x, spec: WeightSpec,
                        exact: bool = True):
    """Weights ``w`` on the evaluation rows with ``tree.predict(x) == w @ y_eval``.

    Parameters
    ----------
    tree : ClusteredTree
    ds : ClusteredDataset
        The data the tree was fitted on.
    x : array, shape (d,)
    spec : WeightSpec
        Weight class of the tree; its ``rho`` is replaced by ``tree.rho_hat``.
    exact : bool
        Solve the (small) normal system densely instead of by CG.

    Returns
    -------
    rows : ndarray of int
        Flat row indices of the evaluation clusters in ``ds``.
    w : ndarray
    """
    from .solver import basis_solve, dense_normal_matrix

    spec = spec.with_rho(tree.rho_hat)
    rows, ptr = ds.rows(tree.eval_ids)
    design = design_from_leaves(tree.partition.leaf_index(ds.X[rows]), ptr, tree.partition.n_leaves)
    sub, occupied = design.compact()
    pos = np.full(design.M, -1)
    pos[occupied] = np.arange(occupied.size)
    m = int(tree.partition.leaf_index(np.asarray(x, dtype=float).reshape(1, -1))[0])
    if m in tree.imputed:
        src, mix = tree.imputed[m]
    else:
        src, mix = np.array([m]), np.array([1.0])
    cols = pos[src]
    if exact:
        A = dense_normal_matrix(sub, spec)
        E = np.zeros((sub.M, cols.size))
        E[cols, np.arange(cols.size)] = 1.0
        a = np.linalg.solve(A, E) @ mix
    else:
        a = basis_solve(sub, spec, cols) @ mix
    chi_a = a[sub.leaf]
    w = np.empty_like(chi_a)
    K.apply_weights(spec.code, spec.rho, sub.ptr, chi_a, w)
    return rows, w
