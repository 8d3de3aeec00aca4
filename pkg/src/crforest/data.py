"""Grouped-data containers, forest configuration and covariate-shift targets."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

__all__ = [
    "Cluster",
    "ClusteredDataset",
    "ForestConfig",
    "CovariateShiftSpec",
    "DataError",
    "ConfigError",
    "DomainError",
    "load_dataset",
    "save_dataset",
    "load_config",
    "save_config",
    "load_covariates",
    "leaf_mass",
]


class DataError(ValueError):
    """Malformed or missing input data."""


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


class DomainError(ValueError):
    """A value lies outside the admissible domain."""


@dataclass(frozen=True)
class Cluster:
    """One group of observations; row order is meaningful."""

    id: Any
    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=float).reshape(-1)
        x = np.ascontiguousarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.shape[0] != y.shape[0]:
            raise DataError(
                f"cluster {self.id!r}: {y.shape[0]} responses but {x.shape[0]} covariate rows")
        if y.shape[0] < 1:
            raise DataError(f"cluster {self.id!r} is empty")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.shape[0]


class ClusteredDataset:
    """Immutable collection of clusters stored as flat arrays.

    Parameters
    ----------
    clusters : sequence of Cluster
        Clusters in their canonical order.

    Attributes
    ----------
    y : ndarray, shape (N,)
        Responses of all clusters, concatenated.
    X : ndarray, shape (N, d)
        Covariates, aligned with ``y``.
    ptr : ndarray, shape (I + 1,)
        Cluster ``i`` occupies rows ``ptr[i]:ptr[i + 1]``.
    """

    def __init__(self, clusters: Sequence[Cluster]):
        clusters = tuple(clusters)
        if not clusters:
            raise DataError("dataset has no clusters")
        d = clusters[0].x.shape[1]
        for c in clusters:
            if c.x.shape[1] != d:
                raise DataError(f"cluster {c.id!r} has {c.x.shape[1]} covariates, expected {d}")
        sizes = np.array([c.n for c in clusters], dtype=np.int64)
        self.clusters = clusters
        self.d = int(d)
        self.I = len(clusters)
        self.sizes = sizes
        self.ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.N = int(self.ptr[-1])
        self.y = np.concatenate([c.y for c in clusters])
        self.X = np.ascontiguousarray(np.concatenate([c.x for c in clusters], axis=0))
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.X))):
            raise DataError("dataset contains non-finite values")
        for a in (self.y, self.X, self.ptr, self.sizes):
            a.setflags(write=False)
        self.ids = [c.id for c in clusters]

    @classmethod
    def from_arrays(cls, y, X, sizes, ids=None) -> "ClusteredDataset":
        """Build from flat arrays and per-cluster sizes."""
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        sizes = np.asarray(sizes, dtype=np.int64)
        ptr = np.concatenate([[0], np.cumsum(sizes)])
        if ptr[-1] != y.shape[0]:
            raise DataError("cluster sizes do not add up to the number of rows")
        if ids is None:
            ids = range(sizes.size)
        return cls([Cluster(i, y[a:b], X[a:b]) for i, a, b in zip(ids, ptr[:-1], ptr[1:])])

    def rows(self, clusters: np.ndarray):
        """Flat row indices and offsets of a subset of clusters (in the given order)."""
        clusters = np.asarray(clusters, dtype=np.int64)
        sizes = self.sizes[clusters]
        ptr = np.zeros(clusters.size + 1, dtype=np.int64)
        np.cumsum(sizes, out=ptr[1:])
        starts = self.ptr[clusters]
        rows = np.repeat(starts - ptr[:-1], sizes) + np.arange(ptr[-1])
        return rows, ptr

    def bounds(self):
        """Bounding box of the covariates, as ``(lo, hi)``."""
        return self.X.min(axis=0), self.X.max(axis=0)

    def __len__(self):
        return self.I

    def __repr__(self):
        return f"ClusteredDataset(I={self.I}, N={self.N}, d={self.d})"


def _parse_float(text, row, col):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise DataError(f"row {row}: cannot parse {col} value {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}: non-finite {col} value {text!r}")
    return v


def load_dataset(path, d: int | None = None) -> ClusteredDataset:
    """Read a ``cluster_id,y,x1,...,xd`` CSV file.

    Rows are grouped by cluster id in order of first appearance; the file
    order is kept inside each cluster. Row numbers in error messages count
    the header as row 1.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty input")
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "cluster_id" or header[1] != "y":
            raise DataError(f"{path}: header must be cluster_id,y,x1,...,xd")
        width = len(header)
        if d is not None and width - 2 != d:
            raise DataError(f"{path}: expected {d} covariates, header has {width - 2}")
        groups: dict[str, tuple[list, list]] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != width:
                raise DataError(f"{path}: row {lineno} has {len(rec)} fields, expected {width}")
            cid = rec[0].strip()
            if cid == "":
                raise DataError(f"row {lineno}: missing cluster_id")
            yv = _parse_float(rec[1], lineno, "y")
            xv = [_parse_float(v, lineno, header[j + 2]) for j, v in enumerate(rec[2:])]
            ys, xs = groups.setdefault(cid, ([], []))
            ys.append(yv)
            xs.append(xv)
    if not groups:
        raise DataError(f"{path}: empty input")
    return ClusteredDataset([Cluster(cid, np.array(ys), np.array(xs)) for cid, (ys, xs) in groups.items()])


def save_dataset(ds: ClusteredDataset, path) -> None:
    """Write ``ds`` in the CSV layout read by :func:`load_dataset`."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster_id", "y"] + [f"x{j + 1}" for j in range(ds.d)])
        for c in ds.clusters:
            for yv, xv in zip(c.y, c.x):
                w.writerow([c.id, repr(float(yv))] + [repr(float(v)) for v in xv])


def load_covariates(path, d: int | None = None) -> np.ndarray:
    """Read covariate rows from a CSV file, with or without a header line."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        recs = [r for r in csv.reader(fh) if r and any(f.strip() for f in r)]
    if not recs:
        raise DataError(f"{path}: empty input")
    try:
        [float(v) for v in recs[0]]
    except ValueError:
        recs = recs[1:]
    if not recs:
        raise DataError(f"{path}: empty input")
    width = len(recs[0])
    rows = []
    for lineno, r in enumerate(recs, start=1):
        if len(r) != width:
            raise DataError(f"{path}: row {lineno} has {len(r)} fields, expected {width}")
        rows.append([_parse_float(v, lineno, f"x{j + 1}") for j, v in enumerate(r)])
    X = np.array(rows, dtype=float)
    if d is not None and X.shape[1] != d:
        raise DataError(f"{path}: expected {d} columns, found {X.shape[1]}")
    return X


# ---------------------------------------------------------------- config

RHO_STRATEGIES = ("fixed", "q_shift", "train", "moment")
WEIGHT_CLASSES = ("identity", "equicorrelated", "ar1")


@dataclass
class ForestConfig:
    """Hyperparameters of a clustered forest.

    ``s_I`` and ``s_corr`` count clusters. When ``s_I`` is ``None`` it is
    derived at fit time as ``floor(I**beta / 3)``; ``s_corr`` then defaults
    to ``s_I``. ``gamma_lo``/``gamma_hi`` default to the class range.
    """

    s_I: int | None = None
    s_corr: int | None = None
    k: int = 10
    B: int = 500
    R: int = 1
    beta: float | None = 0.9
    alpha_split: float = 0.05
    pi_frac: float = 0.5
    honesty: bool = True
    alpha_ci: float = 0.05
    seed: int = 0
    weight_class: str = "equicorrelated"
    rho_strategy: str = "q_shift"
    rho_fixed: float | None = None
    rho_grid: int = 33
    gamma_lo: float | None = None
    gamma_hi: float | None = None
    cg_tol: float = 1e-10
    cg_max_iter: int | None = None
    mtry: int | None = None
    subsample_frac: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ForestConfig":
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if not 0 < self.alpha_split <= 0.5:
            raise ConfigError("alpha_split must lie in (0, 0.5]")
        if not 0 < self.pi_frac <= 1:
            raise ConfigError("pi_frac must lie in (0, 1]")
        if self.B < 1 or self.R < 1:
            raise ConfigError("B and R must be at least 1")
        if not 0 < self.alpha_ci < 1:
            raise ConfigError("alpha_ci must lie in (0, 1)")
        if self.weight_class not in WEIGHT_CLASSES:
            raise ConfigError(f"unknown weight_class {self.weight_class!r}")
        if self.rho_strategy not in RHO_STRATEGIES:
            raise ConfigError(f"unknown rho_strategy {self.rho_strategy!r}")
        if self.rho_strategy == "fixed" and self.rho_fixed is None:
            raise ConfigError("rho_strategy 'fixed' needs rho_fixed")
        if self.rho_fixed is not None and self.rho_strategy != "fixed":
            raise ConfigError("rho_fixed is only meaningful with rho_strategy 'fixed'")
        if self.rho_grid < 1:
            raise ConfigError("rho_grid must be positive")
        if not self.honesty and self.rho_strategy != "fixed":
            raise ConfigError("honesty=false requires rho_strategy 'fixed'")
        if not 0 < self.subsample_frac <= 1:
            raise ConfigError("subsample_frac must lie in (0, 1]")
        if self.cg_tol <= 0:
            raise ConfigError("cg_tol must be positive")
        if self.mtry is not None and self.mtry < 1:
            raise ConfigError("mtry must be positive")
        if self.beta is not None and not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.s_I is None and self.beta is None:
            raise ConfigError("give s_I or beta")
        return self

    def resolve(self, I: int) -> "ForestConfig":
        """Copy with subset sizes fixed for ``I`` clusters, checked for feasibility."""
        s_I = self.s_I if self.s_I is not None else int(math.floor(I ** self.beta / 3.0))
        s_corr = self.s_corr
        if s_corr is None:
            s_corr = 0 if (self.rho_strategy == "fixed" or self.weight_class == "identity") else s_I
        out = dataclasses.replace(self, s_I=int(s_I), s_corr=int(s_corr))
        if out.s_I < 1:
            raise ConfigError(f"s_I={out.s_I} is too small for I={I}")
        if out.s_corr < 0:
            raise ConfigError("s_corr must be nonnegative")
        if out.honesty:
            pool = I // 2 if out.R >= 2 else I
            need = 2 * out.s_I + out.s_corr
            if need > pool:
                raise ConfigError(
                    f"2*s_I + s_corr = {need} exceeds the {pool} clusters available per bag")
            if out.s_corr < 1 and out.rho_strategy in ("q_shift", "train", "moment") \
                    and out.weight_class != "identity":
                raise ConfigError(f"rho_strategy {out.rho_strategy!r} needs s_corr >= 1")
        else:
            if int(math.floor(out.subsample_frac * I)) < 1:
                raise ConfigError("subsample is empty")
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ForestConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


def load_config(path) -> ForestConfig:
    """Read a JSON config whose keys mirror :class:`ForestConfig` fields."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return ForestConfig.from_dict(doc)


def save_config(cfg: ForestConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")


# ----------------------------------------------------------------- shift

@dataclass(frozen=True)
class CovariateShiftSpec:
    """Target covariate distribution Q.

    Use the constructors :meth:`point`, :meth:`box`, :meth:`empirical` and
    :meth:`training`.
    """

    kind: str
    x: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    rows: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def point(cls, x) -> "CovariateShiftSpec":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.ndim != 1 or not np.all(np.isfinite(x)):
            raise DomainError("point mass needs one finite covariate row")
        return cls("point_mass", x=x)

    @classmethod
    def box(cls, lo, hi) -> "CovariateShiftSpec":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DomainError("box bounds must be vectors of equal length")
        if np.any(lo > hi) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise DomainError("box needs finite bounds with lo <= hi")
        return cls("uniform_box", lo=lo, hi=hi)

    @classmethod
    def empirical(cls, rows) -> "CovariateShiftSpec":
        rows = np.asarray(rows, dtype=float)
        if rows.ndim == 1:
            rows = rows.reshape(-1, 1)
        if rows.shape[0] == 0:
            raise DomainError("empirical target set is empty")
        return cls("empirical", rows=rows)

    @classmethod
    def training(cls) -> "CovariateShiftSpec":
        return cls("training")

    @property
    def d(self) -> int | None:
        if self.kind == "point_mass":
            return self.x.size
        if self.kind == "uniform_box":
            return self.lo.size
        if self.kind == "empirical":
            return self.rows.shape[1]
        return None

    def check_dim(self, d: int) -> None:
        if self.d is not None and self.d != d:
            raise DomainError(f"target distribution has dimension {self.d}, data has {d}")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` rows from Q (rows themselves for an empirical target)."""
        if self.kind == "point_mass":
            return self.x.reshape(1, -1)
        if self.kind == "uniform_box":
            return rng.uniform(self.lo, self.hi, size=(n, self.lo.size))
        if self.kind == "empirical":
            return self.rows
        raise DomainError("the training target has no sampler; pass an empirical target instead")

    def to_dict(self) -> dict:
        if self.kind == "point_mass":
            return {"kind": self.kind, "x": self.x.tolist()}
        if self.kind == "uniform_box":
            return {"kind": self.kind, "lo": self.lo.tolist(), "hi": self.hi.tolist()}
        if self.kind == "empirical":
            return {"kind": self.kind, "rows": self.rows.tolist()}
        return {"kind": "training"}

    @classmethod
    def from_dict(cls, doc: dict) -> "CovariateShiftSpec":
        kind = doc["kind"]
        if kind == "point_mass":
            return cls.point(doc["x"])
        if kind == "uniform_box":
            return cls.box(doc["lo"], doc["hi"])
        if kind == "empirical":
            return cls.empirical(doc["rows"])
        if kind == "training":
            return cls.training()
        raise DomainError(f"unknown target kind {kind!r}")


def leaf_mass(q: CovariateShiftSpec, partition, train_rows: np.ndarray | None = None) -> np.ndarray:
    """Mass that Q assigns to each leaf of ``partition``.

    Parameters
    ----------
    q : CovariateShiftSpec
    partition : TreePartition
    train_rows : ndarray, optional
        Covariates of the correlation subsample; required for the
        ``training`` kind.

    Returns
    -------
    ndarray, shape (M,)
        Nonnegative entries summing to one.
    """
    M = partition.n_leaves
    q.check_dim(partition.d)
    if q.kind == "point_mass":
        x = q.x.reshape(1, -1)
        m = int(partition.leaf_index(x)[0])
        if not (np.all(partition.leaf_lo[m] <= x[0]) and np.all(x[0] <= partition.leaf_hi[m])):
            raise DomainError(f"point {q.x.tolist()} lies outside every leaf")
        out = np.zeros(M)
        out[m] = 1.0
        return out
    if q.kind == "uniform_box":
        lo = np.maximum(partition.leaf_lo, q.lo)
        hi = np.minimum(partition.leaf_hi, q.hi)
        width = q.hi - q.lo
        frac = np.empty((M, partition.d))
        for j in range(partition.d):
            if width[j] > 0:
                frac[:, j] = np.clip(hi[:, j] - lo[:, j], 0.0, None) / width[j]
            else:
                # a flat side acts as an indicator of the containing leaves
                v = q.lo[j]
                frac[:, j] = ((partition.leaf_lo[:, j] < v) & (v <= partition.leaf_hi[:, j])).astype(float)
        out = np.prod(frac, axis=1)
        total = out.sum()
        if not total > 0:
            raise DomainError("target box does not meet the partition")
        return out / total
    if q.kind in ("empirical", "training"):
        if q.kind == "empirical":
            rows = q.rows
        else:
            if train_rows is None:
                raise DomainError("the training target needs the correlation-sample covariates")
            rows = np.asarray(train_rows, dtype=float)
        if rows.shape[0] == 0:
            raise DomainError("no rows to place")
        counts = np.bincount(partition.leaf_index(rows), minlength=M).astype(float)
        return counts / counts.sum()
    raise DomainError(f"unknown target kind {q.kind!r}")
