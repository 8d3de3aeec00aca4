"""Axis-aligned tree partitions grown by constrained CART."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K

__all__ = ["TreePartition", "SplitCandidate", "fit_partition", "best_split", "leaf_index"]


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    gain: float


@dataclass(eq=False)
class TreePartition:
    """Binary tree of axis-aligned splits.

    Node arrays use ``feature == -1`` for leaves; ``leaf_of[node]`` is the
    leaf id of a leaf node. A row goes left when ``x[feature] <= threshold``.

    Attributes
    ----------
    leaf_lo, leaf_hi : ndarray, shape (M, d)
        Leaf boxes. Outer faces are infinite unless a finite root box was
        given.
    leaf_count : ndarray, shape (M,)
        Split-sample observations per leaf.
    saturated : ndarray of bool, shape (M,)
        Leaves that kept at least ``2k`` observations because no admissible
        split existed.
    leaf_splits : ndarray, shape (M, d)
        Number of splits on each feature along the root-to-leaf path.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_of: np.ndarray
    leaf_lo: np.ndarray
    leaf_hi: np.ndarray
    leaf_count: np.ndarray
    saturated: np.ndarray
    leaf_splits: np.ndarray
    leaf_depth: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(self.leaf_lo.shape[0])

    M = n_leaves

    @property
    def d(self) -> int:
        return int(self.leaf_lo.shape[1])

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def leaf_index(self, X) -> np.ndarray:
        """Leaf id (0-based) of each row of ``X``."""
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        return K.route(self.feature, self.threshold, self.left, self.right, self.leaf_of, 0, X)

    def split_shares(self) -> np.ndarray:
        """Per-leaf fraction of path splits on each feature (0 at the root)."""
        depth = np.maximum(self.leaf_depth, 1)[:, None]
        return self.leaf_splits / depth

    @classmethod
    def from_splits(cls, splits, lo, hi):
        """Build a partition by hand.

        Parameters
        ----------
        splits : nested tuples
            ``None`` for a leaf, or ``(feature, threshold, left, right)``.
        lo, hi : sequence of float
            Root box.
        """
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        d = lo.size
        feature, threshold, left, right, leaf_of = [], [], [], [], []
        boxes, depths, paths = [], [], []

        def visit(node, blo, bhi, depth, path):
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            leaf_of.append(-1)
            if node is None:
                leaf_of[i] = len(boxes)
                boxes.append((blo, bhi))
                depths.append(depth)
                paths.append(path)
                return i
            f, t, ln, rn = node
            feature[i] = f
            threshold[i] = t
            p = path.copy()
            p[f] += 1
            lhi = bhi.copy()
            lhi[f] = t
            rlo = blo.copy()
            rlo[f] = t
            left[i] = visit(ln, blo, lhi, depth + 1, p)
            right[i] = visit(rn, rlo, bhi, depth + 1, p)
            return i

        visit(splits, lo, hi, 0, np.zeros(d, dtype=np.int64))
        M = len(boxes)
        return cls(
            feature=np.array(feature, dtype=np.int64),
            threshold=np.array(threshold, dtype=float),
            left=np.array(left, dtype=np.int64),
            right=np.array(right, dtype=np.int64),
            leaf_of=np.array(leaf_of, dtype=np.int64),
            leaf_lo=np.array([b[0] for b in boxes]).reshape(M, d),
            leaf_hi=np.array([b[1] for b in boxes]).reshape(M, d),
            leaf_count=np.zeros(M, dtype=np.int64),
            saturated=np.zeros(M, dtype=bool),
            leaf_splits=np.array(paths, dtype=np.int64).reshape(M, d),
            leaf_depth=np.array(depths, dtype=np.int64),
        )

    def to_dict(self) -> dict:
        """Nested JSON-ready form: internal nodes carry their children."""

        def node(i):
            if self.feature[i] < 0:
                m = int(self.leaf_of[i])
                return {
                    "leaf": m,
                    "lo": [_jnum(v) for v in self.leaf_lo[m]],
                    "hi": [_jnum(v) for v in self.leaf_hi[m]],
                    "count": int(self.leaf_count[m]),
                    "saturated": bool(self.saturated[m]),
                    "splits": self.leaf_splits[m].tolist(),
                }
            return {
                "feature": int(self.feature[i]),
                "threshold": float(self.threshold[i]),
                "left": node(int(self.left[i])),
                "right": node(int(self.right[i])),
            }

        return {"d": self.d, "n_leaves": self.n_leaves, "root": node(0)}

    @classmethod
    def from_dict(cls, doc: dict) -> "TreePartition":
        d = int(doc["d"])
        M = int(doc["n_leaves"])
        feature, threshold, left, right, leaf_of = [], [], [], [], []
        lo = np.empty((M, d))
        hi = np.empty((M, d))
        count = np.zeros(M, dtype=np.int64)
        sat = np.zeros(M, dtype=bool)
        splits = np.zeros((M, d), dtype=np.int64)
        depth = np.zeros(M, dtype=np.int64)

        stack = [(doc["root"], None, 0)]
        while stack:
            rec, parent, dep = stack.pop()
            i = len(feature)
            if parent is not None:
                p, side = parent
                (left if side == 0 else right)[p] = i
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            leaf_of.append(-1)
            if "leaf" in rec:
                m = int(rec["leaf"])
                leaf_of[i] = m
                lo[m] = [_fnum(v) for v in rec["lo"]]
                hi[m] = [_fnum(v) for v in rec["hi"]]
                count[m] = rec["count"]
                sat[m] = rec["saturated"]
                splits[m] = rec["splits"]
                depth[m] = dep
                continue
            feature[i] = int(rec["feature"])
            threshold[i] = float(rec["threshold"])
            stack.append((rec["right"], (i, 1), dep + 1))
            stack.append((rec["left"], (i, 0), dep + 1))
        return cls(np.array(feature, dtype=np.int64), np.array(threshold),
                   np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                   np.array(leaf_of, dtype=np.int64), lo, hi, count, sat, splits, depth)


def _jnum(v):
    v = float(v)
    if v == np.inf:
        return "inf"
    if v == -np.inf:
        return "-inf"
    return v


def _fnum(v):
    return float(v)


def fit_partition(X, y, cfg, rng: np.random.Generator | None = None, root_lo=None, root_hi=None) -> TreePartition:
    """Grow a partition on the split sample ``(X, y)``.

    Nodes with at least ``2k`` observations are split at the best admissible
    CART cut; a cut is admissible when each child keeps at least ``k``
    observations and at least an ``alpha_split`` fraction of its parent.
    Along every path, each feature takes at least ``floor(c * pi_frac / d)``
    of the first ``c`` splits: when the remaining depth budget would not
    allow a lagging feature to catch up, the candidate set is restricted to
    the lagging features. With ``cfg.mtry`` set, a random subset of that
    size is drawn from the candidate features at each node using ``rng``.
    """
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.ascontiguousarray(y, dtype=float).reshape(-1)
    n, d = X.shape
    if n != y.size:
        raise ValueError("X and y have different lengths")
    if n == 0:
        raise ValueError("split sample is empty")
    mtry = int(cfg.mtry) if cfg.mtry is not None else 0
    if 0 < mtry < d:
        if rng is None:
            raise ValueError("feature subsampling needs a random stream")
        noise = rng.random(2 * n * mtry + 1)
    else:
        mtry = 0
        noise = np.empty(0)
    lo = np.full(d, -np.inf) if root_lo is None else np.asarray(root_lo, dtype=float)
    hi = np.full(d, np.inf) if root_hi is None else np.asarray(root_hi, dtype=float)
    out = K.grow_tree(X, y, int(cfg.k), float(cfg.alpha_split), float(cfg.pi_frac), mtry, noise, lo, hi)
    feature, threshold, left, right, leaf_of, count, sat, llo, lhi, splits, depth = out
    return TreePartition(feature, threshold, left, right, leaf_of, llo, lhi, count, sat, splits, depth)


def best_split(x, y, cfg) -> SplitCandidate | None:
    """Best admissible cut on a single feature column (feature index 0).

    Returns ``None`` when no cut leaves ``k`` observations and an
    ``alpha_split`` fraction on both sides.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    order = np.argsort(x, kind="mergesort")
    gain, thr, t = K.scan_feature(np.ascontiguousarray(x[order]), np.ascontiguousarray(y[order]),
                                  int(cfg.k), float(cfg.alpha_split))
    if t < 0:
        return None
    return SplitCandidate(0, float(thr), float(gain))


def leaf_index(partition: TreePartition, x) -> np.ndarray | int:
    """Leaf id of a single row (returns an int) or of each row of a matrix."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return int(partition.leaf_index(x.reshape(1, -1))[0])
    return partition.leaf_index(x)
