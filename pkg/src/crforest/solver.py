"""Leaf-membership designs and weighted normal equations solved by CG.

For a partition with ``M`` leaves and clusters ``i`` with leaf-indicator
matrices ``chi_i``, the normal matrix ``A = sum_i chi_i' W_i chi_i`` is never
formed. A product ``A b`` gathers ``b`` at each row's leaf, applies the
cluster weights and scatters back, which costs time linear in the number of
rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .weights import WeightSpec, weight_constants

__all__ = [
    "DesignAssembly",
    "SolveReport",
    "CGNonConvergence",
    "assemble_design",
    "design_from_leaves",
    "normal_matvec",
    "cg_solve",
    "default_max_iter",
    "fitted_leaf_values",
    "basis_solve",
    "dense_normal_matrix",
]


class CGNonConvergence(RuntimeError):
    """CG hit its iteration cap (or lost positive curvature).

    Attributes
    ----------
    solution : ndarray
        Best iterate reached.
    residual : float
        Its residual two-norm.
    iterations : int
    """

    def __init__(self, msg, solution=None, residual=np.nan, iterations=0):
        super().__init__(msg)
        self.solution = solution
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SolveReport:
    solution: np.ndarray
    iterations: int
    residual: float


@dataclass(eq=False)
class DesignAssembly:
    """Sparse leaf design of a set of clusters.

    Attributes
    ----------
    leaf : ndarray of int, shape (s_N,)
        Leaf id of every row, cluster after cluster.
    ptr : ndarray of int, shape (n_clusters + 1,)
        Cluster offsets into ``leaf``.
    counts : ndarray of int, shape (M,)
        Rows per leaf.
    """

    leaf: np.ndarray
    ptr: np.ndarray
    counts: np.ndarray

    @property
    def M(self) -> int:
        return int(self.counts.size)

    @property
    def n_rows(self) -> int:
        return int(self.leaf.size)

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.ptr)

    @property
    def empty(self) -> np.ndarray:
        """Mask of leaves no row falls into."""
        return self.counts == 0

    def compact(self):
        """Design restricted to occupied leaves, plus the map back to full ids."""
        occupied = np.flatnonzero(self.counts > 0)
        if occupied.size == self.M:
            return self, occupied
        remap = np.full(self.M, -1, dtype=np.int64)
        remap[occupied] = np.arange(occupied.size)
        return DesignAssembly(remap[self.leaf], self.ptr, self.counts[occupied]), occupied


def design_from_leaves(leaf, ptr, n_leaves: int) -> DesignAssembly:
    leaf = np.ascontiguousarray(leaf, dtype=np.int64)
    ptr = np.ascontiguousarray(ptr, dtype=np.int64)
    counts = np.bincount(leaf, minlength=n_leaves).astype(np.int64)
    return DesignAssembly(leaf, ptr, counts)


def assemble_design(partition, ds, clusters=None) -> DesignAssembly:
    """Leaf ids of every row of the chosen clusters of ``ds``.

    Parameters
    ----------
    partition : TreePartition
    ds : ClusteredDataset
    clusters : array of int, optional
        Cluster positions to include, in order; all clusters by default.
    """
    if clusters is None:
        rows, ptr = np.arange(ds.N), ds.ptr
    else:
        rows, ptr = ds.rows(clusters)
    return design_from_leaves(partition.leaf_index(ds.X[rows]), ptr, partition.n_leaves)


def normal_matvec(design: DesignAssembly, spec: WeightSpec, b) -> np.ndarray:
    """``(sum_i chi_i' W_i chi_i) b`` for a vector or an (M, c) block."""
    b = np.asarray(b, dtype=float)
    vec = b.ndim == 1
    B = np.ascontiguousarray(b.reshape(design.M, -1))
    out = np.empty_like(B)
    K.normal_matvec(spec.code, spec.rho, design.ptr, design.leaf, B, out)
    return out.ravel() if vec else out


def dense_normal_matrix(design: DesignAssembly, spec: WeightSpec) -> np.ndarray:
    """Explicit normal matrix, for checks on small designs."""
    return normal_matvec(design, spec, np.eye(design.M))


def cg_solve(matvec, rhs, tol: float = 1e-10, max_iter: int = 1000, x0=None) -> SolveReport:
    """Plain conjugate gradients for a symmetric positive definite operator.

    Stops when ``||r|| <= tol * ||rhs||``. Raises :class:`CGNonConvergence`
    when ``max_iter`` is reached or the operator shows non-positive
    curvature.
    """
    rhs = np.asarray(rhs, dtype=float)
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=float)
    r = rhs - matvec(x) if x0 is not None else rhs.copy()
    p = r.copy()
    rs = float(r @ r)
    target = tol * float(np.linalg.norm(rhs))
    it = 0
    while math.sqrt(rs) > target:
        if it >= max_iter:
            raise CGNonConvergence(
                f"CG did not reach tolerance {tol} in {max_iter} iterations", x, math.sqrt(rs), it)
        ap = matvec(p)
        it += 1
        pap = float(p @ ap)
        if not pap > 0:
            raise CGNonConvergence("operator is not positive definite", x, math.sqrt(rs), it)
        a = rs / pap
        x += a * p
        r -= a * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return SolveReport(x, it, math.sqrt(rs))


def default_max_iter(design: DesignAssembly, spec: WeightSpec, tol: float) -> int:
    """``10 * ceil(sqrt(kappa) * ln(1/tol))`` with ``kappa = 2 C_W / c_W``,
    widened by the spread of the leaf counts beyond a factor of two."""
    C, c = weight_constants(spec, design.sizes if design.ptr.size > 1 else [1])
    occ = design.counts[design.counts > 0]
    spread = max(1.0, occ.max() / occ.min() / 2.0) if occ.size else 1.0
    kappa = 2.0 * C / c * spread
    return int(10 * math.ceil(math.sqrt(kappa) * math.log(1.0 / tol)))


def _block_solve(design, spec, rhs, tol, max_iter, x0):
    x = np.ascontiguousarray(x0, dtype=float).copy()
    it, status, res = K.block_cg(spec.code, spec.rho, design.ptr, design.leaf,
                                 np.ascontiguousarray(rhs), x, tol, max_iter)
    if status != K.CG_OK:
        why = "iteration cap reached" if status == K.CG_CAP else "non-positive curvature"
        raise CGNonConvergence(f"CG failed ({why}) after {it} iterations", x, float(res.max()), it)
    return x, it, float(res.max())


def _diagonal(spec):
    return spec.code == K.IDENTITY or spec.rho == 0.0


def fitted_leaf_values(design: DesignAssembly, spec: WeightSpec, y, tol: float = 1e-10,
                       max_iter: int | None = None, report: bool = False):
    """Weighted least-squares leaf constants ``A^{-1} sum_i chi_i' W_i y_i``.

    Leaves without rows get ``nan``; the system is solved on the occupied
    leaves only. With ``rho == 0`` the solution is the vector of leaf means,
    computed directly.

    Returns
    -------
    values : ndarray, shape (M,)
    report : SolveReport, only when ``report=True``
    """
    y = np.ascontiguousarray(y, dtype=float)
    if y.size != design.n_rows:
        raise ValueError("responses do not match the design rows")
    sub, occupied = design.compact()
    if occupied.size == 0:
        raise ValueError("design has no rows")
    sums = np.bincount(sub.leaf, weights=y, minlength=sub.M)
    means = sums / sub.counts
    if _diagonal(spec):
        sol, it, res = means, 0, 0.0
    else:
        rhs = K.weighted_rhs(spec.code, spec.rho, sub.ptr, sub.leaf, y, sub.M)
        if max_iter is None:
            max_iter = default_max_iter(sub, spec, tol)
        x, it, res = _block_solve(sub, spec, rhs.reshape(-1, 1), tol, max_iter, means.reshape(-1, 1))
        sol = x[:, 0]
    values = np.full(design.M, np.nan)
    values[occupied] = sol
    if report:
        return values, SolveReport(values, it, res)
    return values


def basis_solve(design: DesignAssembly, spec: WeightSpec, m, tol: float = 1e-10,
                max_iter: int | None = None) -> np.ndarray:
    """Columns ``A^{-1} e_m`` for one leaf id or an array of them.

    All leaves must be occupied. Several columns are run as independent
    CG recursions sharing each sweep over the rows.
    """
    if np.any(design.counts == 0):
        raise ValueError("basis columns need every leaf occupied; compact the design first")
    ms = np.atleast_1d(np.asarray(m, dtype=np.int64))
    E = np.zeros((design.M, ms.size))
    E[ms, np.arange(ms.size)] = 1.0
    x0 = E / design.counts[:, None]
    if _diagonal(spec):
        X = x0
    else:
        if max_iter is None:
            max_iter = default_max_iter(design, spec, tol)
        X, _, _ = _block_solve(design, spec, E, tol, max_iter, x0)
    return X[:, 0] if np.ndim(m) == 0 else X
