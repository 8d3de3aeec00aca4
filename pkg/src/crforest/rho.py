"""Pilot residuals and estimation of the working correlation parameter.

The Q-weighted loss of a candidate ``rho`` is

    L_Q(rho) = sum_m Q(L_m) * e_m' A^{-1} B A^{-1} e_m,
    A = sum_i chi_i' W_i chi_i,   B = sum_i chi_i' W_i e_i e_i' W_i chi_i,

an estimate of the Q-integrated variance of a rho-weighted tree. The
training loss replaces ``Q(L_m)`` by the leaf counts. ``B`` is never formed:
with ``a_m = A^{-1} e_m`` the summand is ``sum_i (a_m' chi_i' W_i e_i)^2``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .solver import CGNonConvergence, DesignAssembly, default_max_iter, design_from_leaves
from .weights import WeightSpec

__all__ = [
    "PilotResiduals",
    "RhoLossCurve",
    "pilot_residuals",
    "residuals_from_design",
    "loss_q",
    "loss_train",
    "loss_values",
    "estimate_rho",
    "moment_rho",
    "MassWarning",
]


class MassWarning(RuntimeWarning):
    """Part of the target mass sits on leaves without correlation-sample rows."""


@dataclass(eq=False)
class PilotResiduals:
    """Residuals of the correlation sample around unweighted leaf means.

    ``eps`` is aligned with ``design.leaf`` (cluster after cluster).
    """

    eps: np.ndarray
    design: DesignAssembly

    @property
    def ptr(self):
        return self.design.ptr


@dataclass(frozen=True)
class RhoLossCurve:
    grid: np.ndarray
    loss: np.ndarray
    rho_hat: float
    strategy: str


def pilot_residuals(partition, X, y, ptr) -> PilotResiduals:
    """Center each row's response on the mean of its leaf.

    Parameters
    ----------
    partition : TreePartition
    X, y : ndarray
        Covariates and responses of the correlation clusters, flat.
    ptr : ndarray
        Cluster offsets into the rows.
    """
    y = np.asarray(y, dtype=float)
    design = design_from_leaves(partition.leaf_index(X), ptr, partition.n_leaves)
    return residuals_from_design(design, y)


def residuals_from_design(design: DesignAssembly, y) -> PilotResiduals:
    y = np.asarray(y, dtype=float)
    sums = np.bincount(design.leaf, weights=y, minlength=design.M)
    means = np.divide(sums, design.counts, out=np.zeros(design.M), where=design.counts > 0)
    return PilotResiduals(y - means[design.leaf], design)


def _masses_on_occupied(res: PilotResiduals, masses):
    masses = np.asarray(masses, dtype=float)
    if masses.shape != (res.design.M,):
        raise ValueError(f"expected {res.design.M} leaf masses, got shape {masses.shape}")
    if np.any(masses < 0):
        raise ValueError("leaf masses must be nonnegative")
    sub, occupied = res.design.compact()
    m_occ = masses[occupied]
    total, kept = masses.sum(), m_occ.sum()
    if not kept > 0:
        raise ValueError("the target puts no mass on leaves with correlation-sample rows")
    if kept < total * (1 - 1e-12):
        warnings.warn(f"{1 - kept / total:.3g} of the target mass lies on leaves without "
                      "correlation-sample rows; renormalising", MassWarning, stacklevel=3)
        m_occ = m_occ * (total / kept)
    return sub, m_occ


def loss_values(res: PilotResiduals, spec: WeightSpec, grid, masses, tol=1e-10, max_iter=None,
                normalise=True) -> np.ndarray:
    """Loss at each value of ``grid`` for leaf masses ``masses`` (full length M).

    Each supported leaf costs one CG solve per grid value; solves at
    consecutive grid values are warm-started from each other.
    """
    if normalise:
        sub, m_occ = _masses_on_occupied(res, masses)
    else:
        sub, occupied = res.design.compact()
        m_occ = np.asarray(masses, dtype=float)[occupied]
    support = np.flatnonzero(m_occ > 0).astype(np.int64)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    for g in grid:
        spec.with_rho(g)
    if max_iter is None:
        max_iter = default_max_iter(sub, spec, tol)
    losses, it, status = K.loss_curve(spec.code, grid, sub.ptr, sub.leaf, sub.counts.astype(float),
                                      np.ascontiguousarray(res.eps), support,
                                      np.ascontiguousarray(m_occ[support]), tol, max_iter)
    if status != K.CG_OK:
        raise CGNonConvergence(f"CG failed while evaluating the loss (status {status})", iterations=it)
    return losses


def loss_q(res: PilotResiduals, spec: WeightSpec, rho: float, masses, tol=1e-10, max_iter=None) -> float:
    """Q-weighted loss at one value of rho."""
    return float(loss_values(res, spec, [rho], masses, tol, max_iter)[0])


def loss_train(res: PilotResiduals, spec: WeightSpec, rho: float, tol=1e-10, max_iter=None) -> float:
    """Training loss: the Q-weighted loss with the raw leaf counts as masses."""
    return float(loss_values(res, spec, [rho], res.design.counts.astype(float), tol, max_iter,
                             normalise=False)[0])


def _argmin(grid, loss):
    best = np.min(loss)
    near = np.flatnonzero(loss <= best + 1e-12 * abs(best))
    # ties go to the smallest |rho|, then the smaller rho
    order = np.lexsort((grid[near], np.abs(grid[near])))
    return float(grid[near[order[0]]])


def estimate_rho(res: PilotResiduals, spec: WeightSpec, strategy: str, masses=None, grid_size: int = 33,
                 rho_fixed: float | None = None, tol=1e-10, max_iter=None) -> RhoLossCurve:
    """Choose rho by grid search (``q_shift``/``train``), moments or passthrough."""
    if strategy == "fixed":
        if rho_fixed is None:
            raise ValueError("fixed strategy needs rho_fixed")
        rho = spec.with_rho(rho_fixed).rho
        return RhoLossCurve(np.array([rho]), np.array([np.nan]), rho, strategy)
    if strategy == "moment":
        rho = moment_rho(res, spec)
        return RhoLossCurve(np.array([rho]), np.array([np.nan]), rho, strategy)
    grid = spec.grid(grid_size)
    if strategy == "q_shift":
        if masses is None:
            raise ValueError("q_shift needs leaf masses")
        loss = loss_values(res, spec, grid, masses, tol, max_iter)
    elif strategy == "train":
        loss = loss_values(res, spec, grid, res.design.counts.astype(float), tol, max_iter, normalise=False)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return RhoLossCurve(grid, loss, _argmin(grid, loss), strategy)


def moment_rho(res: PilotResiduals, spec: WeightSpec | None = None) -> float:
    """Method-of-moments correlation of the residuals, clipped to the range.

    Equicorrelated (default): the mean over clusters of the mean pairwise
    within-cluster product, divided by the mean squared residual. AR(1):
    the same with adjacent pairs only.
    """
    spec = spec if spec is not None else WeightSpec("equicorrelated")
    eps = np.asarray(res.eps, dtype=float)
    ptr = res.ptr
    sizes = np.diff(ptr)
    multi = np.flatnonzero(sizes >= 2)
    if multi.size == 0:
        raise ValueError("no cluster has two or more rows; correlation is not identifiable")
    starts = ptr[:-1]
    if spec.cls == "ar1":
        prod = eps[:-1] * eps[1:]
        # drop products that straddle two clusters
        keep = np.ones(prod.size, dtype=bool)
        keep[ptr[1:-1] - 1] = False
        cl = np.repeat(np.arange(sizes.size), sizes)[:-1]
        sums = np.bincount(cl[keep], weights=prod[keep], minlength=sizes.size)
        per = sums[multi] / (sizes[multi] - 1)
    else:
        s = np.add.reduceat(eps, starts)
        s2 = np.add.reduceat(eps * eps, starts)
        n = sizes.astype(float)
        per = ((s * s - s2) / (n * (n - 1)))[multi]
    num = per.mean()
    den = np.mean(eps * eps)
    raw = 0.0 if den == 0 else num / den
    lo, hi = spec.gamma
    return float(min(max(raw, lo), hi))
