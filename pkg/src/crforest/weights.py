"""Working weight matrices W(rho) for the identity, equicorrelated and AR(1) classes.

Equicorrelated weights are the inverse of the exchangeable correlation
matrix ``(1 - rho) I + rho 11'``. AR(1) weights are the tridiagonal matrix
with diagonal ``1, 1 + rho^2, ..., 1 + rho^2, 1`` and off-diagonal ``-rho``
(equal to ``(1 - rho^2)`` times the inverse AR(1) correlation matrix), with
``W = 1 - rho^2`` for a singleton.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .data import DomainError

__all__ = [
    "WeightSpec",
    "CLASS_CODES",
    "DEFAULT_GAMMA",
    "weight_matvec",
    "weight_dense",
    "correlation_matrix",
    "dominance_margin",
    "abs_row_sum",
    "weight_constants",
]

CLASS_CODES = {"identity": K.IDENTITY, "equicorrelated": K.EQUICORR, "ar1": K.AR1}
DEFAULT_GAMMA = {"identity": (0.0, 0.0), "equicorrelated": (0.0, 0.95), "ar1": (-0.95, 0.95)}
DENSE_CAP = 512


@dataclass(frozen=True)
class WeightSpec:
    """Weight class, correlation parameter and admissible range ``gamma``."""

    cls: str = "identity"
    rho: float = 0.0
    gamma: tuple = None

    def __post_init__(self):
        if self.cls not in CLASS_CODES:
            raise DomainError(f"unknown weight class {self.cls!r}")
        lo_max, hi_max = DEFAULT_GAMMA[self.cls]
        gamma = self.gamma if self.gamma is not None else (lo_max, hi_max)
        lo, hi = float(gamma[0]), float(gamma[1])
        if not (lo_max <= lo <= hi <= hi_max):
            raise DomainError(
                f"range [{lo}, {hi}] is not inside [{lo_max}, {hi_max}] for class {self.cls}")
        object.__setattr__(self, "gamma", (lo, hi))
        rho = float(self.rho)
        if not (lo - 1e-12 <= rho <= hi + 1e-12):
            raise DomainError(f"rho={rho} lies outside [{lo}, {hi}]")
        object.__setattr__(self, "rho", min(max(rho, lo), hi))

    @property
    def code(self) -> int:
        return CLASS_CODES[self.cls]

    def with_rho(self, rho: float) -> "WeightSpec":
        return WeightSpec(self.cls, rho, self.gamma)

    def grid(self, size: int) -> np.ndarray:
        lo, hi = self.gamma
        if size == 1 or lo == hi:
            return np.array([lo])
        return np.linspace(lo, hi, size)


def weight_matvec(spec: WeightSpec, n: int, v) -> np.ndarray:
    """``W(rho) v`` for one cluster of size ``n`` in O(n) operations."""
    v = np.ascontiguousarray(v, dtype=float).reshape(-1)
    if v.size != n or n < 1:
        raise ValueError(f"vector of length {v.size} does not match cluster size {n}")
    out = np.empty(n)
    K.apply_weights(spec.code, spec.rho, np.array([0, n], dtype=np.int64), v, out)
    return out


def weight_dense(spec: WeightSpec, n: int) -> np.ndarray:
    """Explicit ``n x n`` weight matrix (a test oracle, ``n <= 512``)."""
    if n > DENSE_CAP:
        raise ValueError(f"dense weights are capped at n={DENSE_CAP}")
    rho = spec.rho
    if spec.cls == "equicorrelated":
        c = rho / (1.0 + (n - 1) * rho)
        return (np.eye(n) - c * np.ones((n, n))) / (1.0 - rho)
    if spec.cls == "ar1":
        if n == 1:
            return np.array([[1.0 - rho * rho]])
        W = np.diag(np.full(n, 1.0 + rho * rho))
        W[0, 0] = W[-1, -1] = 1.0
        i = np.arange(n - 1)
        W[i, i + 1] = W[i + 1, i] = -rho
        return W
    return np.eye(n)


def correlation_matrix(spec: WeightSpec, n: int) -> np.ndarray:
    """Working correlation matrix the weights invert."""
    rho = spec.rho
    if spec.cls == "equicorrelated":
        return (1.0 - rho) * np.eye(n) + rho * np.ones((n, n))
    if spec.cls == "ar1":
        j = np.arange(n)
        return rho ** np.abs(j[:, None] - j[None, :])
    return np.eye(n)


def dominance_margin(spec: WeightSpec, n: int) -> float:
    """``min_j (W_jj - sum_{j' != j} |W_jj'|)`` in closed form."""
    rho = spec.rho
    if spec.cls == "equicorrelated":
        return 1.0 / (1.0 + (n - 1) * rho)
    if spec.cls == "ar1":
        a = abs(rho)
        if n == 1:
            return 1.0 - rho * rho
        if n == 2:
            return 1.0 - a
        return (1.0 - a) ** 2
    return 1.0


def abs_row_sum(spec: WeightSpec, n: int) -> float:
    """``max_j sum_j' |W_jj'|`` (the operator one-norm) in closed form."""
    rho = spec.rho
    if spec.cls == "equicorrelated":
        c = rho / (1.0 + (n - 1) * rho)
        return (1.0 - c + (n - 1) * c) / (1.0 - rho)
    if spec.cls == "ar1":
        a = abs(rho)
        if n == 1:
            return 1.0 - rho * rho
        if n == 2:
            return 1.0 + a
        return (1.0 + a) ** 2
    return 1.0


def weight_constants(spec: WeightSpec, sizes) -> tuple[float, float]:
    """``(C_W, c_W)``: largest row sum and smallest margin over the range
    endpoints and the given cluster sizes."""
    sizes = np.unique(np.asarray(sizes, dtype=np.int64))
    C, c = 0.0, np.inf
    for rho in spec.gamma:
        s = spec.with_rho(rho)
        for n in sizes:
            C = max(C, abs_row_sum(s, int(n)))
            c = min(c, dominance_margin(s, int(n)))
    return C, c
