"""Scalar kernels and the biased squared empirical MMD between particle sets."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation

DEFAULT_BANDWIDTHS = (1.0, 2.0, 4.0, 8.0, 16.0)


@dataclass(frozen=True)
class Kernel:
    """``triangle``: k(x, y) = -|x - y|**p.  ``gaussian``: mean over h of exp(-(x - y)**2 / h)."""

    kind: str = "triangle"
    p: float = 2.0
    bandwidths: tuple[float, ...] = field(default=DEFAULT_BANDWIDTHS)

    def __post_init__(self):
        object.__setattr__(self, "bandwidths", tuple(float(b) for b in self.bandwidths))
        if self.kind == "triangle":
            if not 0.0 < self.p <= 2.0:
                raise ConfigError(f"kernel.p must lie in (0, 2], got {self.p}")
        elif self.kind == "gaussian":
            if not self.bandwidths or any(not (b > 0.0 and math.isfinite(b)) for b in self.bandwidths):
                raise ConfigError(f"kernel.bandwidths must be a nonempty list of positive numbers, got {self.bandwidths}")
        else:
            raise ConfigError(f"kernel.kind must be 'triangle' or 'gaussian', got {self.kind!r}")

    def of_diff(self, d: np.ndarray) -> np.ndarray:
        """Kernel value as a function of the difference ``x - y``."""
        d = np.asarray(d, dtype=np.float64)
        if self.kind == "triangle":
            if self.p == 2.0:
                return -(d * d)
            return -np.abs(d) ** self.p
        h = np.asarray(self.bandwidths)
        return np.exp(-(d[..., None] ** 2) / h).mean(axis=-1)

    def dof_diff(self, d: np.ndarray) -> np.ndarray:
        """Derivative of :meth:`of_diff` with respect to the difference (0 at a kink)."""
        d = np.asarray(d, dtype=np.float64)
        if self.kind == "triangle":
            if self.p == 2.0:
                return -2.0 * d
            mag = np.abs(d)
            with np.errstate(divide="ignore", invalid="ignore"):
                out = -self.p * np.sign(d) * np.where(mag > 0, mag ** (self.p - 1.0), 0.0)
            return out
        h = np.asarray(self.bandwidths)
        d3 = d[..., None]
        return (np.exp(-(d3 ** 2) / h) * (-2.0 * d3 / h)).mean(axis=-1)


def kernel_eval(k: Kernel, x: float, y: float) -> float:
    return float(k.of_diff(np.float64(x) - np.float64(y)))


def _sample_set(values, label: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ContractViolation(f"{label} must contain at least one particle")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{label} contains non-finite values")
    return arr


def squared_mmd(X: Sequence[float], Y: Sequence[float], k: Kernel) -> float:
    """Biased V-statistic, diagonal terms included; each self term is normalised by its own set size.

    Sums are exactly rounded, so the result is symmetric in its arguments bit for bit.
    """
    x = _sample_set(X, "X")
    y = _sample_set(Y, "Y")
    m, n = x.size, y.size
    kxx = math.fsum(k.of_diff(x[:, None] - x[None, :]).ravel()) / (m * m)
    kyy = math.fsum(k.of_diff(y[:, None] - y[None, :]).ravel()) / (n * n)
    kxy = math.fsum(k.of_diff(x[:, None] - y[None, :]).ravel()) / (m * n)
    return (kxx + kyy) - 2.0 * kxy


def squared_mmd_grad(X: Sequence[float], Y: Sequence[float], k: Kernel) -> np.ndarray:
    """Gradient of :func:`squared_mmd` with respect to each element of ``X``, ``Y`` held fixed."""
    x = _sample_set(X, "X")
    y = _sample_set(Y, "Y")
    return squared_mmd_rows_grad(x[None, :], y[None, :], k)[0]


def squared_mmd_rows(X: np.ndarray, Y: np.ndarray, k: Kernel) -> np.ndarray:
    """Row-wise squared MMD for X (R, M) against Y (R, N)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0] or 0 in X.shape or 0 in Y.shape:
        raise ContractViolation(f"squared_mmd_rows: incompatible shapes {X.shape} and {Y.shape}")
    m, n = X.shape[1], Y.shape[1]
    kxx = k.of_diff(X[:, :, None] - X[:, None, :]).sum(axis=(1, 2)) / (m * m)
    kyy = k.of_diff(Y[:, :, None] - Y[:, None, :]).sum(axis=(1, 2)) / (n * n)
    kxy = k.of_diff(X[:, :, None] - Y[:, None, :]).sum(axis=(1, 2)) / (m * n)
    return (kxx + kyy) - 2.0 * kxy


def squared_mmd_rows_grad(X: np.ndarray, Y: np.ndarray, k: Kernel) -> np.ndarray:
    """d squared_mmd_rows / dX, shape (R, M)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    m, n = X.shape[1], Y.shape[1]
    # symmetric kernel: d/dx_i of sum_jl k(x_j - x_l) = 2 sum_j k'(x_i - x_j)
    self_term = k.dof_diff(X[:, :, None] - X[:, None, :]).sum(axis=2) * (2.0 / (m * m))
    cross_term = k.dof_diff(X[:, :, None] - Y[:, None, :]).sum(axis=2) * (2.0 / (m * n))
    return self_term - cross_term
