"""Random ensemble mixture over particles: K random convex combinations of N particles."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .errors import ContractViolation


def sample_simplex(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """K rows of N i.i.d. Uniform(0, 1) draws, each row divided by its sum."""
    if n < 1 or k < 1:
        raise ContractViolation(f"sample_simplex needs N >= 1 and K >= 1, got N={n}, K={k}")
    alpha = rng.random((k, n))
    sums = alpha.sum(axis=1)
    while np.any(sums <= 0.0):  # only reachable if every draw in a row is exactly 0
        bad = sums <= 0.0
        alpha[bad] = rng.random((int(bad.sum()), n))
        sums = alpha.sum(axis=1)
    return alpha / sums[:, None]


def rem_combine(particles, alpha: np.ndarray) -> Node:
    """Combined particles ``Z'_k = sum_i alpha[k, i] * Z_i``; (N,) -> (K,) or (B, N) -> (B, K)."""
    z = particles if isinstance(particles, Node) else Node(particles)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 2 or z.shape[-1] != alpha.shape[1]:
        raise ContractViolation(f"cannot combine particles {z.shape} with weights {alpha.shape}")
    if z.value.ndim == 1:
        return dc.reshape(dc.matmul(dc.reshape(z, (1, z.shape[0])), alpha.T), (alpha.shape[0],))
    return dc.matmul(z, alpha.T)
