"""Dense numerical substrate: seeded sampling and jittered ridge solves.

Matrices are plain ``float64`` numpy arrays. Randomness comes from numpy's
counter-based Philox generator keyed by ``(seed, stream)`` so that every
substream is reproducible no matter how work is scheduled.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla

from .errors import DimensionMismatch, SingularSystem

RNG_NAME = "philox-4x64/seedsequence-v1"

JITTER_START = 1e-12
JITTER_STOP = 1e-6


def rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for ``seed`` and an optional stream path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def gaussian_matrix(rows: int, cols: int, seed: int, stream: int = 0) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError(f"shape must be positive, got ({rows}, {cols})")
    return rng(seed, stream).standard_normal((rows, cols))


def uniform_vector(size: int, low: float, high: float, seed: int, stream: int = 0) -> np.ndarray:
    return rng(seed, stream).uniform(low, high, size=size)


def symmetrize(K: np.ndarray) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    return 0.5 * (K + K.T)


def is_psd(K: np.ndarray, rtol: float = 1e-8) -> bool:
    """Smallest eigenvalue at least ``-rtol * trace / n``."""
    K = symmetrize(K)
    n = K.shape[0]
    scale = max(np.trace(K) / n, np.finfo(float).tiny)
    return bool(np.linalg.eigvalsh(K)[0] >= -rtol * scale)


def cholesky_jittered(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A``, adding diagonal jitter on failure.

    Jitter starts at ``1e-12 * trace/n`` and grows tenfold up to
    ``1e-6 * trace/n``. Returns the factor and the jitter that was used.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    try:
        return sla.cholesky(A, lower=True, check_finite=True), 0.0
    except (sla.LinAlgError, ValueError):
        pass
    scale = abs(np.trace(A)) / n if n else 0.0
    if scale == 0.0 or not np.isfinite(scale):
        scale = 1.0
    jitter = JITTER_START * scale
    eye = np.eye(n)
    while jitter <= JITTER_STOP * scale * (1 + 1e-9):
        try:
            return sla.cholesky(A + jitter * eye, lower=True), jitter
        except sla.LinAlgError:
            jitter *= 10.0
    raise SingularSystem(f"Cholesky failed for {n}x{n} system even with jitter {JITTER_STOP:g}*trace/n")


def ridge_solve(K: np.ndarray, y: np.ndarray, eps: float) -> np.ndarray:
    """Solve ``(K + eps*I) x = y`` for symmetric ``K``.

    ``y`` may be a vector or a matrix of stacked right-hand sides.
    """
    K = np.asarray(K, dtype=float)
    y = np.asarray(y, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionMismatch(f"K must be square, got {K.shape}")
    if y.shape[0] != K.shape[0]:
        raise DimensionMismatch(f"K is {K.shape[0]}x{K.shape[0]} but y has {y.shape[0]} rows")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    A = symmetrize(K) + eps * np.eye(K.shape[0])
    L, _ = cholesky_jittered(A)
    return sla.cho_solve((L, True), y)
