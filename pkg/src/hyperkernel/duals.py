"""Gaussian dual expectations of the scaled ReLU.

For ``(u, v) ~ N(0, [[s11, s12], [s12, s22]])`` we need

    dual_relu     = 2 E[relu(u) relu(v)]
    dual_relu_dot = 2 E[1{u > 0} 1{v > 0}]

Both have arc-cosine closed forms. ``mc_dual`` is an independent Monte Carlo
estimate used to check them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidCov
from .linalg import rng

PSD_SLACK = 1e-12


@dataclass(frozen=True)
class CovPair:
    """2x2 covariance block (Var u, Cov(u, v), Var v)."""

    s11: float
    s12: float
    s22: float

    def __post_init__(self):
        check_cov(self.s11, self.s12, self.s22)

    @property
    def correlation(self) -> float:
        d = np.sqrt(self.s11 * self.s22)
        return float(np.clip(self.s12 / d, -1.0, 1.0)) if d > 0 else 0.0

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.s11, self.s12], [self.s12, self.s22]])


def check_cov(s11, s12, s22):
    s11, s12, s22 = np.asarray(s11), np.asarray(s12), np.asarray(s22)
    if not (np.all(np.isfinite(s11)) and np.all(np.isfinite(s12)) and np.all(np.isfinite(s22))):
        raise InvalidCov("covariance entries must be finite")
    if np.any(s11 < 0) or np.any(s22 < 0):
        raise InvalidCov(f"variances must be non-negative, got s11={s11}, s22={s22}")
    # relative slack so that recursions at large scale don't trip on rounding
    bound = s11 * s22
    if np.any(s12 * s12 > bound + PSD_SLACK * np.maximum(1.0, bound)):
        raise InvalidCov(f"not PSD: s12^2={s12 * s12} > s11*s22={bound}")


def _angle(s11, s12, s22):
    norm = np.sqrt(s11 * s22)
    safe = np.where(norm > 0, norm, 1.0)
    c = np.clip(s12 / safe, -1.0, 1.0)
    return norm, np.arccos(c), c


def relu_dual(s11, s12, s22):
    """Vectorised ``2 E[relu(u) relu(v)]``; no validation."""
    norm, theta, c = _angle(s11, s12, s22)
    out = norm * (np.sin(theta) + (np.pi - theta) * c) / np.pi
    return np.where(norm > 0, out, 0.0)


def relu_dual_dot(s11, s12, s22):
    """Vectorised ``2 E[1{u>0} 1{v>0}]``; zero when either variance vanishes."""
    norm, theta, _ = _angle(s11, s12, s22)
    return np.where(norm > 0, (np.pi - theta) / np.pi, 0.0)


def dual_relu(lam: CovPair) -> float:
    check_cov(lam.s11, lam.s12, lam.s22)
    return float(relu_dual(lam.s11, lam.s12, lam.s22))


def dual_relu_dot(lam: CovPair) -> float:
    check_cov(lam.s11, lam.s12, lam.s22)
    return float(relu_dual_dot(lam.s11, lam.s12, lam.s22))


@dataclass(frozen=True)
class MCDual:
    mean: float
    stderr: float
    mean_dot: float
    stderr_dot: float


def mc_dual(lam: CovPair, n_samples: int, seed: int, chunk: int = 1 << 18) -> MCDual:
    """Monte Carlo estimates of both duals with their standard errors."""
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    check_cov(lam.s11, lam.s12, lam.s22)
    # factor the covariance by hand so the degenerate (rank-1) cases stay exact
    a = np.sqrt(lam.s11)
    if a > 0:
        b = lam.s12 / a
        c = np.sqrt(max(lam.s22 - b * b, 0.0))
    else:
        b, c = 0.0, np.sqrt(lam.s22)
    gen = rng(seed, 0xD0A1)
    sums = np.zeros(4)
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        e = gen.standard_normal((2, m))
        u = a * e[0]
        v = b * e[0] + c * e[1]
        val = 2.0 * np.maximum(u, 0.0) * np.maximum(v, 0.0)
        dot = 2.0 * ((u > 0) & (v > 0))
        sums += (val.sum(), (val * val).sum(), dot.sum(), (dot * dot).sum())
        done += m
    n = float(n_samples)
    mean, mean_dot = sums[0] / n, sums[2] / n
    var = max(sums[1] / n - mean * mean, 0.0) * n / (n - 1)
    var_dot = max(sums[3] / n - mean_dot * mean_dot, 0.0) * n / (n - 1)
    return MCDual(mean, np.sqrt(var / n), mean_dot, np.sqrt(var_dot / n))


def random_cov_pair(gen: np.random.Generator) -> CovPair:
    """A random valid CovPair with log-uniform scales and uniform correlation."""
    s11, s22 = np.exp(gen.uniform(-2.0, 2.0, size=2))
    rho = gen.uniform(-1.0, 1.0)
    return CovPair(float(s11), float(rho * np.sqrt(s11 * s22)), float(s22))
