"""Kernel ridge regression with the analytic hyperkernels.

Prediction for a test input ``u`` is ``k(u)^T (K + eps I)^{-1} Y`` where
``k(u)_i = kernel(u, u_i)``. Inputs are ``(X, Z)`` row arrays so that the Gram
assembly can share the meta recursion between pixels of the same image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .kernels import HyperKernelConfig, hyper_gram, hyper_nngp, hyper_ntk
from .linalg import ridge_solve, symmetrize

DEFAULT_EPS = 1e-3


@dataclass
class GramSystem:
    K: np.ndarray
    Y: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.K.ndim != 2 or self.K.shape[0] != self.K.shape[1] or self.K.shape[0] != self.Y.shape[0]:
            raise DimensionMismatch(f"Gram {self.K.shape} does not match labels {self.Y.shape}")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    def weights(self) -> np.ndarray:
        return ridge_solve(symmetrize(self.K), self.Y, self.eps)


class HyperKernel:
    """Pair kernel ``kind`` in {"nngp", "ntk"} with a vectorised ``gram`` method."""

    def __init__(self, cfg: HyperKernelConfig, kind: str = "ntk"):
        if kind not in ("nngp", "ntk"):
            raise ValueError(f"unknown kernel kind {kind!r}")
        self.cfg = cfg
        self.kind = kind

    def __call__(self, u, u_prime) -> float:
        if self.kind == "ntk":
            return hyper_ntk(u, u_prime, self.cfg).theta_h
        return hyper_nngp(u, u_prime, self.cfg).last.s12

    def gram(self, U1, U2) -> np.ndarray:
        return hyper_gram(U1[0], U1[1], U2[0], U2[1], self.cfg)[self.kind]


def _rows(U):
    return [tuple(a[i] for a in U) for i in range(len(U[0]))]


def naive_gram(kernel, U1, U2) -> np.ndarray:
    """Gram block by calling ``kernel`` on every pair (reference path)."""
    r1, r2 = _rows(U1), _rows(U2)
    return np.array([[kernel(a, b) for b in r2] for a in r1]).reshape(len(r1), len(r2))


def gram(kernel, U1, U2) -> np.ndarray:
    if hasattr(kernel, "gram"):
        return np.asarray(kernel.gram(U1, U2), dtype=float)
    return naive_gram(kernel, U1, U2)


def fit_predict(U_train, Y, U_test, kernel, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Ridge predictions at ``U_test``.

    ``U_*`` are tuples of row arrays (``(X, Z)`` for hyperkernels, ``(X,)`` for
    a plain kernel); ``kernel`` is a pair function, optionally with ``gram``.
    """
    U_train = tuple(np.atleast_2d(np.asarray(a, dtype=float)) for a in U_train)
    U_test = tuple(np.atleast_2d(np.asarray(a, dtype=float)) for a in U_test)
    Y = np.asarray(Y, dtype=float)
    if U_train[0].shape[0] < 1:
        raise ValueError("need at least one training input")
    alpha = GramSystem(gram(kernel, U_train, U_train), Y, eps).weights()
    return gram(kernel, U_test, U_train) @ alpha


def ensemble_predict(subsets, U_test, kernel, eps: float = DEFAULT_EPS, mapper=map) -> np.ndarray:
    """Average of :func:`fit_predict` over ``subsets`` of ``(U_train, Y)``."""
    subsets = list(subsets)
    if not subsets:
        raise ValueError("need at least one subset")
    preds = list(mapper(lambda s: fit_predict(s[0], s[1], U_test, kernel, eps), subsets))
    return np.mean(preds, axis=0)


def mse(pred, y) -> float:
    return float(np.mean((np.asarray(pred) - np.asarray(y)) ** 2))
