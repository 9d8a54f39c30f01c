"""Finite-width experiments: kernel convergence, one-step drift, large learning rates.

``collapsed_kernel_block`` draws the empirical hyperkernel of a finite
hypernetwork without storing the meta read-out matrix ``W^L``. Only
``W^L q(x)`` and ``W^L^T delta`` ever enter the kernel, and by rotation
invariance of the Gaussian rows of ``W^L`` these can be sampled exactly:
the projection onto ``span{q(x), q(x')}`` is drawn explicitly and the
orthogonal part of ``W^L^T Delta`` is a Gaussian with covariance
``Delta^T Delta``. The kernel values have the same joint law as those of the
dense network in :mod:`hyperkernel.hypernet` at a fraction of the cost when
the primary network is wide.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteLoss
from .hypernet import (SQRT2, HypernetWeights, _backward_columns, _forward_columns, _meta_delta, init_hypernet,
                       init_mlp, primary_forward, primary_grad_v, primary_param_count, sgd_step, sgd_train,
                       split_primary, dataset_loss, forward_hypernet)
from .kernels import HyperKernelConfig, hyper_ntk
from .linalg import rng


@contextmanager
def parallel_map(threads: int = 1):
    """Yield a ``map``-like callable backed by ``threads`` workers.

    Every job derives its randomness from its own arguments, so results do
    not depend on the thread count or the schedule.
    """
    if threads <= 1:
        yield map
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield lambda fn, items: list(pool.map(fn, items))


def _sqrt_psd(G: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (G + G.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def collapsed_kernel_block(cfg: HyperKernelConfig, width_f: int, width_g: int, x, x_prime, zs, zs_prime,
                           seed: int, stream=()) -> np.ndarray:
    """Empirical ``K^h((x, zs[a]), (x', zs_prime[b]))`` for one random finite hypernet."""
    if cfg.L < 2:
        raise ValueError("collapsed sampling needs a meta network with a hidden layer")
    stream = tuple(stream) if isinstance(stream, (tuple, list)) else (stream,)
    pdims = (cfg.m0,) + (width_g,) * (cfg.H - 1) + (1,)
    n_v = primary_param_count(pdims)
    hidden = init_mlp((cfg.n0,) + (width_f,) * (cfg.L - 1), seed, stream)
    gen = rng(seed, *stream, 0xC0)
    X = np.column_stack([np.ravel(x), np.ravel(x_prime)]).astype(float)
    tr = _forward_columns(hidden.layers, X)
    n = width_f
    # last hidden activations of x and x'
    qL = SQRT2 * np.maximum(tr.y[-1], 0.0)
    Q, R = np.linalg.qr(qL)
    keep = np.abs(np.diag(R)) > 1e-12 * max(np.abs(R).max(), 1e-300)
    Q = Q[:, keep]
    coords = Q.T @ qL  # (r, 2)
    A = gen.standard_normal((n_v, Q.shape[1]))
    v = (A @ coords / np.sqrt(n)).T  # (2, n_v)
    Za = np.atleast_2d(np.asarray(zs, dtype=float))
    Zb = np.atleast_2d(np.asarray(zs_prime, dtype=float))
    na, nb = Za.shape[0], Zb.shape[0]
    V = split_primary(np.concatenate([np.repeat(v[:1], na, 0), np.repeat(v[1:], nb, 0)]), pdims)
    g, a, Zp = primary_forward(V, np.vstack([Za, Zb]))
    D = primary_grad_v(V, a, Zp).T  # (n_v, na + nb)
    K = float(qL[:, 0] @ qL[:, 1]) / n * (D[:, :na].T @ D[:, na:])
    G = gen.standard_normal((n, na + nb)) @ _sqrt_psd(D.T @ D)
    G -= Q @ (Q.T @ G)
    back = Q @ (A.T @ D) + G  # W^L^T Delta
    # hidden layers keep their dense weights
    cols = np.r_[np.zeros(na, dtype=int), np.ones(nb, dtype=int)]
    Lh = len(hidden.layers)
    delta = SQRT2 * tr.Z[Lh][:, cols] * back / np.sqrt(n)
    for l in range(Lh, 0, -1):
        q_prev = tr.q[l - 1]
        qq = float(q_prev[:, 0] @ q_prev[:, 1]) / q_prev.shape[0]
        K += qq * (delta[:, :na].T @ delta[:, na:])
        if l > 1:
            W = hidden.layers[l - 1]
            delta = SQRT2 * tr.Z[l - 1][:, cols] * (W.T @ delta) / np.sqrt(W.shape[1])
    return K


def kernel_value(hw: HypernetWeights, u, u_prime) -> float:
    """Dense empirical ``K^h(u, u')`` (gradient dot product, computed layer-wise)."""
    t1 = forward_hypernet(hw, u)
    t2 = forward_hypernet(hw, u_prime)
    D1 = _meta_delta(hw, t1, primary_grad_v(t1.V, t1.a, t1.Z))
    D2 = _meta_delta(hw, t2, primary_grad_v(t2.V, t2.a, t2.Z))
    k = 0.0
    for l, W in enumerate(hw.meta.layers, start=1):
        k += float(t1.meta.q[l - 1][:, 0] @ t2.meta.q[l - 1][:, 0]) / W.shape[1] * float(D1[l][:, 0] @ D2[l][:, 0])
    return k


# -- Fig. 1 style convergence ------------------------------------------------

CONVERGE_HEADER = ("width_f", "width_g", "theta", "mean_k", "var_k", "n_seeds")


def theta_grid(count: int = 9) -> np.ndarray:
    return np.linspace(-np.pi / 2, np.pi / 2, count)


@dataclass
class ConvergeResult:
    rows: list  # CONVERGE_HEADER tuples
    limit: list  # (theta, theta_h)
    samples: dict  # (width_f, width_g) -> array (seeds, thetas)


def converge_experiment(widths_f=(32, 128, 512), widths_g=(32, 128, 512), seeds: int = 200, thetas=None,
                        L: int = 4, H: int = 4, x=None, root: int = 0, mapper=map) -> ConvergeResult:
    """Mean and variance over seeds of ``K^h((x, z), (x, z'(theta)))``.

    ``z = (1, 0)``, ``z'(theta) = (cos theta, sin theta)``; ``x`` defaults to
    ``(1, -1)/sqrt(2)``. Seeds are paired across thetas (one network per seed).
    """
    thetas = theta_grid() if thetas is None else np.asarray(thetas, dtype=float)
    x = np.array([1.0, -1.0]) / np.sqrt(2.0) if x is None else np.asarray(x, dtype=float)
    cfg = HyperKernelConfig(L=L, H=H, n0=x.size, m0=2)
    z = np.array([[1.0, 0.0]])
    zp = np.column_stack([np.cos(thetas), np.sin(thetas)])
    rows, samples = [], {}
    for nf in widths_f:
        for ng in widths_g:
            def one(s, nf=nf, ng=ng):
                return collapsed_kernel_block(cfg, nf, ng, x, x, z, zp, root, stream=(0xF1, nf, ng, s))[0]
            K = np.array(list(mapper(one, range(seeds))))
            samples[(nf, ng)] = K
            for t, col in zip(thetas, K.T):
                rows.append((nf, ng, float(t), float(col.mean()), float(col.var(ddof=1)), seeds))
    limit = [(float(t), hyper_ntk((x, z[0]), (x, p), cfg).theta_h) for t, p in zip(thetas, zp)]
    return ConvergeResult(rows, limit, samples)


# -- one-step kernel drift ---------------------------------------------------


def drift_dataset(cfg: HyperKernelConfig, n_train: int = 16, n_probe: int = 4, seed: int = 0):
    """Small regression set plus held-out probe inputs for the drift experiment."""
    gen = rng(seed, 0xD1)

    def inputs(count):
        X = gen.standard_normal((count, cfg.n0))
        X *= np.sqrt(cfg.n0) / np.linalg.norm(X, axis=1, keepdims=True)
        Z = np.abs(gen.standard_normal((count, cfg.m0)))
        Z *= np.sqrt(cfg.m0) / np.linalg.norm(Z, axis=1, keepdims=True)
        return X, Z

    X, Z = inputs(n_train)
    y = np.sin(X[:, 0] + Z[:, 0])
    return (X, Z, y), inputs(n_probe)


def probe_gram(hw: HypernetWeights, probes) -> np.ndarray:
    """Dense empirical ``K^h`` Gram matrix on the probe inputs."""
    tr = forward_hypernet(hw, probes)
    D = _meta_delta(hw, tr, primary_grad_v(tr.V, tr.a, tr.Z))
    K = 0.0
    for l, W in enumerate(hw.meta.layers, start=1):
        K = K + (tr.meta.q[l - 1].T @ tr.meta.q[l - 1]) / W.shape[1] * (D[l].T @ D[l])
    return K


def kernel_drift(hw: HypernetWeights, data, probes, mu: float) -> float:
    """Relative Frobenius change of the probe Gram after one full-batch gradient step."""
    before = probe_gram(hw, probes)
    if mu == 0:
        return 0.0
    model = hw.copy()
    sgd_step(model, data, np.arange(data[-1].shape[0]), mu, p=2)
    return float(np.linalg.norm(probe_gram(model, probes) - before) / np.linalg.norm(before))


def kernel_drift_experiment(widths=(32, 64, 128, 256), seeds: int = 20, mu: float = 1.0, L: int = 3, H: int = 2,
                            n0: int = 4, m0: int = 2, n_train: int = 16, n_probe: int = 4, root: int = 0,
                            mapper=map):
    """Rows ``(width, seed, rel_change)``; meta and primary widths both equal ``width``."""
    cfg = HyperKernelConfig(L=L, H=H, n0=n0, m0=m0)
    data, probes = drift_dataset(cfg, n_train, n_probe, root)
    jobs = [(n, s) for n in widths for s in range(seeds)]

    def one(job):
        n, s = job
        hw = init_hypernet(cfg, n, n, root, stream=(0xD2, n, s))
        return kernel_drift(hw, data, probes, mu)

    return [(n, s, v) for (n, s), v in zip(jobs, mapper(one, jobs))]


def median_by_width(rows):
    widths = sorted({r[0] for r in rows})
    return [(n, float(np.median([r[-1] for r in rows if r[0] == n]))) for n in widths]


# -- large learning rate -----------------------------------------------------


def large_lr_experiment(data_train, data_test, widths=(100, 1000, 10000), seeds: int = 5, epochs: int = 1,
                        batch: int = 1, p: int = 2, mu=None, L: int = 2, root: int = 0, mapper=map):
    """Train depth-``L`` MLPs with learning rate ``sqrt(width)`` (or a fixed ``mu``).

    ``data_*`` are ``(X, y)``. Divergence is recorded as a non-finite run
    rather than raised. Rows: ``(width, seed, mu, final_train_loss, test_loss, finite)``.
    """
    n0 = data_train[0].shape[1]
    jobs = [(n, s) for n in widths for s in range(seeds)]

    def one(job):
        n, s = job
        lr = float(np.sqrt(n)) if mu is None else float(mu)
        model = init_mlp((n0,) + (n,) * (L - 1) + (1,), root, stream=(0x11, n, s))
        try:
            res = sgd_train(model, data_train, lr, epochs, batch, p, seed=root * 1_000_003 + n * 101 + s)
        except NonFiniteLoss:
            return (n, s, lr, float("inf"), float("inf"), False)
        test = dataset_loss(res.model, data_test, p)
        return (n, s, lr, res.losses[-1], test, bool(np.isfinite(test)))

    return list(mapper(one, jobs))
