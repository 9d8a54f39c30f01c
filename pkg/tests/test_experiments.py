import numpy as np
import pytest

from hyperkernel.experiments import (collapsed_kernel_block, converge_experiment, drift_dataset, kernel_drift,
                                     kernel_drift_experiment, kernel_value, large_lr_experiment, median_by_width,
                                     parallel_map, probe_gram, theta_grid)
from hyperkernel.hypernet import empirical_kernels, init_hypernet
from hyperkernel.kernels import HyperKernelConfig, hyper_ntk
from hyperkernel.linalg import rng


def test_kernel_value_matches_empirical_kernels():
    cfg = HyperKernelConfig(L=3, H=2, n0=3, m0=2)
    hw = init_hypernet(cfg, 10, 5, seed=1)
    u, up = (np.array([1.0, 0.2, -0.3]), np.array([0.5, 1.0])), (np.array([0.1, 1.0, 0.4]), np.array([1.0, -0.2]))
    assert kernel_value(hw, u, up) == pytest.approx(empirical_kernels(hw, u, up).k_h, rel=1e-12)


def test_collapsed_sampler_matches_dense_in_distribution():
    # the collapsed read-out draws the same joint law as a dense network
    cfg = HyperKernelConfig(L=3, H=3, n0=2, m0=2)
    x, xp = np.array([1.0, -1.0]) / np.sqrt(2), np.array([0.6, 0.8])
    z, zp = np.array([1.0, 0.0]), np.array([0.3, 0.9])
    N = 3000
    c = np.array([collapsed_kernel_block(cfg, 12, 6, x, xp, z, zp, 0, stream=(s,))[0, 0] for s in range(N)])
    d = np.array([kernel_value(init_hypernet(cfg, 12, 6, 1, stream=(s,)), (x, z), (xp, zp)) for s in range(N)])
    se = np.sqrt(c.var() / N + d.var() / N)
    assert abs(c.mean() - d.mean()) < 4 * se
    assert 0.8 < c.var() / d.var() < 1.25
    assert np.allclose(np.percentile(c, [25, 50, 75]), np.percentile(d, [25, 50, 75]), atol=0.01)


def test_collapsed_block_shape_and_same_x():
    cfg = HyperKernelConfig(L=2, H=2, n0=2, m0=2)
    x = np.array([1.0, -1.0])
    zs = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
    K = collapsed_kernel_block(cfg, 16, 8, x, x, zs, zs, seed=3)
    assert K.shape == (3, 3)
    # same x: a Gram matrix of one network, up to sqrt(eps) noise from the rank-deficient PSD root
    assert np.allclose(K, K.T, rtol=1e-7, atol=1e-8)
    assert np.linalg.eigvalsh(K).min() > -1e-10 * np.trace(K)


def test_collapsed_needs_hidden_layer():
    with pytest.raises(ValueError):
        collapsed_kernel_block(HyperKernelConfig(1, 2, 2, 2), 8, 8, np.ones(2), np.ones(2), np.ones(2), np.ones(2), 0)


def test_converge_rows_and_determinism():
    res = converge_experiment((8, 16), (8,), seeds=5, thetas=theta_grid(3), L=3, H=2)
    again = converge_experiment((8, 16), (8,), seeds=5, thetas=theta_grid(3), L=3, H=2)
    assert res.rows == again.rows
    assert len(res.rows) == 2 * 1 * 3
    assert all(r[-1] == 5 for r in res.rows)
    cfg = HyperKernelConfig(3, 2, 2, 2)
    x = np.array([1.0, -1.0]) / np.sqrt(2)
    assert res.limit[1][1] == hyper_ntk((x, [1.0, 0.0]), (x, [1.0, 0.0]), cfg).theta_h


def test_converge_threads_do_not_change_results():
    kw = dict(widths_f=(8,), widths_g=(8,), seeds=6, thetas=theta_grid(3), L=3, H=2)
    with parallel_map(3) as pmap:
        a = converge_experiment(mapper=pmap, **kw)
    assert a.rows == converge_experiment(**kw).rows


def test_drift_zero_rate():
    cfg = HyperKernelConfig(3, 2, 4, 2)
    data, probes = drift_dataset(cfg)
    hw = init_hypernet(cfg, 16, 16, seed=0)
    assert kernel_drift(hw, data, probes, 0.0) == 0.0


def test_probe_gram_entries():
    cfg = HyperKernelConfig(3, 2, 4, 2)
    _, (X, Z) = drift_dataset(cfg)
    hw = init_hypernet(cfg, 8, 8, seed=2)
    G = probe_gram(hw, (X, Z))
    assert G[1, 2] == pytest.approx(kernel_value(hw, (X[1], Z[1]), (X[2], Z[2])), rel=1e-12)


def test_drift_smaller_when_wide():
    rows = kernel_drift_experiment(widths=(32, 512), seeds=5)
    med = dict(median_by_width(rows))
    assert med[512] < med[32]


def test_large_lr_records_divergence():
    gen = rng(0)
    X = gen.uniform(0, 1, (40, 6))
    y = X.mean(axis=1)
    rows = large_lr_experiment((X[:30], y[:30]), (X[30:], y[30:]), widths=(1000,), seeds=1, p=2, mu=1e8)
    assert rows[0][-1] is False and np.isinf(rows[0][4])


def test_large_lr_zero_rate_keeps_initial_loss():
    gen = rng(1)
    X = gen.uniform(0, 1, (20, 4))
    y = X.sum(axis=1)
    rows = large_lr_experiment((X, y), (X, y), widths=(16,), seeds=1, mu=0.0)
    assert rows[0][3] == pytest.approx(rows[0][4], rel=1e-12)  # train and test sets coincide
