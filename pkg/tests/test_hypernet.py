import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperkernel.errors import DimensionMismatch, NonFiniteLoss
from hyperkernel.hypernet import (HypernetWeights, MlpWeights, empirical_kernels, forward_hypernet, forward_mlp,
                                  grad_hypernet, init_hypernet, init_mlp, jacobian_mlp, mlp_grad, primary_forward,
                                  primary_param_count, sgd_train, split_primary)
from hyperkernel.kernels import HyperKernelConfig
from hyperkernel.linalg import rng

# central differences move pre-activations by about the step size, so inputs are
# redrawn until every pre-activation clears this margin
FD_STEP = 1e-5
FD_MARGIN = 1e-3


def _min_abs_pre(trace):
    return min(np.abs(y).min() for y in trace.y[1:-1]) if len(trace.y) > 2 else np.inf


def _central_diff(fn, flat):
    g = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = FD_STEP
        g[i] = (fn(flat + e) - fn(flat - e)) / (2 * FD_STEP)
    return g


def _rel_err(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


def test_init_deterministic_and_shapes():
    a = init_mlp((3, 5, 2), seed=4)
    b = init_mlp((3, 5, 2), seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a.layers, b.layers))
    assert [W.shape for W in a.layers] == [(5, 3), (2, 5)]
    assert a.widths == [3, 5, 2]


def test_init_entry_variance():
    w = init_mlp((100, 128, 128, 1), seed=0)
    W = w.layers[1]
    assert W.size >= 10_000
    assert abs(W.var() - 1) < 0.05


def test_hypernet_shape_audit():
    cfg = HyperKernelConfig(L=3, H=3, n0=4, m0=2)
    hw = init_hypernet(cfg, 7, 5, seed=0)
    assert hw.primary_dims == (2, 5, 5, 1)
    assert hw.meta.widths[-1] == 2 * 5 + 5 * 5 + 5 == primary_param_count(hw.primary_dims)
    assert hw.config == cfg
    with pytest.raises(DimensionMismatch):
        HypernetWeights(init_mlp((4, 7, 10), 0), (2, 5, 1))
    with pytest.raises(DimensionMismatch):
        MlpWeights([np.ones((3, 2)), np.ones((2, 4))])


def test_forward_zero_input():
    w = init_mlp((3, 6, 6, 2), seed=1)
    tr = forward_mlp(w, np.zeros(3))
    assert np.all(tr.output == 0)
    assert all(np.all(q == 0) for q in tr.q)


def test_forward_linear_case():
    w = init_mlp((4, 3), seed=2)
    x = np.array([1.0, -2.0, 0.5, 3.0])
    assert np.array_equal(forward_mlp(w, x).output[:, 0], w.layers[0] @ x[:, None][:, 0] / 2.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_forward_homogeneity(c, seed):
    w = init_mlp((3, 5, 4, 2), seed=seed)
    x = rng(seed, 1).standard_normal(3)
    a = forward_mlp(w, c * x).output
    b = c * forward_mlp(w, x).output
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12 * np.abs(b).max())


def test_trace_invariants():
    w = init_mlp((3, 6, 6, 2), seed=3)
    tr = forward_mlp(w, rng(3).standard_normal((5, 3)))
    for l in range(1, 3):
        assert np.array_equal(tr.q[l], np.sqrt(2) * np.maximum(tr.y[l], 0))
        assert np.array_equal(tr.Z[l], (tr.y[l] > 0).astype(float))


def test_forward_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        forward_mlp(init_mlp((3, 4, 1), 0), np.ones(2))


def test_jacobian_last_layer():
    w = init_mlp((3, 6, 6, 4), seed=5)
    x = rng(5).standard_normal(3)
    tr = forward_mlp(w, x)
    J = jacobian_mlp(w, x, d=2)[-1]
    assert np.allclose(J[2], tr.q[-1][:, 0] / np.sqrt(6), rtol=0, atol=1e-15)
    assert np.all(np.delete(J, 2, axis=0) == 0)


def test_jacobian_single_layer():
    w = init_mlp((4, 1), seed=6)
    x = np.array([0.5, 1.0, -1.0, 2.0])
    assert np.allclose(jacobian_mlp(w, x, 0)[0][0], x / 2.0, rtol=0, atol=1e-15)


def test_jacobian_finite_differences():
    for case in range(20):
        gen = rng(100, case)
        w = init_mlp((3, 8, 8, 2), seed=100, stream=case)
        while True:
            x = gen.standard_normal(3)
            if _min_abs_pre(forward_mlp(w, x)) > FD_MARGIN:
                break
        d = case % 2
        analytic = mlp_grad(w, x, d)
        numeric = _central_diff(lambda f: forward_mlp(w.unflatten(f), x).output[d, 0], w.flat())
        assert _rel_err(numeric, analytic) < 1e-5


def test_jacobian_bad_output_index():
    w = init_mlp((3, 4, 2), 0)
    with pytest.raises(DimensionMismatch):
        jacobian_mlp(w, np.ones(3), 2)


def _hypernet(seed, H=2, meta=8, prim=4, n0=3, m0=2):
    return init_hypernet(HyperKernelConfig(L=3, H=H, n0=n0, m0=m0), meta, prim, seed)


def test_hypernet_single_layer_primary():
    hw = _hypernet(1, H=1)
    x, z = np.array([0.3, -0.4, 1.0]), np.array([2.0, -1.0])
    V1 = forward_mlp(hw.meta, x).output[:, 0].reshape(1, 2)
    assert forward_hypernet(hw, (x, z)).output == pytest.approx(float((V1 @ z)[0]) / np.sqrt(2), rel=1e-14)


def test_hypernet_two_step_matches_fused():
    hw = _hypernet(2, H=3)
    x, z = np.array([0.3, -0.4, 1.0]), np.array([2.0, -1.0])
    v = forward_mlp(hw.meta, x).output[:, 0]
    V = split_primary(v[None, :], hw.primary_dims)
    g, _, _ = primary_forward(V, z[None, :])
    assert g[-1][0, 0] == forward_hypernet(hw, (x, z)).output


def test_layout_layer_major_row_major():
    v = np.arange(2 * 3 + 3 * 1, dtype=float)
    V1, V2 = split_primary(v, (2, 3, 1))
    assert np.array_equal(V1, [[0, 1], [2, 3], [4, 5]])
    assert np.array_equal(V2, [[6, 7, 8]])


def test_hypernet_homogeneous_in_z():
    hw = _hypernet(3, H=3)
    x, z = np.array([0.3, -0.4, 1.0]), np.array([2.0, -1.0])
    assert forward_hypernet(hw, (x, 3.5 * z)).output == pytest.approx(3.5 * forward_hypernet(hw, (x, z)).output,
                                                                    rel=1e-12)


def test_hypernet_batch_matches_single():
    hw = _hypernet(4, H=2)
    gen = rng(4)
    X, Z = gen.standard_normal((5, 3)), gen.standard_normal((5, 2))
    batch = forward_hypernet(hw, (X, Z)).output
    single = [forward_hypernet(hw, (X[i], Z[i])).output for i in range(5)]
    assert np.allclose(batch, single, rtol=1e-13, atol=1e-15)


def test_grad_hypernet_finite_differences():
    for case in range(10):
        hw = init_hypernet(HyperKernelConfig(L=2, H=2, n0=3, m0=2), 8, 4, seed=200, stream=case)
        gen = rng(200, case)
        while True:
            u = (gen.standard_normal(3), gen.standard_normal(2))
            tr = forward_hypernet(hw, u)
            prim = min(np.abs(g).min() for g in tr.g[1:-1])
            if _min_abs_pre(tr.meta) > FD_MARGIN and prim > FD_MARGIN and np.any(grad_hypernet(hw, u) != 0):
                break

        def h(flat):
            return forward_hypernet(HypernetWeights(hw.meta.unflatten(flat), hw.primary_dims), u).output

        assert _rel_err(_central_diff(h, hw.meta.flat()), grad_hypernet(hw, u)) < 1e-5


def test_grad_hypernet_linear_primary():
    hw = _hypernet(5, H=1)
    x, z = np.array([0.3, -0.4, 1.0]), np.array([2.0, -1.0])
    rows = [mlp_grad(hw.meta, x, d) for d in range(2)]
    expected = (z[0] * rows[0] + z[1] * rows[1]) / np.sqrt(2)
    assert np.allclose(grad_hypernet(hw, (x, z)), expected, rtol=1e-12, atol=1e-14)


def test_self_kernel_is_gradient_norm():
    hw = _hypernet(6, H=3)
    u = (np.array([0.3, -0.4, 1.0]), np.array([2.0, -1.0]))
    g = grad_hypernet(hw, u)
    assert empirical_kernels(hw, u, u).k_h == pytest.approx(g @ g, rel=1e-12)


def test_empirical_kernels_dense_chain():
    # k_h = (dh/dv)^T K^f (dh/dv') with the full meta Jacobian
    hw = _hypernet(7, H=2, meta=5, prim=3)
    gen = rng(7)
    u, up = (gen.standard_normal(3), gen.standard_normal(2)), (gen.standard_normal(3), gen.standard_normal(2))
    nL = hw.meta.widths[-1]
    J1 = np.stack([mlp_grad(hw.meta, u[0], d) for d in range(nL)])
    J2 = np.stack([mlp_grad(hw.meta, up[0], d) for d in range(nL)])
    Kf = J1 @ J2.T
    t1, t2 = forward_hypernet(hw, u), forward_hypernet(hw, up)
    from hyperkernel.hypernet import primary_grad_v
    dv1 = primary_grad_v(t1.V, t1.a, t1.Z)[0]
    dv2 = primary_grad_v(t2.V, t2.a, t2.Z)[0]
    ek = empirical_kernels(hw, u, up, probes=nL)
    assert abs(ek.k_h - dv1 @ Kf @ dv2) <= 1e-10 * max(1.0, abs(ek.k_h))
    assert ek.k_g == pytest.approx(dv1 @ dv2, rel=1e-13)
    assert ek.k_f_diag_mean == pytest.approx(np.diag(Kf).mean(), rel=1e-12)


def test_empirical_kernel_symmetry_and_sign():
    hw = _hypernet(8, H=3)
    gen = rng(8)
    for _ in range(5):
        u, up = (gen.standard_normal(3), gen.standard_normal(2)), (gen.standard_normal(3), gen.standard_normal(2))
        a, b = empirical_kernels(hw, u, up), empirical_kernels(hw, up, u)
        assert abs(a.k_h - b.k_h) <= 1e-12 * max(1, abs(a.k_h))
        assert abs(a.k_g - b.k_g) <= 1e-12 * max(1, abs(a.k_g))
        s = empirical_kernels(hw, u, u)
        assert s.k_h >= 0 and s.k_g >= 0


def test_empirical_gram_psd():
    hw = _hypernet(9, H=2)
    gen = rng(9)
    G = np.stack([grad_hypernet(hw, (gen.standard_normal(3), gen.standard_normal(2))) for _ in range(10)])
    K = G @ G.T
    assert np.linalg.eigvalsh(K).min() >= -1e-8 * np.trace(K) / 10


def test_meta_kernel_near_diagonal_when_wide():
    cfg = HyperKernelConfig(L=2, H=2, n0=3, m0=2)
    hw = init_hypernet(cfg, 2048, 3, seed=10)
    u = (np.array([1.0, 0.5, -0.5]), np.array([1.0, 0.0]))
    up = (np.array([0.2, 1.0, 0.3]), np.array([0.0, 1.0]))
    ek = empirical_kernels(hw, u, up, probes=hw.meta.widths[-1])
    assert ek.k_f_offdiag_rms / ek.k_f_diag_mean < 0.1


def test_sgd_zero_rate_keeps_weights():
    hw = _hypernet(11)
    gen = rng(11)
    data = (gen.standard_normal((6, 3)), gen.standard_normal((6, 2)), gen.standard_normal(6))
    res = sgd_train(hw, data, 0.0, epochs=2, batch=2)
    assert all(np.array_equal(a, b) for a, b in zip(res.model.meta.layers, hw.meta.layers))


def test_sgd_overfits_single_sample():
    w = init_mlp((4, 64, 64, 1), seed=12)
    data = (np.array([[0.5, -1.0, 0.3, 0.8]]), np.array([0.7]))
    res = sgd_train(w, data, 0.1, epochs=500, batch=1, p=2)
    assert res.steps <= 500
    assert min(res.losses) < 1e-3


def test_sgd_hypernet_overfits_single_sample():
    hw = init_hypernet(HyperKernelConfig(L=2, H=2, n0=3, m0=2), 64, 64, seed=13)
    data = (np.array([[0.5, -1.0, 0.3]]), np.array([[1.0, 0.5]]), np.array([0.7]))
    res = sgd_train(hw, data, 0.1, epochs=500, batch=1, p=2)
    assert min(res.losses) < 1e-3


def test_sgd_moving_average_decreases():
    gen = rng(14)
    X = gen.standard_normal((50, 4))
    data = (X, np.sin(X[:, 0]))
    res = sgd_train(init_mlp((4, 64, 64, 1), seed=14), data, 0.1, epochs=60, batch=50)
    # minibatches are drawn with replacement, so compare successive 10-step windows
    blocks = np.asarray(res.step_losses).reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)


def test_sgd_l1_loss_runs():
    gen = rng(15)
    X = gen.standard_normal((20, 3))
    res = sgd_train(init_mlp((3, 32, 1), seed=15), (X, X[:, 0]), 0.05, epochs=20, batch=5, p=1)
    assert res.losses[-1] < res.losses[0]


def test_sgd_divergence_raises():
    gen = rng(16)
    X = gen.standard_normal((20, 3))
    with pytest.raises(NonFiniteLoss):
        sgd_train(init_mlp((3, 32, 1), seed=16), (X, X[:, 0]), 1e6, epochs=50, batch=5)


def test_sgd_argument_checks():
    w = init_mlp((3, 4, 1), 0)
    data = (np.ones((2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        sgd_train(w, data, 0.1, 1, p=3)
    with pytest.raises(ValueError):
        sgd_train(w, data, -0.1, 1)
