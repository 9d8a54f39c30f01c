import itertools
import math

import numpy as np
import pytest

from hyperkernel.correlation import (KINK_TOL, MultiIndex, PathFactors, contract_oracle, corr_term, fit_loglog_slope,
                                     frozen_taylor, higher_derivative_oracle, hyper_order_oracle, hyper_order_term,
                                     sample_K, sample_T, scaling_probe_T)
from hyperkernel.errors import InvalidIndex, KinkProximity, TooLarge, UnsupportedShape
from hyperkernel.hypernet import HypernetWeights, empirical_kernels, grad_hypernet, init_hypernet, init_mlp, jacobian_mlp
from hyperkernel.kernels import HyperKernelConfig
from hyperkernel.linalg import rng


def _oracle_T(w, x0, xs, idx, d):
    D = higher_derivative_oracle(w, x0, idx.layers)
    grads = [jacobian_mlp(w, xs[i], dj)[l - 1] for l, i, dj in zip(idx.layers, idx.examples, idx.outputs)]
    return float(contract_oracle(D, grads)[d])


def _clear_of_kinks(w, gen, n0):
    while True:
        x = gen.standard_normal(n0)
        if PathFactors(w, x).min_abs_preactivation() > KINK_TOL:
            return x


def test_multi_index_validation():
    MultiIndex((1, 3), (0, 1), (0, 0))
    with pytest.raises(InvalidIndex):
        MultiIndex((2, 2), (0, 0), (0, 0))
    with pytest.raises(InvalidIndex):
        MultiIndex((3, 1), (0, 0), (0, 0))
    with pytest.raises(InvalidIndex):
        MultiIndex((1,), (0, 1), (0,))


def test_first_order_is_gradient_inner_product():
    w = init_mlp((3, 6, 5, 2), seed=1)
    gen = rng(1)
    x0, x1 = gen.standard_normal(3), gen.standard_normal(3)
    for l in (1, 2, 3):
        for d, e in ((0, 0), (0, 1), (1, 1)):
            t = corr_term(w, x0, [x1], MultiIndex((l,), (0,), (e,)), output=d)
            ref = np.sum(jacobian_mlp(w, x0, d)[l - 1] * jacobian_mlp(w, x1, e)[l - 1])
            assert t == pytest.approx(ref, rel=1e-12, abs=1e-14)


def test_repeated_layer_is_zero():
    w = init_mlp((3, 6, 5, 1), seed=2)
    x = rng(2).standard_normal(3)
    assert corr_term(w, x, [x, x], MultiIndex.raw((2, 2), (0, 1), (0, 0))) == 0.0
    D = higher_derivative_oracle(w, x, (1, 1), cap=200)
    assert not np.any(D)


def test_oracle_first_order_matches_jacobian():
    w = init_mlp((3, 5, 4, 2), seed=3)
    x = _clear_of_kinks(w, rng(3), 3)
    for l in (1, 2, 3):
        D = higher_derivative_oracle(w, x, (l,))
        for d in range(2):
            assert np.allclose(D[d], jacobian_mlp(w, x, d)[l - 1].ravel(), rtol=1e-13, atol=1e-15)


def test_corr_term_matches_dense_oracle():
    # 100 random cases on width 4..8 depth-3 nets, orders 2 and 3
    checked = 0
    for case in range(100):
        gen = rng(40, case)
        width = int(gen.integers(4, 9))
        k = 2 if case % 2 == 0 else 3
        if k == 3:
            width = min(width, 5)  # keeps the selected-parameter count under the oracle cap
        w = init_mlp((3, width, width, 2), seed=40, stream=case)
        x0 = _clear_of_kinks(w, gen, 3)
        xs = [gen.standard_normal(3) for _ in range(k)]
        layers = sorted(gen.choice([1, 2, 3], size=k, replace=False).tolist())
        idx = MultiIndex(layers, gen.integers(0, k, size=k), gen.integers(0, 2, size=k))
        d = int(gen.integers(2))
        t = corr_term(w, x0, xs, idx, output=d)
        ref = _oracle_T(w, x0, xs, idx, d)
        assert abs(t - ref) <= 1e-8 * max(abs(ref), 1e-12), (case, t, ref)
        checked += 1
    assert checked == 100


def test_permutation_symmetry():
    w = init_mlp((3, 6, 6, 2), seed=5)
    gen = rng(5)
    x0 = gen.standard_normal(3)
    xs = [gen.standard_normal(3) for _ in range(3)]
    base = (1, 2, 3), (2, 0, 1), (1, 0, 1)
    t0 = corr_term(w, x0, xs, MultiIndex(*base))
    for perm in itertools.permutations(range(3)):
        idx = MultiIndex.raw(*(tuple(part[p] for p in perm) for part in base))
        assert corr_term(w, x0, xs, idx) == pytest.approx(t0, rel=1e-10)


def test_oracle_guards():
    w = init_mlp((3, 14, 14, 1), seed=6)  # 42 + 196 selected parameters
    with pytest.raises(TooLarge):
        higher_derivative_oracle(w, np.ones(3), (1, 2))
    with pytest.raises(KinkProximity):
        higher_derivative_oracle(init_mlp((3, 4, 4, 1), seed=6), np.zeros(3), (1, 2))
    with pytest.raises(InvalidIndex):
        higher_derivative_oracle(init_mlp((3, 4, 4, 1), seed=6), np.ones(3), (0,))
    with pytest.raises(InvalidIndex):
        corr_term(init_mlp((3, 4, 1), seed=6), np.ones(3), [np.ones(3)], MultiIndex((1,), (0,), (0,)), output=1)


def _scalar_hypernet(H, width, seed, L=3, n0=4):
    return HypernetWeights(init_mlp((n0,) + (width,) * (L - 1) + (H,), seed), (1,) * (H + 1))


def _pair(seed, n0=4):
    gen = rng(seed, 9)
    return ((gen.standard_normal(n0), np.array([gen.uniform(0.5, 1.5)])),
            (gen.standard_normal(n0), np.array([gen.uniform(0.5, 1.5)])))


def test_order_one_is_the_tangent_kernel():
    for H in (1, 2, 3):
        hw = _scalar_hypernet(H, 16, seed=H)
        ui, uj = _pair(H)
        k1 = hyper_order_term(hw, ui, uj, 1)
        assert k1 == pytest.approx(empirical_kernels(hw, ui, uj).k_h, rel=1e-8, abs=1e-14)


def test_order_term_single_layer_primary():
    hw = _scalar_hypernet(1, 6, seed=7)
    ui, uj = _pair(7)
    zi, zj = ui[1][0], uj[1][0]
    for r in (2, 3):
        total = 0.0
        for layers in itertools.combinations(range(1, 4), r):
            total += corr_term(hw.meta, ui[0], [uj[0]], MultiIndex(layers, (0,) * r, (0,) * r))
        assert hyper_order_term(hw, ui, uj, r) == pytest.approx(zi * zj ** r * math.factorial(r) * total,
                                                                 rel=1e-10, abs=1e-14)


@pytest.mark.parametrize("H", [1, 2, 3])
@pytest.mark.parametrize("r", [1, 2, 3, 4])
def test_order_term_matches_frozen_taylor(H, r):
    for seed in range(3):
        hw = _scalar_hypernet(H, 6, seed=100 + seed, L=4)
        ui, uj = _pair(100 + seed)
        k = hyper_order_term(hw, ui, uj, r)
        ref = hyper_order_oracle(hw, ui, uj, r)
        assert abs(k - ref) <= 1e-8 * max(abs(ref), 1e-10)


def test_frozen_taylor_constant_term_is_output():
    hw = _scalar_hypernet(2, 8, seed=11)
    ui, uj = _pair(11)
    coef = frozen_taylor(hw, ui, grad_hypernet(hw, uj))
    from hyperkernel.hypernet import forward_hypernet
    assert coef[0] == pytest.approx(forward_hypernet(hw, ui).output, rel=1e-13)


def test_order_term_preconditions():
    hw = init_hypernet(HyperKernelConfig(L=2, H=2, n0=3, m0=1), 5, 3, seed=0)
    u = (np.ones(3), np.ones(1))
    with pytest.raises(UnsupportedShape):
        hyper_order_term(hw, u, u, 2)
    hw1 = _scalar_hypernet(2, 5, seed=0, n0=3)
    with pytest.raises(UnsupportedShape):
        hyper_order_term(hw1, u, u, 5)
    with pytest.raises(UnsupportedShape):
        hyper_order_term(_scalar_hypernet(4, 5, seed=0, n0=3), u, u, 2)


def test_fit_recovers_power_law():
    n = np.array([64, 128, 256, 512])
    fit = fit_loglog_slope(n, 3.0 * n ** -1.5)
    assert fit.slope == pytest.approx(-1.5, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    noisy = fit_loglog_slope(n, 3.0 * n ** -1.5 * np.array([1.1, 0.9, 1.05, 0.95]))
    assert noisy.ci_low < noisy.slope < noisy.ci_high


def test_samplers_deterministic():
    assert sample_T(2, 16, seed=3) == sample_T(2, 16, seed=3)
    assert sample_K(2, 2, 16, seed=3) == sample_K(2, 2, 16, seed=3)
    with pytest.raises(InvalidIndex):
        sample_T(4, 16, seed=0, L=3)


def test_probe_requires_wide_grid():
    with pytest.raises(ValueError):
        scaling_probe_T(1, widths=(64, 128, 256), seeds=2)


def test_mismatched_outputs_decay_faster():
    matched = scaling_probe_T(2, n_out=2, outputs="matched", seeds=200)
    mixed = scaling_probe_T(2, n_out=2, outputs="mismatched", seeds=200)
    assert mixed.fit.slope < matched.fit.slope - 0.2
