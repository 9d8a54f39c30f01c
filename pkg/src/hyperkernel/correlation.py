"""Higher-order correlation terms of ReLU MLPs and hypernetworks.

``corr_term`` evaluates

    T = < d^k f^d(x0) / dW^{l1}..dW^{lk},  (x)_t d f^{d_t}(x_{i_t}) / dW^{l_t} >

as a product of inner products of activations and backward path products,
never forming the rank-(2k-1) derivative tensor. Two oracles check it: a dense
derivative tensor built with the activation pattern frozen, and (for
hypernetworks) an exact polynomial expansion of ``h(w + t v)`` in ``t``.

Layer indices are 1-based like the layer equations; example and output
indices are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations, product

import numpy as np
from scipy import stats

from .errors import DimensionMismatch, InvalidIndex, KinkProximity, TooLarge, UnsupportedShape
from .hypernet import (SQRT2, HypernetWeights, MlpWeights, _forward_columns, forward_hypernet, grad_hypernet,
                       init_mlp, primary_grad_v, split_primary)
from .linalg import rng

KINK_TOL = 1e-6


@dataclass(frozen=True)
class MultiIndex:
    layers: tuple[int, ...]
    examples: tuple[int, ...]
    outputs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))
        object.__setattr__(self, "examples", tuple(int(i) for i in self.examples))
        object.__setattr__(self, "outputs", tuple(int(i) for i in self.outputs))
        if not (len(self.layers) == len(self.examples) == len(self.outputs)):
            raise InvalidIndex("layers, examples and outputs must have equal length")
        if any(b <= a for a, b in zip(self.layers, self.layers[1:])):
            raise InvalidIndex(f"layers must be strictly increasing, got {self.layers}")

    @classmethod
    def raw(cls, layers, examples, outputs) -> "MultiIndex":
        """Build without the ordering check (repeated or unsorted layers)."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "layers", tuple(int(i) for i in layers))
        object.__setattr__(obj, "examples", tuple(int(i) for i in examples))
        object.__setattr__(obj, "outputs", tuple(int(i) for i in outputs))
        return obj

    @property
    def k(self) -> int:
        return len(self.layers)


class PathFactors:
    """Forward records and backward path products of one input.

    ``P(u, v)`` is ``prod_{l=u}^{v-1} sqrt(2/n_l) W^{l+1} Z^l`` (later layers on
    the left), i.e. ``d y^v / d y^u``.
    """

    def __init__(self, w: MlpWeights, x):
        x = np.asarray(x, dtype=float).ravel()
        if x.size != w.widths[0]:
            raise DimensionMismatch(f"input dim {x.size} != {w.widths[0]}")
        self.w = w
        self.widths = w.widths
        self.L = w.depth
        tr = _forward_columns(w.layers, x[:, None])
        self.y = [None] + [tr.y[l][:, 0] for l in range(1, self.L + 1)]
        self.q = [tr.q[l][:, 0] for l in range(self.L)]
        self.z = [None] + [tr.Z[l][:, 0] for l in range(1, self.L + 1)]
        self._P = {}

    def P(self, u: int, v: int) -> np.ndarray:
        if (u, v) not in self._P:
            if u == v:
                M = np.eye(self.widths[u])
            else:
                W = self.w.layers[v - 1]
                M = (np.sqrt(2.0 / self.widths[v - 1]) * W * self.z[v - 1][None, :]) @ self.P(u, v - 1)
            self._P[(u, v)] = M
        return self._P[(u, v)]

    def C_out(self, l: int, d: int) -> np.ndarray:
        """``d f^d / d y^l`` as a vector of length ``n_l``."""
        return self.P(l, self.L)[d]

    def C_act(self, l: int, m: int) -> np.ndarray:
        """``d q^{m} / d y^l = sqrt(2) Z^m P(l, m)`` for ``l <= m < L``."""
        return SQRT2 * self.z[m][:, None] * self.P(l, m)

    def min_abs_preactivation(self) -> float:
        return min(float(np.min(np.abs(self.y[l]))) for l in range(1, self.L))  if self.L > 1 else np.inf


def _normalise_index(idx: MultiIndex, L: int, n_examples: int, n_out: int):
    if any(not 1 <= l <= L for l in idx.layers):
        raise InvalidIndex(f"layer index out of range 1..{L}: {idx.layers}")
    if any(not 0 <= i < n_examples for i in idx.examples):
        raise InvalidIndex(f"example index out of range: {idx.examples}")
    if any(not 0 <= d < n_out for d in idx.outputs):
        raise InvalidIndex(f"output index out of range: {idx.outputs}")
    order = sorted(range(idx.k), key=lambda t: idx.layers[t])
    layers = [idx.layers[t] for t in order]
    if len(set(layers)) < len(layers):
        return None
    return layers, [idx.examples[t] for t in order], [idx.outputs[t] for t in order]


def _corr_from_factors(F0: PathFactors, Fs: list, idx: MultiIndex, d: int) -> float:
    norm = _normalise_index(idx, F0.L, len(Fs), F0.widths[-1])
    if norm is None:
        return 0.0
    layers, ex, outs = norm
    k = len(layers)
    if k == 0:
        return float(F0.y[-1][d])
    n = F0.widths
    l1 = layers[0]
    val = float(F0.q[l1 - 1] @ Fs[ex[0]].q[l1 - 1]) / n[l1 - 1]
    lk = layers[-1]
    val *= float(Fs[ex[-1]].C_out(lk, outs[-1]) @ F0.C_out(lk, d))
    for j in range(k - 1):
        lj, lnext = layers[j], layers[j + 1]
        m = lnext - 1
        left = Fs[ex[j + 1]].q[m]
        val *= float(left @ (F0.C_act(lj, m) @ Fs[ex[j]].C_out(lj, outs[j]))) / n[m]
    return val


def corr_term(w: MlpWeights, x0, xs, idx: MultiIndex, output: int = 0) -> float:
    """Correlation term for output ``output`` at ``x0`` and directions from ``xs``.

    Unsorted layer indices are sorted jointly with examples and outputs (the
    mixed derivative is symmetric); a repeated layer gives exactly 0.
    """
    if not 0 <= output < w.widths[-1]:
        raise InvalidIndex(f"output {output} out of range")
    F0 = PathFactors(w, x0)
    Fs = [PathFactors(w, x) for x in xs]
    return _corr_from_factors(F0, Fs, idx, output)


def higher_derivative_oracle(w: MlpWeights, x0, layers, cap: int = 200, max_entries: int = 5_000_000) -> np.ndarray:
    """Dense mixed derivative ``d^k f / dW^{l1}..dW^{lk}`` at ``x0``.

    Shape ``(n_L, |W^{l1}|, ..., |W^{lk}|)`` with each weight matrix flattened
    row-major. With the activation pattern frozen the network is multilinear
    in the selected layers, so the tensor is an explicit product of fixed
    matrices, propagated layer by layer.
    """
    layers = [int(l) for l in layers]
    L = w.depth
    n = w.widths
    if any(not 1 <= l <= L for l in layers):
        raise InvalidIndex(f"layer index out of range 1..{L}: {layers}")
    sizes = [n[l] * n[l - 1] for l in layers]
    if sum(sizes) > cap:
        raise TooLarge(f"{sum(sizes)} selected parameters exceeds cap {cap}")
    if n[-1] * math.prod(sizes) > max_entries:
        raise TooLarge("dense derivative tensor too large")
    F = PathFactors(w, x0)
    if F.min_abs_preactivation() < KINK_TOL:
        raise KinkProximity("a pre-activation is within 1e-6 of the ReLU kink")
    if len(set(layers)) < len(layers):
        return np.zeros((n[-1],) + tuple(sizes))
    order = sorted(range(len(layers)), key=lambda t: layers[t])
    sel = [layers[t] for t in order]
    D = None
    for l in range(sel[0], L + 1):
        q_prev = F.q[l - 1] if D is None else SQRT2 * F.z[l - 1].reshape((-1,) + (1,) * (D.ndim - 1)) * D
        scale = np.sqrt(n[l - 1])
        if l in sel:
            E = np.eye(n[l])
            if D is None:
                D = np.einsum("ac,b->acb", E, q_prev) / scale
            else:
                D = np.einsum("ac,b...->a...cb", E, q_prev) / scale
            D = D.reshape(D.shape[:-2] + (n[l] * n[l - 1],))
        else:
            D = np.tensordot(w.layers[l - 1], q_prev, axes=(1, 0)) / scale
    # restore the caller's layer order on the parameter axes
    inv = np.argsort(order)
    return np.transpose(D, (0,) + tuple(1 + int(i) for i in inv))


def contract_oracle(D: np.ndarray, directions) -> np.ndarray:
    """Contract each parameter axis of ``D`` with a flattened direction."""
    out = D
    for g in directions:
        out = np.tensordot(out, np.ravel(g), axes=(1, 0))
    return out


# -- hypernetwork order terms --------------------------------------------------


def _require_scalar_primary(hw: HypernetWeights, r: int):
    if any(m != 1 for m in hw.primary_dims):
        raise UnsupportedShape(f"order terms need all primary widths equal to 1, got {hw.primary_dims}")
    if not 1 <= r <= 4:
        raise UnsupportedShape("order r must be in 1..4")
    if hw.H > 3:
        raise UnsupportedShape("primary depth H must be <= 3")


def _compositions(r: int, parts: int):
    if parts == 1:
        yield (r,)
        return
    for first in range(r + 1):
        for rest in _compositions(r - first, parts - 1):
            yield (first,) + rest


def _scalar_primary_state(hw: HypernetWeights, u):
    tr = forward_hypernet(hw, u)
    f = tr.v[0]
    g = np.array([tr.g[l][0, 0] for l in range(1, hw.H + 1)])
    z = float(np.asarray(u[1]).ravel()[0])
    return f, g, z


def output_sensitivities(f, g, z) -> np.ndarray:
    """``d h / d f^d`` for a primary network with scalar widths.

    ``a^{d-1} * prod_{e=d+1}^{H} f^e * sqrt(2) * 1{g^{e-1} > 0}``.
    """
    H = f.size
    a = [z]
    for e in range(1, H):
        a.append(SQRT2 * max(g[e - 1], 0.0))
    out = np.empty(H)
    for d in range(1, H + 1):
        s = a[d - 1]
        for e in range(d + 1, H + 1):
            s *= f[e - 1] * SQRT2 * (g[e - 2] > 0)
        out[d - 1] = s
    return out


def hyper_order_term(hw: HypernetWeights, u_i, u_j, r: int) -> float:
    """``K^(r)_{ij} = < grad^r h(u_i), (grad h(u_j))^r >`` for scalar-width primaries.

    Assembled as a multinomial sum over how the ``r`` derivatives split across
    the factors ``f^1..f^H`` of ``h``, each factor contracted through
    :func:`corr_term` building blocks.
    """
    _require_scalar_primary(hw, r)
    H = hw.H
    L = hw.meta.depth
    f_i, g_i, z_i = _scalar_primary_state(hw, u_i)
    f_j, g_j, z_j = _scalar_primary_state(hw, u_j)
    c_i = z_i * np.prod([SQRT2 * (g_i[d] > 0) for d in range(H - 1)])
    if c_i == 0.0:
        return 0.0
    hd = output_sensitivities(f_j, g_j, z_j)
    F0 = PathFactors(hw.meta, u_i[0])
    Fj = [PathFactors(hw.meta, u_j[0])]
    cache = {}

    def factor(d: int, alpha: int) -> float:
        if alpha == 0:
            return float(f_i[d])
        if alpha > L:
            return 0.0
        if (d, alpha) not in cache:
            total = 0.0
            for ls in combinations(range(1, L + 1), alpha):
                for ds in product(range(H), repeat=alpha):
                    weight = np.prod(hd[list(ds)])
                    if weight == 0.0:
                        continue
                    total += weight * _corr_from_factors(F0, Fj, MultiIndex(ls, (0,) * alpha, ds), d)
            cache[(d, alpha)] = math.factorial(alpha) * total
        return cache[(d, alpha)]

    K = 0.0
    for alphas in _compositions(r, H):
        coef = math.factorial(r) / math.prod(math.factorial(a) for a in alphas)
        K += coef * math.prod(factor(d, a) for d, a in enumerate(alphas))
    return float(c_i * K)


def _poly_mul(a: np.ndarray, b: np.ndarray, subscripts: str) -> np.ndarray:
    """Product of two polynomials with array coefficients (degree on axis 0)."""
    deg = a.shape[0] + b.shape[0] - 1
    first = np.einsum(subscripts, a[0], b[0])
    out = np.zeros((deg,) + first.shape)
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            out[i + j] += np.einsum(subscripts, a[i], b[j])
    return out


def frozen_taylor(hw: HypernetWeights, u, direction) -> np.ndarray:
    """Coefficients of ``t -> h(u; w + t * direction)`` with activation patterns frozen at ``w``.

    The result is exact: with fixed patterns each layer is linear in its
    weights, so ``h`` is a polynomial in ``t``. ``K^(r) = r! * coef[r]`` when the
    direction is a gradient ``grad h(u_j)``.
    """
    x, z = (np.asarray(a, dtype=float).ravel() for a in u)
    tr = forward_hypernet(hw, (x, z))
    dirs = hw.meta.unflatten(np.asarray(direction, dtype=float)).layers
    q = x[None, :]
    for l, (W, Vd) in enumerate(zip(hw.meta.layers, dirs), start=1):
        scale = np.sqrt(W.shape[1])
        y = np.zeros((q.shape[0] + 1, W.shape[0]))
        y[:-1] += q @ W.T / scale
        y[1:] += q @ Vd.T / scale
        q = SQRT2 * tr.meta.Z[l][:, 0][None, :] * y if l < hw.meta.depth else y
    V = split_primary(q, hw.primary_dims)
    a = z[None, :]
    for l, Vl in enumerate(V, start=1):
        g = _poly_mul(Vl, a, "ij,j->i") / np.sqrt(Vl.shape[2])
        a = SQRT2 * tr.Z[l][0][None, :] * g if l < hw.H else g
    return a[:, 0]


def hyper_order_oracle(hw: HypernetWeights, u_i, u_j, r: int) -> float:
    coef = frozen_taylor(hw, u_i, grad_hypernet(hw, u_j))
    return float(math.factorial(r) * coef[r]) if r < coef.size else 0.0


# -- scaling fits --------------------------------------------------------------


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    ci_low: float
    ci_high: float


def fit_loglog_slope(widths, values, level: float = 0.95) -> SlopeFit:
    """Least-squares slope of ``log(values)`` against ``log(widths)``."""
    lx = np.log(np.asarray(widths, dtype=float))
    ly = np.log(np.asarray(values, dtype=float))
    res = stats.linregress(lx, ly)
    dof = lx.size - 2
    half = stats.t.ppf(0.5 + level / 2, dof) * res.stderr if dof > 0 else np.inf
    return SlopeFit(float(res.slope), float(res.intercept), float(res.rvalue ** 2),
                    float(res.slope - half), float(res.slope + half))


@dataclass
class ProbeResult:
    raw: list  # (width, seed, value)
    aggregate: list  # (width, mean_abs, sd, n)
    fit: SlopeFit
    median_fit: SlopeFit

    def summary_rows(self):
        return [("mean_abs",) + tuple(vars(self.fit).values()), ("median_abs",) + tuple(vars(self.median_fit).values())]


def _summarise(raw) -> ProbeResult:
    widths = sorted({w for w, _, _ in raw})
    agg, med = [], []
    for n in widths:
        vals = np.abs(np.array([v for w, _, v in raw if w == n]))
        agg.append((n, float(vals.mean()), float(vals.std(ddof=1)) if vals.size > 1 else 0.0, int(vals.size)))
        # exact zeros come from switched-off units, not from the width scaling
        nz = vals[vals > 0]
        med.append(float(np.median(nz)) if nz.size else 0.0)
    fit = fit_loglog_slope(widths, [a[1] for a in agg])
    return ProbeResult(raw, agg, fit, fit_loglog_slope(widths, med))


def _sphere(gen, dim: int) -> np.ndarray:
    x = gen.standard_normal(dim)
    return x * np.sqrt(dim) / np.linalg.norm(x)


def sample_T(r: int, width: int, seed: int, L: int = 3, n0: int = 8, n_out: int = 1,
             outputs: str = "matched", fixed_input: bool = False, root: int = 0) -> float:
    """One draw of a correlation term of order ``r`` for fresh weights at ``width``."""
    if r > L:
        raise InvalidIndex(f"order {r} exceeds depth {L}")
    w = init_mlp((n0,) + (width,) * (L - 1) + (n_out,), root, stream=(0x7E, r, width, seed))
    gen = rng(root, 0x7F, r, width, seed)
    x0 = _sphere(gen, n0)
    xs = [x0] if fixed_input else [_sphere(gen, n0) for _ in range(r)]
    layers = sorted(gen.choice(np.arange(1, L + 1), size=r, replace=False).tolist())
    examples = [0] * r if fixed_input else gen.choice(len(xs), size=r).tolist()
    d = int(gen.integers(n_out))
    if outputs == "matched":
        outs = [d] * r
    elif outputs == "mismatched":
        if n_out < 2:
            raise InvalidIndex("mismatched outputs need at least two outputs")
        outs = [d] * r
        outs[-1] = (d + 1 + int(gen.integers(n_out - 1))) % n_out
    else:
        outs = gen.integers(n_out, size=r).tolist()
    F0 = PathFactors(w, x0)
    Fs = [F0] if fixed_input else [PathFactors(w, x) for x in xs]
    return _corr_from_factors(F0, Fs, MultiIndex(layers, examples, outs), d)


def scaling_probe_T(r: int, widths=(64, 128, 256, 512), seeds: int = 200, L: int = 3, n0: int = 8,
                    n_out: int = 1, outputs: str = "matched", fixed_input: bool = False, root: int = 0,
                    mapper=map) -> ProbeResult:
    if r < 1:
        raise ValueError("r must be >= 1")
    widths = sorted(int(n) for n in widths)
    if len(widths) < 4 or widths[-1] < 8 * widths[0]:
        raise ValueError("need at least 4 widths spanning a factor of 8")
    jobs = [(n, s) for n in widths for s in range(seeds)]
    vals = list(mapper(lambda job: sample_T(r, job[0], job[1], L, n0, n_out, outputs, fixed_input, root), jobs))
    return _summarise([(n, s, v) for (n, s), v in zip(jobs, vals)])


def sample_K(r: int, H: int, width: int, seed: int, L: int = 3, n0: int = 8, root: int = 0) -> float:
    """One draw of ``K^(r)`` for a hypernet with scalar-width primary of depth ``H``."""
    pdims = (1,) * (H + 1)
    meta = init_mlp((n0,) + (width,) * (L - 1) + (H,), root, stream=(0x4B, r, H, width, seed))
    hw = HypernetWeights(meta, pdims)
    gen = rng(root, 0x4C, r, H, width, seed)
    u_i = (_sphere(gen, n0), np.array([gen.uniform(0.5, 1.5)]))
    u_j = (_sphere(gen, n0), np.array([gen.uniform(0.5, 1.5)]))
    return hyper_order_term(hw, u_i, u_j, r)


def scaling_probe_K(r: int, H: int, widths=(64, 128, 256, 512), seeds: int = 200, L: int = 3, n0: int = 8,
                    root: int = 0, mapper=map) -> ProbeResult:
    widths = sorted(int(n) for n in widths)
    jobs = [(n, s) for n in widths for s in range(seeds)]
    vals = list(mapper(lambda job: sample_K(r, H, job[0], job[1], L, n0, root), jobs))
    return _summarise([(n, s, v) for (n, s), v in zip(jobs, vals)])
