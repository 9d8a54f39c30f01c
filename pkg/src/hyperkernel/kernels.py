"""Infinite-width kernels of ReLU MLPs and hypernetworks.

The meta network ``f`` and the primary network ``g`` both use the NTK
parameterization (1/sqrt(fan-in), sqrt(2)-scaled ReLU, no biases). Widths
never appear here: the meta recursion is run to depth ``L`` first and its
output covariance ``S^L`` then multiplies every primary layer.

Every routine has a vectorised core working on arrays of covariance triples
``(k(a,a), k(a,b), k(b,b))`` and a scalar front end returning a
:class:`KernelTrajectory`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .duals import CovPair, relu_dual, relu_dual_dot
from .errors import DimensionMismatch
from .linalg import rng


@dataclass(frozen=True)
class HyperKernelConfig:
    L: int
    H: int
    n0: int
    m0: int

    def __post_init__(self):
        for name in ("L", "H", "n0", "m0"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class KernelTrajectory:
    """Per-layer covariance blocks for one input pair.

    ``cov[l]`` is the covariance of the layer-``l`` pre-activations (layer 0 is
    the raw input inner products over input dimension). ``post[l]`` is the
    inner-product kernel of the layer-``l`` activations, and ``dot[l]`` the
    derivative dual of ``cov[l]`` as ``(off-diagonal, diag a, diag b)``.

    For a plain MLP ``cov[l+1] == post[l+1]`` is ``S^{l+1}``. For the primary
    network of a hypernetwork ``cov[l]`` is ``Lambda^l`` (l >= 1), ``post[l]``
    is ``Sigma^l``, and ``meta`` holds the meta trajectory whose last block is
    ``S^L``.
    """

    cov: list[CovPair]
    post: list[CovPair]
    dot: list[tuple[float, float, float]]
    meta: "KernelTrajectory | None" = field(default=None, repr=False)

    @property
    def depth(self) -> int:
        return len(self.cov) - 1

    @property
    def last(self) -> CovPair:
        return self.cov[-1]


def _triple(a, b, dim):
    return a @ a / dim, a @ b / dim, b @ b / dim


# -- vectorised cores ---------------------------------------------------------


def meta_arrays(sxx, sxy, syy, depth: int):
    """Meta-network recursion on broadcastable arrays.

    Returns ``(S, dots, theta_f)`` where ``S[l]`` is the triple for layer
    ``l = 0..depth``, ``dots[l]`` the off-diagonal derivative dual of
    ``S[l]`` and ``theta_f`` the NTK of a depth-``depth`` network.
    """
    S = [(sxx, sxy, syy)]
    dots = []
    for _ in range(depth):
        a, b, c = S[-1]
        dots.append(relu_dual_dot(a, b, c))
        S.append((relu_dual(a, a, a), relu_dual(a, b, c), relu_dual(c, c, c)))
    theta = np.asarray(S[0][1], dtype=float)
    for l in range(1, depth):
        theta = theta * dots[l - 1] + S[l][1]
    return S, dots, theta


def primary_arrays(zxx, zxy, zyy, lxx, lxy, lyy, depth: int):
    """Primary-network recursion given the meta output covariance ``l**``.

    Returns ``(Lam, Sig, dots, theta_g)``: ``Lam[l]`` for l = 1..depth (index 0
    is ``None``), ``Sig[l]`` for l = 0..depth, ``dots[l] = dual_dot(Lam[l])``
    for l = 1..depth (index 0 is ``None``) and the primary NTK ``theta_g``.
    Each backward step through a generated weight matrix carries the meta
    output covariance ``lxy`` alongside the derivative dual.
    """
    Sig = [(zxx, zxy, zyy)]
    Lam = [None]
    dots = [None]
    for _ in range(depth):
        a, b, c = Sig[-1]
        lam = (a * lxx, b * lxy, c * lyy)
        Lam.append(lam)
        dots.append(relu_dual_dot(*lam))
        Sig.append((relu_dual(lam[0], lam[0], lam[0]), relu_dual(*lam), relu_dual(lam[2], lam[2], lam[2])))
    theta = np.asarray(Sig[0][1], dtype=float)
    for l in range(1, depth):
        theta = theta * lxy * dots[l] + Sig[l][1]
    return Lam, Sig, dots, theta


# -- scalar front ends --------------------------------------------------------


def _check_same(a, b, what):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape or a.size == 0:
        raise DimensionMismatch(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def mlp_nngp(x, x_prime, L: int) -> KernelTrajectory:
    x, xp = _check_same(x, x_prime, "mlp_nngp")
    if L < 1:
        raise ValueError("L must be >= 1")
    S, dots, _ = meta_arrays(*_triple(x, xp, x.size), L)
    cov = [CovPair(float(a), float(b), float(c)) for a, b, c in S]
    dot = [(float(d), 1.0 if S[l][0] > 0 else 0.0, 1.0 if S[l][2] > 0 else 0.0) for l, d in enumerate(dots)]
    return KernelTrajectory(cov=cov, post=cov, dot=dot)


def mlp_ntk(x, x_prime, L: int) -> float:
    x, xp = _check_same(x, x_prime, "mlp_ntk")
    if L < 1:
        raise ValueError("L must be >= 1")
    return float(meta_arrays(*_triple(x, xp, x.size), L)[2])


def _split(u, cfg: HyperKernelConfig):
    x, z = u
    x = np.asarray(x, dtype=float).ravel()
    z = np.asarray(z, dtype=float).ravel()
    if x.size != cfg.n0 or z.size != cfg.m0:
        raise DimensionMismatch(f"expected x of dim {cfg.n0} and z of dim {cfg.m0}, got {x.size} and {z.size}")
    return x, z


def hyper_nngp(u, u_prime, cfg: HyperKernelConfig) -> KernelTrajectory:
    """NNGP trajectory of the primary network fed by an infinitely wide meta net."""
    x, z = _split(u, cfg)
    xp, zp = _split(u_prime, cfg)
    meta = mlp_nngp(x, xp, cfg.L)
    s = meta.last
    Lam, Sig, dots, _ = primary_arrays(*_triple(z, zp, cfg.m0), s.s11, s.s12, s.s22, cfg.H)
    cov = [CovPair(*map(float, Sig[0]))] + [CovPair(*map(float, lam)) for lam in Lam[1:]]
    post = [CovPair(*map(float, sg)) for sg in Sig]
    dot = [(0.0, 0.0, 0.0)]
    for l in range(1, cfg.H + 1):
        a, _, c = Lam[l]
        dot.append((float(dots[l]), 1.0 if a > 0 else 0.0, 1.0 if c > 0 else 0.0))
    return KernelTrajectory(cov=cov, post=post, dot=dot, meta=meta)


@dataclass(frozen=True)
class HyperNTK:
    theta_h: float
    theta_f: float
    theta_g: float


def hyper_ntk(u, u_prime, cfg: HyperKernelConfig) -> HyperNTK:
    traj = hyper_nngp(u, u_prime, cfg)
    meta = traj.meta
    theta_f = meta.cov[0].s12
    for l in range(1, cfg.L):
        theta_f = theta_f * meta.dot[l - 1][0] + meta.cov[l].s12
    s_xy = meta.last.s12
    theta_g = traj.post[0].s12
    for l in range(1, cfg.H):
        theta_g = theta_g * s_xy * traj.dot[l][0] + traj.post[l].s12
    return HyperNTK(theta_h=theta_f * theta_g, theta_f=theta_f, theta_g=theta_g)


def hyper_gram(X1, Z1, X2, Z2, cfg: HyperKernelConfig):
    """NNGP and NTK Gram blocks between two sets of ``(x, z)`` inputs.

    Rows sharing the same ``x`` reuse one meta recursion, so the cost of the
    meta part scales with the number of distinct images rather than pixels.
    Returns a dict with ``nngp`` (output covariance ``Lambda^H``), ``ntk``
    (``Theta^h``), ``theta_f`` and ``theta_g``.
    """
    X1, Z1, X2, Z2 = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (X1, Z1, X2, Z2))
    if X1.shape[1] != cfg.n0 or X2.shape[1] != cfg.n0 or Z1.shape[1] != cfg.m0 or Z2.shape[1] != cfg.m0:
        raise DimensionMismatch("input dimensions do not match the kernel config")
    if X1.shape[0] != Z1.shape[0] or X2.shape[0] != Z2.shape[0]:
        raise DimensionMismatch("x and z row counts differ")
    ux1, inv1 = np.unique(X1, axis=0, return_inverse=True)
    ux2, inv2 = np.unique(X2, axis=0, return_inverse=True)
    inv1, inv2 = inv1.ravel(), inv2.ravel()
    d1 = np.einsum("ij,ij->i", ux1, ux1) / cfg.n0
    d2 = np.einsum("ij,ij->i", ux2, ux2) / cfg.n0
    cross = ux1 @ ux2.T / cfg.n0
    S, _, theta_f_u = meta_arrays(d1[:, None], cross, d2[None, :], cfg.L)
    sl_xx, sl_xy, sl_yy = S[-1]
    sl_xx = np.broadcast_to(sl_xx, cross.shape)[:, 0]
    sl_yy = np.broadcast_to(sl_yy, cross.shape)[0, :]
    zd1 = np.einsum("ij,ij->i", Z1, Z1) / cfg.m0
    zd2 = np.einsum("ij,ij->i", Z2, Z2) / cfg.m0
    zc = Z1 @ Z2.T / cfg.m0
    Lam, _, _, theta_g = primary_arrays(
        zd1[:, None], zc, zd2[None, :],
        sl_xx[inv1][:, None], sl_xy[np.ix_(inv1, inv2)], sl_yy[inv2][None, :],
        cfg.H,
    )
    theta_f = theta_f_u[np.ix_(inv1, inv2)]
    return {
        "nngp": np.asarray(Lam[-1][1]),
        "ntk": theta_f * theta_g,
        "theta_f": theta_f,
        "theta_g": np.asarray(theta_g),
    }


def fourier_features(z, k: int, seed: int, scale: float = 1.0) -> np.ndarray:
    """Random Fourier features ``cos(W z + b)`` with ``W ~ N(0,1)``, ``b ~ U[-pi, pi]``.

    ``z`` may be a single vector or a batch of row vectors; the same ``(W, b)``
    is drawn for a given seed and input dimension.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    gen = rng(seed, 0xF0)
    W = gen.standard_normal((k, Z.shape[1]))
    b = gen.uniform(-np.pi, np.pi, size=k)
    out = np.cos(scale * Z @ W.T + b)
    return out[0] if single else out


def fourier_limit_kernel(z, z_prime) -> float:
    z, zp = _check_same(z, z_prime, "fourier_limit_kernel")
    d = z - zp
    return float(np.exp(-0.5 * d @ d) / 2.0)
