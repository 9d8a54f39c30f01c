"""Finite-width NTK-parameterized MLPs and hypernetworks.

Layer equations (no biases)::

    y^l = W^l q^{l-1} / sqrt(n_{l-1}),   q^l = sqrt(2) relu(y^l),   q^0 = x

and the meta output ``f(x) = y^L`` is reshaped into the primary weights
``V^1..V^H`` layer-major, row-major within each ``V^l``. The primary network
runs the same equations on ``z`` with ``V`` in place of ``W``; its scalar
output is ``h(u) = g^H``.

Batched routines take inputs as rows and keep activations as columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonFiniteLoss
from .kernels import HyperKernelConfig
from .linalg import rng

SQRT2 = np.sqrt(2.0)


@dataclass
class MlpWeights:
    layers: list[np.ndarray]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an MLP needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.shape[1] != a.shape[0]:
                raise DimensionMismatch(f"layer shapes {a.shape} and {b.shape} do not chain")

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].shape[1]] + [W.shape[0] for W in self.layers]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([W.ravel() for W in self.layers])

    def copy(self) -> "MlpWeights":
        return MlpWeights([W.copy() for W in self.layers])

    def unflatten(self, flat: np.ndarray) -> "MlpWeights":
        out, i = [], 0
        for W in self.layers:
            out.append(np.asarray(flat[i:i + W.size], dtype=float).reshape(W.shape))
            i += W.size
        return MlpWeights(out)


def _stream(stream) -> tuple:
    return tuple(stream) if isinstance(stream, (tuple, list)) else (stream,)


def init_mlp(widths, seed: int, stream=0) -> MlpWeights:
    """Standard-normal layers; layer ``l`` draws from substream ``(seed, *stream, l)``."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError(f"bad widths {widths}")
    layers = []
    for l in range(1, len(widths)):
        layers.append(rng(seed, *_stream(stream), l).standard_normal((widths[l], widths[l - 1])))
    return MlpWeights(layers)


def primary_param_count(dims) -> int:
    return sum(dims[i] * dims[i - 1] for i in range(1, len(dims)))


@dataclass
class HypernetWeights:
    """Trainable meta weights plus the shape of the primary network they generate."""

    meta: MlpWeights
    primary_dims: tuple[int, ...]

    def __post_init__(self):
        self.primary_dims = tuple(int(m) for m in self.primary_dims)
        if len(self.primary_dims) < 2 or min(self.primary_dims) < 1:
            raise ValueError(f"bad primary dims {self.primary_dims}")
        if self.primary_dims[-1] != 1:
            raise ValueError("the primary network must have a scalar output")
        need = primary_param_count(self.primary_dims)
        if self.meta.widths[-1] != need:
            raise DimensionMismatch(f"meta output dim {self.meta.widths[-1]} != {need} primary parameters")

    @property
    def H(self) -> int:
        return len(self.primary_dims) - 1

    @property
    def config(self) -> HyperKernelConfig:
        return HyperKernelConfig(L=self.meta.depth, H=self.H, n0=self.meta.widths[0], m0=self.primary_dims[0])

    def copy(self) -> "HypernetWeights":
        return HypernetWeights(self.meta.copy(), self.primary_dims)


def init_hypernet(cfg: HyperKernelConfig, meta_width: int, primary_width: int, seed: int,
                  stream=0) -> HypernetWeights:
    """Standard-normal meta weights for a hypernet with uniform hidden widths."""
    pdims = (cfg.m0,) + (primary_width,) * (cfg.H - 1) + (1,)
    mdims = (cfg.n0,) + (meta_width,) * (cfg.L - 1) + (primary_param_count(pdims),)
    return HypernetWeights(init_mlp(mdims, seed, stream), pdims)


def split_primary(v: np.ndarray, dims) -> list[np.ndarray]:
    """Reshape meta outputs (last axis) into ``V^1..V^H``, layer-major then row-major."""
    out, i = [], 0
    for l in range(1, len(dims)):
        size = dims[l] * dims[l - 1]
        out.append(v[..., i:i + size].reshape(v.shape[:-1] + (dims[l], dims[l - 1])))
        i += size
    return out


# -- plain MLP ----------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Per-layer records; ``y[l]``, ``Z[l]`` for l = 1..L and ``q[l]`` for l = 0..L-1.

    Index 0 of ``y`` and ``Z`` is unused. Arrays are columns (one per input).
    """

    y: list
    q: list
    Z: list

    @property
    def output(self) -> np.ndarray:
        return self.y[-1]


def _as_columns(x, n0: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[:, None] if single else x.T
    if X.shape[0] != n0:
        raise DimensionMismatch(f"input dim {X.shape[0]} != {n0}")
    return X, single


def _forward_columns(layers, X) -> ForwardTrace:
    y, q, Z = [None], [X], [None]
    for l, W in enumerate(layers, start=1):
        pre = W @ q[-1] / np.sqrt(W.shape[1])
        y.append(pre)
        Z.append((pre > 0).astype(float))
        if l < len(layers):
            q.append(SQRT2 * np.maximum(pre, 0.0))
    return ForwardTrace(y, q, Z)


def forward_mlp(w: MlpWeights, x) -> ForwardTrace:
    X, _ = _as_columns(x, w.widths[0])
    return _forward_columns(w.layers, X)


def _backward_columns(layers, trace: ForwardTrace, top: np.ndarray) -> list:
    """Back-propagate ``top = d out / d y^L`` (columns); returns ``delta[l]`` for l = 1..L."""
    L = len(layers)
    delta = [None] * (L + 1)
    delta[L] = top
    for l in range(L - 1, 0, -1):
        W = layers[l]
        delta[l] = SQRT2 * trace.Z[l] * (W.T @ delta[l + 1]) / np.sqrt(W.shape[1])
    return delta


def _weight_grads(layers, trace, delta) -> list[np.ndarray]:
    return [delta[l] @ trace.q[l - 1].T / np.sqrt(layers[l - 1].shape[1]) for l in range(1, len(layers) + 1)]


def jacobian_mlp(w: MlpWeights, x, d: int) -> list[np.ndarray]:
    """Gradients ``d f^d / d W^l`` for a single input, one matrix per layer."""
    X, single = _as_columns(x, w.widths[0])
    if not single:
        raise DimensionMismatch("jacobian_mlp takes a single input vector")
    nL = w.widths[-1]
    if not 0 <= d < nL:
        raise DimensionMismatch(f"output index {d} out of range for {nL} outputs")
    trace = _forward_columns(w.layers, X)
    top = np.zeros((nL, 1))
    top[d] = 1.0
    return _weight_grads(w.layers, trace, _backward_columns(w.layers, trace, top))


def mlp_grad(w: MlpWeights, x, d: int = 0) -> np.ndarray:
    return np.concatenate([g.ravel() for g in jacobian_mlp(w, x, d)])


# -- primary network and hypernetwork ----------------------------------------


@dataclass
class HyperTrace:
    meta: ForwardTrace
    v: np.ndarray  # (B, n_L)
    V: list  # V[l-1] has shape (B, m_l, m_{l-1})
    g: list  # g[l] (B, m_l) for l = 1..H
    a: list  # a[l] (B, m_l) for l = 0..H-1, a[0] = z
    Z: list
    single: bool = field(default=False)

    @property
    def output(self):
        out = self.g[-1][:, 0]
        return float(out[0]) if self.single else out


def primary_forward(V, Zin: np.ndarray):
    """Run the primary network for a batch; ``V[l]`` is (B, m_l, m_{l-1}), ``Zin`` is (B, m_0)."""
    g, a, Z = [None], [Zin], [None]
    H = len(V)
    for l in range(1, H + 1):
        Vl = V[l - 1]
        pre = np.einsum("bij,bj->bi", Vl, a[-1]) / np.sqrt(Vl.shape[2])
        g.append(pre)
        Z.append((pre > 0).astype(float))
        if l < H:
            a.append(SQRT2 * np.maximum(pre, 0.0))
    return g, a, Z


def primary_grad_v(V, a, Z) -> np.ndarray:
    """``d h / d v`` for each batch row, laid out like the meta output."""
    H = len(V)
    B = a[0].shape[0]
    beta = np.ones((B, 1))
    parts = [None] * H
    for l in range(H, 0, -1):
        Vl = V[l - 1]
        scale = np.sqrt(Vl.shape[2])
        parts[l - 1] = (beta[:, :, None] * a[l - 1][:, None, :] / scale).reshape(B, -1)
        if l > 1:
            beta = SQRT2 * Z[l - 1] * np.einsum("bij,bi->bj", Vl, beta) / scale
    return np.concatenate(parts, axis=1)


def _split_inputs(hw: HypernetWeights, u):
    x, z = u
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    Zi = np.atleast_2d(z)
    if X.shape[1] != hw.meta.widths[0] or Zi.shape[1] != hw.primary_dims[0] or X.shape[0] != Zi.shape[0]:
        raise DimensionMismatch(
            f"expected x dim {hw.meta.widths[0]} and z dim {hw.primary_dims[0]}, got {X.shape} and {Zi.shape}")
    return X, Zi, single


def forward_hypernet(hw: HypernetWeights, u) -> HyperTrace:
    """Forward both networks; ``u = (x, z)`` with single vectors or row batches."""
    X, Zi, single = _split_inputs(hw, u)
    meta = _forward_columns(hw.meta.layers, X.T)
    v = meta.output.T
    V = split_primary(v, hw.primary_dims)
    g, a, Z = primary_forward(V, Zi)
    return HyperTrace(meta, v, V, g, a, Z, single)


def _meta_delta(hw, trace: HyperTrace, dv: np.ndarray):
    return _backward_columns(hw.meta.layers, trace.meta, dv.T)


def grad_hypernet(hw: HypernetWeights, u) -> np.ndarray:
    """Flat gradient of ``h(u)`` w.r.t. the meta weights (row-major per layer)."""
    trace = forward_hypernet(hw, u)
    if not trace.single:
        raise DimensionMismatch("grad_hypernet takes a single input pair")
    dv = primary_grad_v(trace.V, trace.a, trace.Z)
    delta = _meta_delta(hw, trace, dv)
    return np.concatenate([g.ravel() for g in _weight_grads(hw.meta.layers, trace.meta, delta)])


@dataclass(frozen=True)
class EmpiricalKernels:
    k_h: float
    k_g: float
    k_f_diag_mean: float
    k_f_offdiag_rms: float


def _meta_kernel_block(layers, tr1, tr2, rows: np.ndarray) -> np.ndarray:
    """Exact ``K^f(x, x')`` restricted to output rows ``rows``."""
    nL = layers[-1].shape[0]
    top = np.zeros((nL, rows.size))
    top[rows, np.arange(rows.size)] = 1.0
    d1 = _backward_columns(layers, tr1, top)
    d2 = _backward_columns(layers, tr2, top)
    K = np.zeros((rows.size, rows.size))
    for l in range(1, len(layers) + 1):
        qq = float(tr1.q[l - 1][:, 0] @ tr2.q[l - 1][:, 0]) / layers[l - 1].shape[1]
        K += qq * (d1[l].T @ d2[l])
    return K


def empirical_kernels(hw: HypernetWeights, u, u_prime, probes: int = 16, seed: int = 0) -> EmpiricalKernels:
    """Finite-width kernels for one input pair.

    ``k_h`` is computed layer by layer as ``sum_l <q, q'>/n * <delta, delta'>``
    which equals the dot product of the flat gradients. The ``K^f`` summary is
    taken from the exact sub-block on ``probes`` randomly chosen outputs.
    """
    t1 = forward_hypernet(hw, u)
    t2 = forward_hypernet(hw, u_prime)
    if not (t1.single and t2.single):
        raise DimensionMismatch("empirical_kernels takes single input pairs")
    dv1 = primary_grad_v(t1.V, t1.a, t1.Z)
    dv2 = primary_grad_v(t2.V, t2.a, t2.Z)
    layers = hw.meta.layers
    D1 = _meta_delta(hw, t1, dv1)
    D2 = _meta_delta(hw, t2, dv2)
    k_h = 0.0
    for l in range(1, len(layers) + 1):
        qq = float(t1.meta.q[l - 1][:, 0] @ t2.meta.q[l - 1][:, 0]) / layers[l - 1].shape[1]
        k_h += qq * float(D1[l][:, 0] @ D2[l][:, 0])
    k_g = float(dv1[0] @ dv2[0])
    nL = layers[-1].shape[0]
    rows = np.sort(rng(seed, 0xF1).choice(nL, size=min(probes, nL), replace=False))
    Kf = _meta_kernel_block(layers, t1.meta, t2.meta, rows)
    diag = np.diag(Kf)
    off = Kf[~np.eye(rows.size, dtype=bool)]
    return EmpiricalKernels(
        k_h=k_h,
        k_g=k_g,
        k_f_diag_mean=float(diag.mean()),
        k_f_offdiag_rms=float(np.sqrt(np.mean(off ** 2))) if off.size else 0.0,
    )


# -- training -----------------------------------------------------------------


def _loss_and_grad_out(pred, y, p):
    r = pred - y
    if p == 2:
        return r * r, 2.0 * r
    return np.abs(r), np.sign(r)


def model_predict(model, data) -> np.ndarray:
    """Outputs for a dataset: ``(X, Z)`` for hypernets, ``X`` for plain MLPs."""
    if isinstance(model, HypernetWeights):
        X, Zi = data[0], data[1]
        return np.atleast_1d(forward_hypernet(model, (X, Zi)).output)
    X = np.atleast_2d(data[0])
    return forward_mlp(model, X).output[0]


def _batch_grads(model, data, idx, p):
    """Mean loss over ``idx`` and its gradient as a list of layer matrices."""
    y = data[-1][idx]
    if isinstance(model, HypernetWeights):
        X, Zi = data[0][idx], data[1][idx]
        tr = forward_hypernet(model, (X, Zi))
        pred = tr.g[-1][:, 0]
        loss, dl = _loss_and_grad_out(pred, y, p)
        dv = primary_grad_v(tr.V, tr.a, tr.Z) * (dl / idx.size)[:, None]
        delta = _meta_delta(model, tr, dv)
        return loss.mean(), _weight_grads(model.meta.layers, tr.meta, delta)
    layers = model.layers
    tr = _forward_columns(layers, data[0][idx].T)
    pred = tr.output[0]
    loss, dl = _loss_and_grad_out(pred, y, p)
    delta = _backward_columns(layers, tr, (dl / idx.size)[None, :])
    return loss.mean(), _weight_grads(layers, tr, delta)


def _layers_of(model):
    return model.meta.layers if isinstance(model, HypernetWeights) else model.layers


def dataset_loss(model, data, p: int = 2) -> float:
    pred = model_predict(model, data)
    return float(_loss_and_grad_out(pred, data[-1], p)[0].mean())


@dataclass
class TrainResult:
    model: object
    losses: list[float]
    steps: int
    step_losses: list[float] = field(default_factory=list)


def sgd_step(model, data, idx, mu: float, p: int = 2):
    """One in-place SGD step on the mean loss over ``idx``; returns that loss."""
    loss, grads = _batch_grads(model, data, idx, p)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss became {loss}")
    if mu != 0:
        for W, G in zip(_layers_of(model), grads):
            W -= mu * G
    return float(loss)


def sgd_train(model, data, mu: float, epochs: int, batch: int = 1, p: int = 2, seed: int = 0) -> TrainResult:
    """Plain SGD with indices drawn uniformly with replacement.

    ``data`` is ``(X, Z, y)`` for a hypernet or ``(X, y)`` for an MLP. One epoch
    is ``ceil(N / batch)`` steps; ``losses[e]`` is the full-dataset mean loss
    after epoch ``e`` (entry 0 is the loss at initialisation) and
    ``step_losses`` holds the minibatch loss before each update. Raises
    :class:`NonFiniteLoss` if the loss stops being finite.
    """
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    if mu < 0:
        raise ValueError("mu must be non-negative")
    model = model.copy()
    N = data[-1].shape[0]
    gen = rng(seed, 0x5D)
    steps_per_epoch = -(-N // batch)
    losses = [dataset_loss(model, data, p)]
    step_losses = []
    steps = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            for _ in range(steps_per_epoch):
                step_losses.append(sgd_step(model, data, gen.integers(0, N, size=batch), mu, p))
                steps += 1
            loss = dataset_loss(model, data, p)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"training loss became {loss} after {steps} steps")
            losses.append(loss)
    return TrainResult(model, losses, steps, step_losses)
