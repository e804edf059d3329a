"""Dense array kernels: layer forward/backward primitives and the SGD update.

All kernels operate on plain numpy arrays in [C, H, W] (or flat) layout and
preserve the input dtype (float32 for training, float64 for gradient checks).
Each forward returns an opaque cache holding exactly what its backward needs;
adjoints are hand-written, there is no autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an input does not meet a kernel's shape contract."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


@dataclass
class ConvParams:
    """Convolution parameters: kernels [out_ch, in_ch, kh, kw], bias [out_ch]."""

    kernels: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        k = np.asarray(self.kernels)
        b = np.asarray(self.bias)
        _require(k.ndim == 4, f"kernels must be 4-d, got shape {k.shape}")
        _require(b.shape == (k.shape[0],),
                 f"bias shape {b.shape} does not match {k.shape[0]} output channels")
        if self.stride <= 0:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.pad < 0:
            raise ShapeError(f"pad must be non-negative, got {self.pad}")


@dataclass
class OptState:
    """SGD-with-momentum state: one velocity array per parameter."""

    velocity: dict[str, np.ndarray]
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        for v in (self.learning_rate, self.momentum, self.weight_decay):
            if v < 0:
                raise ValueError(f"rates must be non-negative, got {v}")

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], learning_rate: float = 1e-4,
                   momentum: float = 0.9, weight_decay: float = 5e-4) -> "OptState":
        vel = {name: np.zeros_like(p) for name, p in params.items()}
        return cls(vel, learning_rate, momentum, weight_decay)


def _window_cols(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """im2col: padded input [C, Hp, Wp] -> columns [C*kh*kw, oh*ow]."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    c, oh, ow = win.shape[:3]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow), oh, ow


def conv2d(x: np.ndarray, p: ConvParams, with_relu: bool = True):
    """Cross-correlate x [C_in, H, W] with p.kernels, add bias, optional relu.

    Output spatial extent is floor((H + 2*pad - kh) / stride) + 1 per axis.
    """
    x = np.asarray(x)
    _require(x.ndim == 3, f"conv input must be [C, H, W], got shape {x.shape}")
    out_ch, in_ch, kh, kw = p.kernels.shape
    _require(x.shape[0] == in_ch,
             f"conv input has {x.shape[0]} channels, kernels expect {in_ch}")
    h, w = x.shape[1:]
    hp, wp = h + 2 * p.pad, w + 2 * p.pad
    _require(kh <= hp and kw <= wp,
             f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    xp = np.pad(x, ((0, 0), (p.pad, p.pad), (p.pad, p.pad))) if p.pad else x
    cols, oh, ow = _window_cols(xp, kh, kw, p.stride)
    k2 = p.kernels.reshape(out_ch, -1)
    pre = (k2 @ cols + p.bias[:, None]).reshape(out_ch, oh, ow)
    out = np.maximum(pre, 0) if with_relu else pre
    cache = (cols, p, x.shape, xp.shape, with_relu, pre if with_relu else None)
    return out, cache


def conv2d_backward(cache, grad_out: np.ndarray):
    """Exact adjoint of conv2d: returns (grad_input, grad_kernels, grad_bias)."""
    cols, p, x_shape, xp_shape, with_relu, pre = cache
    out_ch, in_ch, kh, kw = p.kernels.shape
    g = np.asarray(grad_out)
    oh = (xp_shape[1] - kh) // p.stride + 1
    ow = (xp_shape[2] - kw) // p.stride + 1
    _require(g.shape == (out_ch, oh, ow),
             f"grad_out shape {g.shape} does not match forward output {(out_ch, oh, ow)}")

    if with_relu:
        g = g * (pre > 0)
    g2 = g.reshape(out_ch, -1)
    grad_bias = g2.sum(axis=1)
    grad_kernels = (g2 @ cols.T).reshape(p.kernels.shape)

    grad_cols = (p.kernels.reshape(out_ch, -1).T @ g2).reshape(in_ch, kh, kw, oh, ow)
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    s = p.stride
    for u in range(kh):
        for v in range(kw):
            gxp[:, u:u + s * oh:s, v:v + s * ow:s] += grad_cols[:, u, v]
    if p.pad:
        gxp = gxp[:, p.pad:p.pad + x_shape[1], p.pad:p.pad + x_shape[2]]
    return gxp, grad_kernels, grad_bias


def maxpool(x: np.ndarray, window: int, stride: int):
    """Max over window x window regions; ties resolved to the first element
    in row-major window order (the recorded argmax)."""
    x = np.asarray(x)
    _require(x.ndim == 3, f"maxpool input must be [C, H, W], got shape {x.shape}")
    _require(1 <= window <= min(x.shape[1], x.shape[2]),
             f"window {window} larger than input {x.shape[1]}x{x.shape[2]}")
    _require(stride >= 1, f"stride must be positive, got {stride}")

    win = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    c, oh, ow = win.shape[:3]
    flat = win.reshape(c, oh, ow, window * window)
    amax = flat.argmax(axis=3)
    out = np.take_along_axis(flat, amax[..., None], axis=3)[..., 0]
    cache = (x.shape, amax, window, stride)
    return out, cache


def maxpool_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    """Routes each grad_out element to its recorded argmax position."""
    x_shape, amax, window, stride = cache
    c, oh, ow = amax.shape
    g = np.asarray(grad_out)
    _require(g.shape == (c, oh, ow),
             f"grad_out shape {g.shape} does not match pooled output {(c, oh, ow)}")

    u, v = np.divmod(amax, window)
    rows = np.arange(oh)[None, :, None] * stride + u
    cols = np.arange(ow)[None, None, :] * stride + v
    chan = np.arange(c)[:, None, None]
    flat_idx = (chan * x_shape[1] + rows) * x_shape[2] + cols
    gx = np.zeros(x_shape, dtype=g.dtype)
    np.add.at(gx.reshape(-1), flat_idx.reshape(-1), g.reshape(-1))
    return gx


def lrn(x: np.ndarray, k: float = 2.0, n: int = 5, alpha: float = 1e-4,
        beta: float = 0.75):
    """Cross-channel response normalization:

        out_c = x_c * (k + (alpha/n) * sum_{c' in window(c, n)} x_{c'}^2)^(-beta)

    The channel window is centered on c with half-width (n-1)/2, clipped at
    the channel boundaries.
    """
    x = np.asarray(x)
    _require(x.ndim == 3, f"lrn input must be [C, H, W], got shape {x.shape}")
    if k <= 0:
        raise ShapeError(f"lrn k must be positive, got {k}")
    if n <= 0 or n % 2 == 0:
        raise ShapeError(f"lrn window n must be odd positive, got {n}")

    base = k + (alpha / n) * _channel_window_sum(x * x, n)
    scale = base ** (-beta)
    out = x * scale
    cache = (x, base, scale, n, alpha, beta)
    return out, cache


def lrn_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    x, base, scale, n, alpha, beta = cache
    g = np.asarray(grad_out)
    _require(g.shape == x.shape,
             f"grad_out shape {g.shape} does not match input {x.shape}")
    # d out_c / d x_e = delta_ce * scale_c - 2 beta (alpha/n) x_c x_e base_c^(-beta-1)
    # for e in window(c); the window relation is symmetric so the cross term is
    # itself a windowed channel sum.
    q = g * x * base ** (-beta - 1.0)
    return g * scale - 2.0 * beta * (alpha / n) * x * _channel_window_sum(q, n)


def _channel_window_sum(a: np.ndarray, n: int) -> np.ndarray:
    """Sum of a over the clipped channel window of half-width (n-1)//2."""
    c = a.shape[0]
    half = (n - 1) // 2
    csum = np.cumsum(a, axis=0)
    zero = np.zeros_like(a[:1])
    padded = np.concatenate([zero, csum], axis=0)
    hi = np.minimum(np.arange(c) + half + 1, c)
    lo = np.maximum(np.arange(c) - half, 0)
    return padded[hi] - padded[lo]


def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """out = weight @ x + bias for flat x [in_dim], weight [out_dim, in_dim]."""
    x = np.asarray(x)
    _require(x.ndim == 1, f"fc input must be flat, got shape {x.shape}")
    _require(weight.ndim == 2 and weight.shape[1] == x.shape[0],
             f"fc weight {weight.shape} does not match input length {x.shape[0]}")
    _require(bias.shape == (weight.shape[0],),
             f"fc bias {bias.shape} does not match {weight.shape[0]} outputs")
    out = weight @ x + bias
    return out, (x, weight)


def fc_backward(cache, grad_out: np.ndarray):
    """Exact adjoints: (grad_input, grad_weight, grad_bias)."""
    x, weight = cache
    g = np.asarray(grad_out)
    _require(g.shape == (weight.shape[0],),
             f"grad_out shape {g.shape} does not match {weight.shape[0]} outputs")
    return weight.T @ g, np.outer(g, x), g.copy()


def dropout(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout. In train mode each element is zeroed with probability
    `rate` and survivors are scaled by 1/(1-rate); infer mode is the identity.
    Returns (output, mask); backward is a multiplication by the same mask.
    """
    x = np.asarray(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"dropout mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        mask = np.ones_like(x)
        return x.copy(), mask
    if rng is None:
        raise ValueError("train-mode dropout requires an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      state: OptState) -> None:
    """In-place momentum update over the whole parameter set:

        v <- momentum * v - lr * (grad + weight_decay * param)
        param <- param + v

    Iteration order is the sorted parameter name, so the update is
    deterministic for a given (params, grads, state).
    """
    missing = sorted(set(params) ^ set(grads))
    if missing:
        raise ShapeError(f"params/grads name mismatch: {missing}")
    for name in sorted(params):
        p, g = params[name], grads[name]
        v = state.velocity.get(name)
        if v is None or v.shape != p.shape or g.shape != p.shape:
            raise ShapeError(
                f"shape mismatch for {name!r}: param {p.shape}, grad {g.shape}, "
                f"velocity {None if v is None else v.shape}")
        v *= state.momentum
        v -= state.learning_rate * (g + state.weight_decay * p)
        p += v
