"""Minimal neural-network building blocks in NumPy.

Spatial layers are channels-last: activations are ``(N, H, W, C)`` float
arrays, which keeps im2col gathers contiguous. Each layer object owns its
parameters, caches what it needs during ``forward`` and consumes that cache
in ``backward``, which accumulates parameter gradients and returns the
gradient with respect to the layer input. Convolutions are stride-1 with
"same" padding and are evaluated as a single im2col matmul so the heavy
lifting stays inside BLAS.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Parameter:
    """A trainable array plus its gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    std = math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


def orthogonal_rows(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0,
                    dtype=np.float32) -> np.ndarray:
    """Matrix with orthonormal rows (requires rows <= cols), scaled by gain."""
    if rows > cols:
        raise ValueError(f"orthogonal_rows needs rows <= cols, got {rows}x{cols}")
    a = rng.normal(0.0, 1.0, size=(cols, rows))
    q, r = np.linalg.qr(a)
    # sign-fix so the factorization is unique and reproducible
    q = q * np.sign(np.diag(r))
    return (gain * q.T).astype(dtype)


class Linear:
    """y = x @ W + b over the trailing axis."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float32, name: str = "linear", zero_init: bool = False):
        if zero_init or rng is None:
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            w = he_normal(rng, (in_dim, out_dim), fan_in=in_dim, dtype=dtype)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype), f"{name}.bias")
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x = self._x
        xm = x.reshape(-1, x.shape[-1])
        dm = dout.reshape(-1, dout.shape[-1])
        self.weight.grad += xm.T @ dm
        self.bias.grad += dm.sum(axis=0)
        return (dm @ self.weight.value.T).reshape(x.shape)


class ReLU:
    def __init__(self):
        self._mask = None

    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dout, 0)


class Conv2d:
    """Stride-1 square convolution with same padding, channels-last layout.

    Channels-last means im2col gathers contiguous runs of all channels per
    patch row, which is what makes the pure-numpy path fast enough to train
    at full image resolution.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 name: str = "conv", zero_init: bool = False):
        if kernel % 2 != 1:
            raise ValueError("Conv2d supports odd kernels only (same padding)")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.pad = (kernel - 1) // 2
        fan_in = in_ch * kernel * kernel
        if zero_init or rng is None:
            w = np.zeros((out_ch, fan_in), dtype=dtype)
        else:
            w = he_normal(rng, (out_ch, fan_in), fan_in=fan_in, dtype=dtype)
        # stored flattened as (out_ch, in_ch*k*k) with the input channel
        # outermost, matching the (out, in, k, k) view of weight_kchw
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), f"{name}.bias")
        self._cols = None
        self._x_shape = None

    def params(self):
        return [self.weight, self.bias]

    def weight_kchw(self) -> np.ndarray:
        """Weight viewed as (out_ch, in_ch, k, k)."""
        return self.weight.value.reshape(self.out_ch, self.in_ch, self.kernel, self.kernel)

    def set_weight_kchw(self, w: np.ndarray):
        self.weight.value[...] = w.reshape(self.out_ch, -1)

    @staticmethod
    def _cols_last(xl: np.ndarray, k: int) -> np.ndarray:
        """im2col on a channels-last, already padded tensor.

        Channels-last keeps each patch row a contiguous run of `c` floats,
        so the gather is cheap; rows come out ordered (di, dj, c).
        """
        n, hp, wp, c = xl.shape
        h, w = hp - (k - 1), wp - (k - 1)
        if k == 1:
            return xl.reshape(n * h * w, c)
        win = sliding_window_view(xl, (k, k), axis=(1, 2))       # (N,H,W,C,k,k)
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
        return cols.reshape(n * h * w, k * k * c)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """(N, H, W, C) -> (N, H, W, out_ch), same padding."""
        n, h, w, c = x.shape
        if c != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {c}")
        k, p = self.kernel, self.pad
        xl = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        cols = self._cols_last(xl, k)
        self._cols = cols
        self._x_shape = x.shape
        wk = self.weight.value.reshape(self.out_ch, c, k, k)
        wlast = np.ascontiguousarray(wk.transpose(0, 2, 3, 1)).reshape(self.out_ch, -1)
        out = cols @ wlast.T + self.bias.value
        return out.reshape(n, h, w, self.out_ch)

    def backward(self, dout: np.ndarray, dx_channels: int | None = None) -> np.ndarray:
        """Accumulates weight grads and returns dL/dx, both channels-last.

        dx_channels limits dx to the leading input channels; callers that
        feed frozen features through the trailing channels use it to skip
        gradient work that would be thrown away.
        """
        n, h, w, c = self._x_shape
        k, p = self.kernel, self.pad
        o = self.out_ch
        dout = np.ascontiguousarray(dout)
        dm = dout.reshape(n * h * w, o)
        dw = (dm.T @ self._cols).reshape(o, k, k, c)
        self.weight.grad += dw.transpose(0, 3, 1, 2).reshape(o, c * k * k)
        self.bias.grad += dm.sum(axis=0)
        self._cols = None
        # dx is itself a same-padded convolution: correlate dout with the
        # spatially flipped kernel, swapping in/out channels. One im2col
        # matmul instead of a k*k scatter-add over strided views.
        cx = c if dx_channels is None else int(dx_channels)
        wk = self.weight.value.reshape(o, c, k, k)[:, :cx]
        wflip = np.ascontiguousarray(
            wk[:, :, ::-1, ::-1].transpose(1, 2, 3, 0)).reshape(cx, k * k * o)
        if k == 1:
            dx = dm @ wflip.T
        else:
            dp = np.pad(dout, ((0, 0), (p, p), (p, p), (0, 0)))
            dx = self._cols_last(dp, k) @ wflip.T
        return dx.reshape(n, h, w, cx)


class ConvTranspose2x2:
    """Transposed convolution with kernel 2 and stride 2: exact 2x upsampling.

    Every output pixel receives exactly one kernel tap, so the op reduces to
    four independent matmuls (one per position inside each 2x2 output block)
    and there is no padding ambiguity.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator | None = None,
                 dtype=np.float32, name: str = "tconv"):
        self.in_ch, self.out_ch = in_ch, out_ch
        if rng is None:
            w = np.zeros((in_ch, out_ch, 2, 2), dtype=dtype)
        else:
            w = he_normal(rng, (in_ch, out_ch, 2, 2), fan_in=in_ch, dtype=dtype)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), f"{name}.bias")
        self._xm = None
        self._x_shape = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """(N, H, W, C) -> (N, 2H, 2W, out_ch)."""
        n, h, w, c = x.shape
        if c != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {c}")
        xm = np.ascontiguousarray(x).reshape(-1, c)
        self._xm, self._x_shape = xm, x.shape
        out = np.empty((n, 2 * h, 2 * w, self.out_ch), dtype=x.dtype)
        for i in range(2):
            for j in range(2):
                sub = xm @ self.weight.value[:, :, i, j]
                out[:, i::2, j::2, :] = sub.reshape(n, h, w, self.out_ch)
        out += self.bias.value
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        n, h, w, c = self._x_shape
        dxm = np.zeros_like(self._xm)
        for i in range(2):
            for j in range(2):
                dsub = np.ascontiguousarray(dout[:, i::2, j::2, :]).reshape(-1, self.out_ch)
                self.weight.grad[:, :, i, j] += self._xm.T @ dsub
                dxm += dsub @ self.weight.value[:, :, i, j].T
        self.bias.grad += dout.sum(axis=(0, 1, 2))
        self._xm = None
        return dxm.reshape(n, h, w, c)


def stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; overflow-safe for arbitrarily large finite logits."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _axis_plan(src: int, dst: int):
    # half-pixel-center sampling, clamped at the borders
    s = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    lo = np.floor(s).astype(np.int64)
    frac = s - lo
    i0 = np.clip(lo, 0, src - 1)
    i1 = np.clip(lo + 1, 0, src - 1)
    return i0, i1, frac


def bilinear_resize_nhwc(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (N, H, W, C) array using half-pixel centers."""
    n, h, w, c = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    y0, y1, fy = _axis_plan(h, out_h)
    x0, x1, fx = _axis_plan(w, out_w)
    fy = fy[:, None, None].astype(x.dtype)
    fx = fx[:, None].astype(x.dtype)
    r0 = x[:, y0]
    r1 = x[:, y1]
    top = r0[:, :, x0] * (1 - fx) + r0[:, :, x1] * fx
    bot = r1[:, :, x0] * (1 - fx) + r1[:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def bilinear_resize_hwc(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) array."""
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    out = bilinear_resize_nhwc(img[None], out_h, out_w)[0]
    return out[:, :, 0] if squeeze else out


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        g = p.grad
        total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_global_norm(params, max_norm: float) -> float:
    """Scales all gradients so their joint L2 norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def zero_grads(params):
    for p in params:
        p.zero_grad()


class Adam:
    """Adam with bias correction; update order is fixed by the param list."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
