"""A small reverse-mode autodiff engine over numpy arrays.

Only the kernels needed by the reconstruction network and its loss are
provided. Activations are ``(channels, height, width)`` arrays (a batch of
one image); convolution kernels are ``(out_ch, in_ch, kh, kw)``.

Each op records its parents and a closure that pushes the output gradient
back into them. :func:`backward` replays the closures in reverse topological
order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, k: float) -> "Tensor":
        return scale(self, k)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, False, op=op)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tensor on the tape."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(a.data + b.data, (a, b), bw, "add")


def scale(a: Tensor, k: float) -> Tensor:
    def bw(g):
        a._accumulate(g * k)

    return _node(a.data * a.dtype.type(k), (a,), bw, "scale")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    s = x.dtype.type(slope)
    factor = np.where(x.data >= 0, x.dtype.type(1), s)

    def bw(g):
        x._accumulate(g * factor)

    return _node(x.data * factor, (x,), bw, "leaky_relu")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Channel-wise concatenation."""
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def dropout_apply(x: Tensor, mask: np.ndarray, keep_prob: float) -> Tensor:
    """Inverted dropout: ``x * mask / keep_prob``."""
    if not keep_prob > 0:
        raise ValueError("keep_prob must be positive")
    mask = np.asarray(mask)
    if mask.shape != x.shape:
        raise ValueError(f"dropout mask shape {mask.shape} != input shape {x.shape}")
    factor = (mask / keep_prob).astype(x.dtype)

    def bw(g):
        x._accumulate(g * factor)

    return _node(x.data * factor, (x,), bw, "dropout")


# ---------------------------------------------------------------- convolution


def _fold_reflect(g: np.ndarray, pad: int, axis: int) -> np.ndarray:
    """Adjoint of reflection padding along ``axis`` (1 or 2) of a 3D array."""
    g = np.moveaxis(g, axis, 1)
    n = g.shape[1] - 2 * pad
    out = g[:, pad:pad + n].copy()
    for k in range(pad):
        out[:, pad - k] += g[:, k]
        out[:, n - 2 - k] += g[:, pad + n + k]
    return np.moveaxis(out, 1, axis)


def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.abs(np.arange(-pad, n + pad))
    return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           pad: int | None = None) -> Tensor:
    """Cross-correlation of a reflection-padded ``(C, H, W)`` input.

    ``pad`` defaults to ``(k - 1) // 2`` which preserves spatial size for odd
    kernels at stride 1.
    """
    c_in, h, wd = x.shape
    c_out, c_w, kh, kw = w.shape
    if c_w != c_in:
        raise ValueError(f"conv2d: input has {c_in} channels, kernel expects {c_w}")
    if pad is None:
        pad = (kh - 1) // 2
    if pad < 0 or stride < 1:
        raise ValueError("pad must be >= 0 and stride >= 1")
    if pad > 0 and pad > min(h, wd) - 1:
        raise ValueError("reflection pad must be smaller than the input size")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError("kernel larger than padded input")
    dtype = x.dtype

    if pad:
        xp = x.data[:, _reflect_index(h, pad)][:, :, _reflect_index(wd, pad)]
    else:
        xp = x.data
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(c_in, ho * wo)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, ::stride, ::stride][:, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * kh * kw, ho * wo)
    wmat = w.data.reshape(c_out, c_in * kh * kw)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(c_out, ho, wo)

    def bw(g):
        g2 = g.reshape(c_out, ho * wo)
        if w.requires_grad:
            w._accumulate((g2 @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=1))
        if not x.requires_grad:
            return
        dcols = (wmat.T @ g2).reshape(c_in, kh, kw, ho, wo)
        if kh == 1 and kw == 1 and stride == 1:
            dxp = dcols.reshape(c_in, hp, wp)
        else:
            dxp = np.zeros((c_in, hp, wp), dtype=dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        if pad:
            dx = _fold_reflect(_fold_reflect(dxp, pad, 1), pad, 2)
        else:
            dx = dxp
        x._accumulate(dx)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out.astype(dtype, copy=False), parents, bw, "conv2d")


# ---------------------------------------------------------------- resampling


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first element."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        d = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(d, arg[..., None], g[..., None], axis=-1)
        x._accumulate(d.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w))

    return _node(out, (x,), bw, "maxpool2")


@lru_cache(maxsize=64)
def _upsample_matrix(n: int) -> np.ndarray:
    """``(2n, n)`` linear interpolation matrix, half-pixel (align_corners=False)."""
    src = np.maximum((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    mat = np.zeros((2 * n, n))
    np.add.at(mat, (np.arange(2 * n), i0), 1.0 - frac)
    np.add.at(mat, (np.arange(2 * n), i1), frac)
    mat.setflags(write=False)
    return mat


def bilinear_upsample2(x: Tensor) -> Tensor:
    c, h, w = x.shape
    uh = _upsample_matrix(h).astype(x.dtype)
    uw = _upsample_matrix(w).astype(x.dtype)

    def bw(g):
        x._accumulate(uh.T @ g @ uw)

    return _node(uh @ x.data @ uw.T, (x,), bw, "upsample2")


# ---------------------------------------------------------------- normalisation


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation using the statistics of the current input."""
    c, h, w = x.shape
    n = h * w
    if n == 0:
        raise ValueError("batchnorm needs a non-empty spatial extent")
    flat = x.data.reshape(c, n)
    mu = flat.mean(axis=1, keepdims=True)
    centred = flat - mu
    var = (centred * centred).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centred * inv_std
    out = gamma.data[:, None] * xhat + beta.data[:, None]

    def bw(g):
        g = g.reshape(c, n)
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=1))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=1))
        if x.requires_grad:
            dxhat = g * gamma.data[:, None]
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
            x._accumulate(dx.reshape(c, h, w))

    return _node(out.reshape(c, h, w).astype(x.dtype, copy=False), (x, gamma, beta), bw, "batchnorm")


# ---------------------------------------------------------------- losses


def tv_l1(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Smoothed anisotropic TV with forward differences and replicate boundary.

    ``sum sqrt(dh^2 + eps^2) - eps + sqrt(dv^2 + eps^2) - eps``; the boundary
    differences are zero under replicate padding and drop out.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    d = x.data
    dh = d[..., :, 1:] - d[..., :, :-1]
    dv = d[..., 1:, :] - d[..., :-1, :]
    e = d.dtype.type(eps)
    rh = np.sqrt(dh * dh + e * e)
    rv = np.sqrt(dv * dv + e * e)
    value = (rh - e).sum() + (rv - e).sum()

    def bw(g):
        th = g * dh / rh
        tv = g * dv / rv
        dx = np.zeros_like(d)
        dx[..., :, 1:] += th
        dx[..., :, :-1] -= th
        dx[..., 1:, :] += tv
        dx[..., :-1, :] -= tv
        x._accumulate(dx)

    return _node(np.asarray(value, dtype=d.dtype), (x,), bw, "tv_l1")


def data_fidelity(x: Tensor, y: np.ndarray, op) -> Tensor:
    """``||A x - y||^2`` where ``op`` exposes ``forward``/``adjoint`` on 2D arrays.

    Accepts a ``(1, H, W)`` or ``(H, W)`` image tensor; the projector runs in
    float64 and the gradient ``2 A^T (A x - y)`` is cast back to ``x.dtype``.
    """
    img = x.data.reshape(op.shape).astype(np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != op.sino_shape:
        raise ValueError(f"sinogram shape {y.shape} != operator shape {op.sino_shape}")
    resid = op.forward(img) - y
    value = float(np.dot(resid.ravel(), resid.ravel()))

    def bw(g):
        x._accumulate((2.0 * float(g) * op.adjoint(resid)).reshape(x.shape).astype(x.dtype))

    return _node(np.asarray(value, dtype=x.dtype), (x,), bw, "data_fidelity")


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, applied in place to ``param.data``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if m.shape != p.data.shape or g.shape != p.data.shape:
            raise ValueError("optimizer state shape mismatch")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.data.dtype, copy=False)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------- checking


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-6,
                   indices: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    out = np.zeros(len(indices))
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out


def gradcheck(build: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6,
              max_checks: int | None = None, seed: int = 0, atol: float = 0.0) -> float:
    """Worst relative error between tape gradients and central differences.

    ``build`` must recompute the scalar output from the current ``.data`` of
    ``inputs``. With ``max_checks`` only a random subset of coordinates of
    each input is differenced. The error per input is
    ``||g_tape - g_fd|| / max(||g_tape||, ||g_fd||)``. An input whose tape and
    difference gradients both have norm ``<= atol`` counts as exact: its true
    gradient is zero and the ratio would only compare rounding noise.
    """
    for t in inputs:
        t.grad = None
    backward(build())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        size = t.data.size
        idx = np.arange(size)
        if max_checks is not None and size > max_checks:
            idx = np.sort(rng.choice(size, max_checks, replace=False))
        full = np.zeros(size) if t.grad is None else t.grad.reshape(-1).astype(np.float64)
        tape = full[idx]
        fd = numerical_grad(lambda: float(build().data), t.data, h, idx)
        denom = max(np.linalg.norm(tape), np.linalg.norm(fd), 1e-300)
        if denom <= atol:
            continue
        worst = max(worst, float(np.linalg.norm(tape - fd) / denom))
    return worst
