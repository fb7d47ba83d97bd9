"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects and, when a tape
is active and some input requires gradients, appends a record holding the
matching backward closure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, record


def _out(data: np.ndarray, *inputs: Tensor) -> Tensor:
    return Tensor._wrap(data, any(t.requires_grad for t in inputs))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = _out(a.data + b.data, a, b)
    record("add", (a, b), (out,),
           lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _out(a.data - b.data, a, b)
    record("sub", (a, b), (out,),
           lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _out(a.data * b.data, a, b)
    record("mul", (a, b), (out,),
           lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = _out(np.where(mask, x.data, 0.0), x)
    record("relu", (x,), (out,), lambda g: (g * mask,))
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow in exp for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = _out(s, x)
    record("sigmoid", (x,), (out,), lambda g: (g * s * (1.0 - s),))
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = _out(t, x)
    record("tanh", (x,), (out,), lambda g: (g * (1.0 - t * t),))
    return out


# --- reductions ------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    out = _out(np.array(x.data.sum()), x)
    record("sum", (x,), (out,), lambda g: (np.full(x.shape, float(g)),))
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = _out(np.array(x.data.mean()), x)
    record("mean", (x,), (out,), lambda g: (np.full(x.shape, float(g) / n),))
    return out


def mean_abs_error(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of ``|pred - target|`` over all elements; subgradient 0 at ties."""
    if pred.shape != target.shape:
        raise ShapeError(f"mean_abs_error: pred shape {pred.shape} != target shape {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = _out(np.array(np.abs(diff).mean()), pred, target)

    def back(g):
        s = np.sign(diff) * (float(g) / n)
        return s, -s

    record("mean_abs_error", (pred, target), (out,), back)
    return out


# --- shape manipulation ----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    out = _out(data.copy(), x)
    record("reshape", (x,), (out,), lambda g: (g.reshape(x.shape),))
    return out


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` and drop that axis."""
    axis = axis % x.ndim
    out = _out(np.take(x.data, index, axis=axis), x)

    def back(g):
        full = np.zeros(x.shape)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    record("take", (x,), (out,), back)
    return out


def stack(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = _out(np.stack([t.data for t in tensors], axis=axis), *tensors)
    ax = axis % out.ndim
    record("stack", tensors, (out,),
           lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))))
    return out


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    """Join ``a`` and ``b`` along their final axis (``a``'s channels first)."""
    if a.ndim != b.ndim:
        raise ShapeError(f"concat_last_axis: rank {a.ndim} vs {b.ndim}")
    for axis, (p, q) in enumerate(zip(a.shape[:-1], b.shape[:-1])):
        if p != q:
            raise ShapeError(f"concat_last_axis: axis {axis} has size {p} vs {q}")
    k = a.shape[-1]
    out = _out(np.concatenate([a.data, b.data], axis=-1), a, b)
    record("concat", (a, b), (out,), lambda g: (g[..., :k], g[..., k:]))
    return out


# --- layers ----------------------------------------------------------------

def conv2d_same(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation with zero padding of one cell on each border.

    ``x`` is ``(B, W, H, C_in)``, ``kernels`` ``(3, 3, C_in, C_out)`` and
    ``bias`` ``(C_out,)``; the output keeps the spatial size of ``x``.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d_same: input must be (B, W, H, C), got rank {x.ndim}")
    if kernels.ndim != 4 or kernels.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d_same: kernel spatial axes must be 3x3, got {kernels.shape}")
    if kernels.shape[2] != x.shape[3]:
        raise ShapeError(
            f"conv2d_same: channel axis mismatch, input has {x.shape[3]} "
            f"but kernel expects {kernels.shape[2]}")
    if bias.shape != (kernels.shape[3],):
        raise ShapeError(f"conv2d_same: bias axis 0 must be {kernels.shape[3]}, got {bias.shape}")

    B, W, H, cin = x.shape
    cout = kernels.shape[3]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    k = kernels.data
    y = np.empty((B, W, H, cout))
    y[...] = bias.data
    for i in range(3):
        for j in range(3):
            y += xp[:, i:i + W, j:j + H, :] @ k[i, j]
    out = _out(y, x, kernels, bias)

    def back(g):
        gk = np.empty_like(k)
        gxp = np.zeros_like(xp)
        g2 = g.reshape(-1, cout)
        for i in range(3):
            for j in range(3):
                win = xp[:, i:i + W, j:j + H, :].reshape(-1, cin)
                gk[i, j] = win.T @ g2
                gxp[:, i:i + W, j:j + H, :] += g @ k[i, j].T
        return gxp[:, 1:-1, 1:-1, :], gk, g2.sum(axis=0)

    record("conv2d_same", (x, kernels, bias), (out,), back)
    return out


@dataclass
class BatchNormState:
    """Running per-channel statistics for batch normalization."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    updates: int = 0

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)

    @property
    def populated(self) -> bool:
        return self.updates > 0

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(),
                              self.momentum, self.eps, self.updates)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train") -> Tensor:
    """Per-channel normalization over every axis except the last.

    In ``"train"`` mode the batch statistics are used and ``state`` is
    updated in place; in ``"infer"`` mode the running statistics are used.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},), "
                         f"got {gamma.shape} and {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    n = x.size // c
    g_, b_ = gamma.data, beta.data

    if mode == "train":
        if n < 2:
            raise ShapeError("batch_norm: train mode needs at least 2 elements per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean) * inv_std
        out = _out(xhat * g_ + b_, x, gamma, beta)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mean
        state.running_var = m * state.running_var + (1.0 - m) * var
        state.updates += 1

        def back(g):
            dxhat = g * g_
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=axes)
                                - xhat * (dxhat * xhat).sum(axis=axes))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    elif mode == "infer":
        if not state.populated:
            raise ValueError("batch_norm: running statistics have never been populated")
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv_std
        out = _out(xhat * g_ + b_, x, gamma, beta)

        def back(g):
            return g * g_ * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        raise ValueError(f"batch_norm: unknown mode {mode!r}")

    record("batch_norm", (x, gamma, beta), (out,), back)
    return out


def dense_affine(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``x @ weights + bias`` along the last axis of ``x``."""
    if weights.ndim != 2:
        raise ShapeError(f"dense_affine: weights must be 2-D, got {weights.shape}")
    din, dout = weights.shape
    if x.shape[-1] != din:
        raise ShapeError(f"dense_affine: input last axis is {x.shape[-1]}, weights expect {din}")
    if bias.shape != (dout,):
        raise ShapeError(f"dense_affine: bias must have shape ({dout},), got {bias.shape}")
    out = _out(x.data @ weights.data + bias.data, x, weights, bias)

    def back(g):
        g2 = g.reshape(-1, dout)
        return (g @ weights.data.T,
                x.data.reshape(-1, din).T @ g2,
                g2.sum(axis=0))

    record("dense_affine", (x, weights, bias), (out,), back)
    return out


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, w_input: Tensor,
              w_hidden: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM cell update.

    Gate blocks in ``w_input`` (``d x 4u``), ``w_hidden`` (``u x 4u``) and
    ``bias`` (``4u``) are ordered input, forget, candidate, output.

    Returns
    -------
    (h, c) : tuple of Tensor
        New hidden and cell states, each ``(..., u)``.
    """
    u = h_prev.shape[-1]
    if w_input.ndim != 2 or w_input.shape[1] != 4 * u:
        raise ShapeError(f"lstm_step: w_input must be (d, {4 * u}), got {w_input.shape}")
    if x.shape[-1] != w_input.shape[0]:
        raise ShapeError(f"lstm_step: input last axis is {x.shape[-1]}, w_input expects {w_input.shape[0]}")
    if w_hidden.shape != (u, 4 * u):
        raise ShapeError(f"lstm_step: w_hidden must be ({u}, {4 * u}), got {w_hidden.shape}")
    if bias.shape != (4 * u,):
        raise ShapeError(f"lstm_step: bias must be ({4 * u},), got {bias.shape}")
    if x.shape[:-1] != h_prev.shape[:-1]:
        raise ShapeError(f"lstm_step: leading axes of input {x.shape} and state {h_prev.shape} differ")
    if c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm_step: cell state {c_prev.shape} != hidden state {h_prev.shape}")

    z = x.data @ w_input.data + h_prev.data @ w_hidden.data + bias.data
    i = _sigmoid(z[..., :u])
    f = _sigmoid(z[..., u:2 * u])
    cand = np.tanh(z[..., 2 * u:3 * u])
    o = _sigmoid(z[..., 3 * u:])
    c = f * c_prev.data + i * cand
    tc = np.tanh(c)
    h = o * tc
    inputs = (x, h_prev, c_prev, w_input, w_hidden, bias)
    h_out, c_out = _out(h, *inputs), _out(c, *inputs)

    def back(gh, gc):
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * cand * i * (1.0 - i),
            dc * c_prev.data * f * (1.0 - f),
            dc * i * (1.0 - cand * cand),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        dz2 = dz.reshape(-1, 4 * u)
        return (dz @ w_input.data.T,
                dz @ w_hidden.data.T,
                dc * f,
                x.data.reshape(-1, x.shape[-1]).T @ dz2,
                h_prev.data.reshape(-1, u).T @ dz2,
                dz2.sum(axis=0))

    record("lstm_step", inputs, (h_out, c_out), back)
    return h_out, c_out
