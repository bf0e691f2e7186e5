"""Minimal reverse-mode autodiff over dense float64 arrays.

Every operation records its inputs and a backward rule on the output
tensor; ``Tensor.backward()`` replays the recording in reverse
topological order. The recording doubles as the tape: creation order of
op outputs is a valid topological order by construction, and one
backward traversal fills ``grad`` on every ``requires_grad`` leaf
reachable from the loss. Gradients accumulate across backward calls
until cleared with ``zero_grad``.

Only the operations needed by the 1-d convolutional networks and their
losses are provided; all arithmetic is in 64-bit reals.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Shape mismatch between operands, naming the offending axis."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block; outputs are constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def frozen(params: Iterable["Tensor"]):
    """Temporarily clear requires_grad on `params`.

    Gradients still flow *through* ops that use them, but nothing is
    accumulated into the frozen tensors (used to hold one player of the
    adversarial game fixed).
    """
    params = list(params)
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, r in zip(params, prev):
            p.requires_grad = r


class Tensor:
    """Dense float64 array with optional participation in the tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar loss into all reachable leaves."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
                continue
            live = {id(p) for p in node._parents}
            for parent, pg in node._backward(g):
                if id(parent) in live:
                    acc = grads.get(id(parent))
                    if acc is None:
                        grads[id(parent)] = np.array(pg, dtype=np.float64, copy=True)
                    else:
                        acc += pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axes=None):
        return tsum(self, axes)

    def mean(self, axes=None):
        return tmean(self, axes)

    def abs(self):
        return tabs(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(p: Tensor) -> bool:
    return p.requires_grad or p._backward is not None


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; records on the tape only while grads are enabled.

    Which parents receive gradient is fixed here, at recording time, so
    toggling ``requires_grad`` after the forward pass (see ``frozen``)
    cannot re-route a previously recorded step.
    """
    out = Tensor(data)
    live = tuple(p for p in parents if _needs_grad(p))
    if _grad_enabled and live:
        out._parents = live
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return (
            (a, _unbroadcast(g * b_data, a_data.shape)),
            (b, _unbroadcast(g * a_data, b_data.shape)),
        )

    return _make(data, (a, b), backward)


def tsum(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, x.data.ndim)
    data = x.data.sum(axis=axes)
    shape = x.data.shape

    def backward(g):
        return ((x, _spread(g, shape, axes)),)

    return _make(data, (x,), backward)


def tmean(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, x.data.ndim)
    data = x.data.mean(axis=axes)
    shape = x.data.shape
    count = x.data.size if axes is None else int(np.prod([shape[i] for i in axes]))

    def backward(g):
        return ((x, _spread(g, shape, axes) / count),)

    return _make(data, (x,), backward)


def _norm_axes(axes, ndim):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def _spread(g: np.ndarray, shape: tuple[int, ...], axes) -> np.ndarray:
    """Broadcast a reduced gradient back over the reduced axes."""
    if axes is None:
        return np.broadcast_to(g, shape).copy()
    g_exp = np.expand_dims(g, axes)
    return np.broadcast_to(g_exp, shape).copy()


def tabs(x: Tensor) -> Tensor:
    data = np.abs(x.data)
    sign = np.sign(x.data)  # subgradient 0 at exactly 0

    def backward(g):
        return ((x, g * sign),)

    return _make(data, (x,), backward)


def sqrt(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Elementwise square root; derivative guarded near zero."""
    data = np.sqrt(np.maximum(x.data, 0.0))

    def backward(g):
        return ((x, g / (2.0 * data + eps)),)

    return _make(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        return ((x, g * data * (1.0 - data)),)

    return _make(data, (x,), backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity, backward annihilator."""
    return Tensor(x.data, requires_grad=False)


# -- structural ops ----------------------------------------------------------


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate B×C1×T and B×C2×T along the channel axis."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise DimensionError("concat_channels expects rank-3 inputs (batch, channel, time)")
    if a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(
            f"batch axis mismatch: {a.data.shape[0]} vs {b.data.shape[0]}"
        )
    if a.data.shape[2] != b.data.shape[2]:
        raise DimensionError(f"time axis mismatch: {a.data.shape[2]} vs {b.data.shape[2]}")
    c1 = a.data.shape[1]
    data = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return ((a, g[:, :c1]), (b, g[:, c1:]))

    return _make(data, (a, b), backward)


def broadcast_channels(v: Tensor, batch: int, time: int) -> Tensor:
    """Tile a length-C vector to B×C×T."""
    if v.data.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {v.data.shape}")
    data = np.broadcast_to(v.data[None, :, None], (batch, v.data.shape[0], time)).copy()

    def backward(g):
        return ((v, g.sum(axis=(0, 2))),)

    return _make(data, (v,), backward)


def swap_channel_time(x: Tensor) -> Tensor:
    """B×T×C -> B×C×T (and back), differentiable."""
    if x.data.ndim != 3:
        raise DimensionError(f"expected rank-3 input, got {x.data.shape}")
    data = np.ascontiguousarray(x.data.transpose(0, 2, 1))

    def backward(g):
        return ((x, np.ascontiguousarray(g.transpose(0, 2, 1))),)

    return _make(data, (x,), backward)


def tile_time(v: Tensor, time: int) -> Tensor:
    """Repeat B×D rows along a new trailing time axis: B×D×T."""
    if v.data.ndim != 2:
        raise DimensionError(f"expected a B x D matrix, got shape {v.data.shape}")
    data = np.broadcast_to(v.data[:, :, None], v.data.shape + (time,)).copy()

    def backward(g):
        return ((v, g.sum(axis=2)),)

    return _make(data, (v,), backward)


def gather_rows(matrix: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-d parameter matrix; backward scatter-adds."""
    idx = np.asarray(indices)
    data = matrix.data[idx.ravel()].reshape(idx.shape + (matrix.data.shape[1],))

    def backward(g):
        gm = np.zeros_like(matrix.data)
        np.add.at(gm, idx.ravel(), g.reshape(-1, matrix.data.shape[1]))
        return ((matrix, gm),)

    return _make(data, (matrix,), backward)


# -- network ops -------------------------------------------------------------


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 1-d convolution (cross-correlation form).

    x: B×C_in×T, kernel: C_out×C_in×k (k odd), bias: C_out.
    Time length is preserved; zero padding of k//2 on both ends.
    """
    xd, wd = x.data, kernel.data
    if xd.ndim != 3:
        raise DimensionError(f"conv1d input must be rank 3 (batch, channel, time), got {xd.shape}")
    if wd.ndim != 3:
        raise DimensionError(f"conv1d kernel must be rank 3 (out, in, width), got {wd.shape}")
    k = wd.shape[2]
    if k % 2 == 0:
        raise DimensionError(f"kernel width axis must be odd, got {k}")
    if xd.shape[1] != wd.shape[1]:
        raise DimensionError(
            f"channel axis mismatch: input has {xd.shape[1]} channels, kernel expects {wd.shape[1]}"
        )
    if bias is not None and bias.data.shape != (wd.shape[0],):
        raise DimensionError(
            f"bias axis mismatch: got shape {bias.data.shape}, kernel has {wd.shape[0]} output channels"
        )
    B, _, T = xd.shape
    c_out = wd.shape[0]
    pad = k // 2
    data = _corr1d(xd, wd, pad)
    if bias is not None:
        data += bias.data[None, :, None]
    need_x, need_w = _needs_grad(x), _needs_grad(kernel)

    def backward(g):
        grads = []
        if need_x:
            # correlate g with the kernel flipped in width and transposed in channels
            w_flip = wd[:, :, ::-1].transpose(1, 0, 2)
            gx = _corr1d(np.ascontiguousarray(g), np.ascontiguousarray(w_flip), pad)
            grads.append((x, gx))
        if need_w:
            # d/dw[o,c,j] = sum_{b,t} g[b,o,t] * x_pad[b,c,t+j]
            xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
            windows = sliding_window_view(xp, k, axis=2)  # B×C_in×T×k
            cols = windows.transpose(0, 2, 1, 3).reshape(B * T, -1)  # (B*T)×(C_in*k)
            gw = (g.transpose(1, 0, 2).reshape(c_out, B * T) @ cols).reshape(wd.shape)
            grads.append((kernel, gw))
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2))))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(data, parents, backward)


def _corr1d(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """out[b,o,t] = sum_{c,j} x_pad[b,c,t+j] * w[o,c,j] via im2col matmul."""
    B, _, T = x.shape
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    windows = sliding_window_view(xp, k, axis=2)  # B×C×T×k
    cols = windows.transpose(0, 2, 1, 3).reshape(B * T, -1)
    out = cols @ w.reshape(w.shape[0], -1).T  # (B*T)×C_out
    return np.ascontiguousarray(out.reshape(B, T, w.shape[0]).transpose(0, 2, 1))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope <= 1.0:
        raise ValueError(f"slope must lie in (0, 1], got {slope}")
    factor = np.where(x.data > 0, 1.0, slope)
    data = x.data * factor

    def backward(g):
        return ((x, g * factor),)

    return _make(data, (x,), backward)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the channel axis: first half content, second half gate."""
    if x.data.ndim != 3:
        raise DimensionError(f"glu expects rank-3 input, got {x.data.shape}")
    c2 = x.data.shape[1]
    if c2 % 2:
        raise DimensionError(f"glu channel axis must be even, got {c2}")
    c = c2 // 2
    a = x.data[:, :c]
    s = 1.0 / (1.0 + np.exp(-x.data[:, c:]))
    data = a * s

    def backward(g):
        gx = np.empty_like(x.data)
        gx[:, :c] = g * s
        gx[:, c:] = g * a * s * (1.0 - s)
        return ((x, gx),)

    return _make(data, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis independently per (batch, time) position."""
    if x.data.ndim != 3:
        raise DimensionError(f"layer_norm expects rank-3 input, got {x.data.shape}")
    C = x.data.shape[1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise DimensionError(
            f"affine parameters must have shape ({C},), got {gamma.data.shape} and {beta.data.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        gxhat = g * gamma.data[None, :, None]
        m1 = gxhat.mean(axis=1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        return ((x, gx), (gamma, ggamma), (beta, gbeta))

    return _make(data, (x, gamma, beta), backward)


def straight_through(z_e: Tensor, codes: Tensor) -> Tensor:
    """Quantizer pass-through: z_e + sg[codes - z_e].

    Forward takes the code values verbatim (bit-exact); backward copies
    the incoming gradient to ``z_e`` unchanged and sends nothing to
    ``codes``, so the codebook is only reachable through the loss terms
    that reference it directly.
    """
    if z_e.data.shape != codes.data.shape:
        raise DimensionError(
            f"shape mismatch between latents {z_e.data.shape} and codes {codes.data.shape}"
        )
    data = codes.data.copy()

    def backward(g):
        return ((z_e, g),)

    return _make(data, (z_e,), backward)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
