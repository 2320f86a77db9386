"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation records a ``_Node`` holding its parents and a
closure mapping the output gradient to one gradient per parent.  ``backward``
walks the recorded graph in reverse topological order.

Only the operators needed by the denoiser and the segmenter are provided.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class _GradMode(threading.local):
    # per thread, so concurrent samplers cannot leave recording switched off
    recording = True


_grad_mode = _GradMode()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the calling thread (inference only)."""
    previous = _grad_mode.recording
    _grad_mode.recording = False
    try:
        yield
    finally:
        _grad_mode.recording = previous


class _Node:
    __slots__ = ("parents", "backward_fn", "op")

    def __init__(self, parents, backward_fn, op):
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    """Dense array with optional gradient tape linkage."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tape_node(self):
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_mode.recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward_fn, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# backward


def backward(loss: Tensor, accumulate: bool = False) -> None:
    """Populate ``grad`` on every leaf tensor reachable from ``loss``.

    Existing leaf gradients are overwritten unless ``accumulate`` is set.
    Gradients are only stored on leaves (tensors without a tape node).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise GraphError("loss was not produced by recorded operations")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in reversed(t._node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            if t.requires_grad:
                if accumulate and t.grad is not None:
                    t.grad = t.grad + g
                else:
                    t.grad = np.array(g, dtype=t.data.dtype, copy=True)
            continue
        parent_grads = t._node.backward_fn(g)
        for p, pg in zip(t._node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "mul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bw, "reshape")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def bw(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _make(out, (x,), bw, "silu")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.data.size
        axes = tuple(range(x.data.ndim))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.data.ndim for a in axes)
        count = int(np.prod([x.shape[a] for a in axes]))

    def bw(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, "mean")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or t.shape[:1] + t.shape[2:] != ref[:1] + ref[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(out, tensors, bw, "concat_channels")


def upsample_nearest_2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest_2x expects NCHW input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw, "upsample_nearest_2x")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in) and ``weight`` (out, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "linear")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and (Cout, Cin, k, k) kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input {x.shape} has {cin} channels but kernel {weight.shape} expects {wcin}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} incompatible with kernel {weight.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {x.shape}")

    if stride == 1:
        return _conv2d_shifted(x, weight, bias, padding)

    # strided: channels-last im2col, rows (n, ho, wo), columns (ki, kj, cin)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    xl = x.data.transpose(0, 2, 3, 1)
    if padding:
        xl = np.pad(xl, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((n, ho, wo, k, k, cin), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xl[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, k * k * cin)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gx = gw = None
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, k, k, cin)
            gxl = np.zeros((n, h + 2 * padding, w + 2 * padding, cin), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxl[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            if padding:
                gxl = gxl[:, padding:padding + h, padding:padding + w, :]
            gx = np.ascontiguousarray(gxl.transpose(0, 3, 1, 2))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def _conv2d_shifted(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int) -> Tensor:
    """Stride-1 convolution as k*k GEMMs over shifted windows of one flat padded buffer.

    The padded channels-last input is flattened to rows (n, y, x); the tap at
    (i, j) reads the same buffer offset by i*Wp + j rows.  Rows that straddle
    a padding column or an item boundary produce garbage that is cropped.
    """
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - k + 1, wp - k + 1
    dtype = x.data.dtype
    xl = np.zeros((n, hp, wp, cin), dtype=dtype)
    xl[:, padding:padding + h, padding:padding + w, :] = x.data.transpose(0, 2, 3, 1)
    flat = xl.reshape(-1, cin)
    total = flat.shape[0]
    span = total - ((k - 1) * wp + (k - 1))
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # (k, k, cin, cout)
    offsets = [(i, j, i * wp + j) for i in range(k) for j in range(k)]

    acc = np.zeros((total, cout), dtype=dtype)
    for i, j, off in offsets:
        acc[:span] += flat[off:off + span] @ taps[i, j]
    out = acc.reshape(n, hp, wp, cout)[:, :ho, :wo, :]
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gbig = np.zeros((n, hp, wp, cout), dtype=g.dtype)
        gbig[:, :ho, :wo, :] = g.transpose(0, 2, 3, 1)
        gflat = gbig.reshape(-1, cout)[:span]
        gx = gw = None
        if weight.requires_grad:
            gtaps = np.empty((k, k, cin, cout), dtype=g.dtype)
            for i, j, off in offsets:
                gtaps[i, j] = flat[off:off + span].T @ gflat
            gw = np.ascontiguousarray(gtaps.transpose(3, 2, 0, 1))
        if x.requires_grad:
            gin = np.zeros((total, cin), dtype=g.dtype)
            for i, j, off in offsets:
                gin[off:off + span] += gflat @ taps[i, j].T
            gin = gin.reshape(n, hp, wp, cin)[:, padding:padding + h, padding:padding + w, :]
            gx = np.ascontiguousarray(gin.transpose(0, 3, 1, 2))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine params {gamma.shape}/{beta.shape} do not match {c} channels")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "group_norm")


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_over_channels(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"softmax_over_channels expects (N, C, ...), got {x.shape}")
    p = np.exp(_log_softmax(x.data, 1))

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax_over_channels")


def cross_entropy_per_pixel(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-pixel negative log-likelihood map of shape (N, H, W).

    ``targets`` holds integer class ids and carries no gradient.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 4 or targets.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"cross_entropy_per_pixel: logits {logits.shape} incompatible with targets {targets.shape}")
    nclass = logits.shape[1]
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= nclass:
        raise ValueError(f"cross_entropy_per_pixel: target labels must lie in [0, {nclass})")
    logp = _log_softmax(logits.data, 1)
    idx = targets[:, None, :, :].astype(np.intp)
    out = -np.take_along_axis(logp, idx, axis=1)[:, 0]

    def bw(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, idx, 1.0, axis=1)
        return ((grad - onehot) * g[:, None, :, :],)

    return _make(out, (logits,), bw, "cross_entropy_per_pixel")


def mse(a: Tensor, b) -> Tensor:
    """Mean squared error over every element (scalar)."""
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    count = diff.size
    out = np.asarray((diff * diff).sum() / count, dtype=a.dtype)

    def bw(g):
        gd = (2.0 / count) * diff * g
        return (gd if a.requires_grad else None, -gd if b.requires_grad else None)

    return _make(out, (a, b), bw, "mse")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
