"""Dense NCHW tensors with define-by-run reverse-mode differentiation.

Only the handful of operations the fusion network uses are provided.  Every
op builds a new :class:`Tensor` holding its forward value and a closure that
maps the output gradient to one gradient per input.  :func:`backward` sorts
the recorded graph topologically and sweeps it in reverse.

Arrays stay in numpy; ``float64`` is the reference precision and ``float32``
is accepted for faster training.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import GradientError, ShapeError

_DTYPES = (np.float32, np.float64)
_NAME_RE = re.compile(r"^[A-Za-z0-9_./]+$")


class Tensor:
    """A value in the computation graph.

    ``op`` tags the operation that produced the tensor (``"leaf"`` for
    inputs and parameters); ``grad`` is filled in by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim < 1 or arr.ndim > 4:
            raise ShapeError(f"tensor rank must be 1..4, got {arr.ndim}", axis="rank")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return multiply(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class Parameter:
    """A named tensor owned by a model."""

    name: str
    tensor: Tensor
    trainable: bool = True

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ValueError(f"invalid parameter name {self.name!r}")
        self.tensor.requires_grad = self.trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray):
        self.tensor.data = value

    @property
    def shape(self):
        return self.tensor.shape


@dataclass
class BNState:
    """Running statistics of one batch-normalisation layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-3
    track: bool = field(default=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_rank(t: Tensor, rank: int, what: str):
    if t.data.ndim != rank:
        raise ShapeError(f"{what} must have rank {rank}, got shape {t.shape}", axis="rank")


_AXES = ("batch", "channels", "height", "width")


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    """Return 'same', 'a1' (a has 1 channel) or 'b1'; raise otherwise."""
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == b.data.ndim == 4:
        for i, (da, db) in enumerate(zip(a.shape, b.shape)):
            if i != 1 and da != db:
                raise ShapeError(f"{_AXES[i]} mismatch: {a.shape} vs {b.shape}", axis=_AXES[i])
        if a.shape[1] == 1:
            return "a1"
        if b.shape[1] == 1:
            return "b1"
        raise ShapeError(f"channels mismatch: {a.shape} vs {b.shape}", axis="channels")
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}", axis="rank")


# ---------------------------------------------------------------------------
# element-wise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b)

    def backward(g):
        ga = g.sum(axis=1, keepdims=True) if kind == "a1" else g
        gb = g.sum(axis=1, keepdims=True) if kind == "b1" else g
        return ga, gb

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b)

    def backward(g):
        ga = g.sum(axis=1, keepdims=True) if kind == "a1" else g
        gb = -g.sum(axis=1, keepdims=True) if kind == "b1" else -g
        return ga, gb

    return _result(a.data - b.data, (a, b), backward, "sub")


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g * bd
            if kind == "a1":
                ga = ga.sum(axis=1, keepdims=True)
        if b.requires_grad:
            gb = g * ad
            if kind == "b1":
                gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return _result(ad * bd, (a, b), backward, "multiply")


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def logit(x, eps: float = 1e-7) -> Tensor:
    """log(y / (1 - y)) with y clamped to [eps, 1 - eps]."""
    x = as_tensor(x)
    y = np.clip(x.data, eps, 1.0 - eps)
    inside = (x.data >= eps) & (x.data <= 1.0 - eps)

    def backward(g):
        return (g * inside / (y * (1.0 - y)),)

    return _result(np.log(y) - np.log1p(-y), (x,), backward, "logit")


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _result(np.atleast_1d(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return _result(np.atleast_1d(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def concat_channels(xs: Sequence) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty sequence", axis="channels")
    ref = xs[0]
    for t in xs:
        _check_rank(t, 4, "concat input")
        for i in (0, 2, 3):
            if t.shape[i] != ref.shape[i]:
                raise ShapeError(f"{_AXES[i]} mismatch in concat: {ref.shape} vs {t.shape}", axis=_AXES[i])
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return _result(np.concatenate([t.data for t in xs], axis=1), xs, backward, "concat")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _padding_amount(kh, kw, padding):
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"'same' padding needs odd kernels, got {kh}x{kw}", axis="kernel")
        return kh // 2, kw // 2
    if padding == "valid":
        return 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x, w, b=None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of ``x`` [N,Cin,H,W] with ``w`` [Cout,Cin,kh,kw]."""
    x, w = as_tensor(x), as_tensor(w)
    _check_rank(x, 4, "conv2d input")
    _check_rank(w, 4, "conv2d kernel")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"channels mismatch: input has {cin}, kernel expects {wcin}", axis="channels")
    ph, pw = _padding_amount(kh, kw, padding)
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{wd}", axis="height")
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"bias shape {b.shape} does not match {cout} output channels", axis="channels")
        parents.append(b)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (wd + 2 * pw - kw) // stride + 1
    # im2col: rows ordered (cin, i, j) to match w.reshape(cout, -1)
    if kh == kw == 1 and stride == 1:
        cols = xp.reshape(n, cin, ho * wo)
    else:
        cols = np.empty((n, cin, kh, kw, ho, wo), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(n, cin * kh * kw, ho * wo)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        g2 = g.reshape(n, cout, ho * wo)
        if w.requires_grad:
            gw = sum(g2[k] @ cols[k].T for k in range(n)).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            if kh == kw == 1 and stride == 1:
                gx = gcols.reshape(n, cin, h, wd)
            else:
                gcols = gcols.reshape(n, cin, kh, kw, ho, wo)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
                gx = gxp[:, :, ph:ph + h, pw:pw + wd]
        if b is not None:
            gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb
        return gx, gw

    return _result(out, parents, backward, "conv2d")


def _depthwise_cols(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[N,C,kh*kw,H*W] shifted copies of zero-padded ``x``."""
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, h, w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c, kh * kw, h * w)


def _depthwise(x: np.ndarray, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    kh, kw = k.shape[1:]
    cols = _depthwise_cols(x, kh, kw)
    out = np.matmul(k.reshape(c, 1, kh * kw), cols).reshape(n, c, h, w)
    return out, cols


def depthwise_conv2d(x, w) -> Tensor:
    """Per-channel 'same' convolution; ``w`` is [C,1,kh,kw]."""
    x, w = as_tensor(x), as_tensor(w)
    _check_rank(x, 4, "depthwise input")
    _check_rank(w, 4, "depthwise kernel")
    n, c, h, wd = x.shape
    if w.shape[0] != c or w.shape[1] != 1:
        raise ShapeError(f"depthwise kernel {w.shape} does not match {c} channels", axis="channels")
    kh, kw = w.shape[2:]
    _padding_amount(kh, kw, "same")
    k = w.data[:, 0]
    out, cols = _depthwise(x.data, k)

    def backward(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.matmul(cols, g.reshape(n, c, h * wd, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            # adjoint of a stride-1 'same' correlation: correlate with the flipped kernel
            gx, _ = _depthwise(g, np.ascontiguousarray(k[:, ::-1, ::-1]))
        return gx, gw

    return _result(out, (x, w), backward, "depthwise_conv2d")


def sepconv2d(x, w_dw, w_pw, b=None) -> Tensor:
    """Depthwise 'same' convolution followed by a pointwise 1x1 convolution."""
    return conv2d(depthwise_conv2d(x, w_dw), w_pw, b, stride=1, padding="same")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _check_divisible(x: Tensor, factor: int, what: str):
    _check_rank(x, 4, what)
    h, w = x.shape[2:]
    if factor < 1:
        raise ValueError("pooling factor must be >= 1")
    if h % factor:
        raise ShapeError(f"height {h} not divisible by {factor}", axis="height")
    if w % factor:
        raise ShapeError(f"width {w} not divisible by {factor}", axis="width")


def maxpool2(x) -> Tensor:
    x = as_tensor(x)
    _check_divisible(x, 2, "maxpool2 input")
    d = x.data
    q = (d[:, :, 0::2, 0::2], d[:, :, 0::2, 1::2], d[:, :, 1::2, 0::2], d[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))

    def backward(g):
        # route each window's gradient to its first maximal element
        gx = np.zeros_like(d)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), qi in zip(((0, 0), (0, 1), (1, 0), (1, 1)), q):
            hit = (qi == out) & ~taken
            taken |= hit
            gx[:, :, i::2, j::2] = g * hit
        return (gx,)

    return _result(out, (x,), backward, "maxpool2")


def _avg2(d: np.ndarray) -> np.ndarray:
    return (d[:, :, 0::2, 0::2] + d[:, :, 0::2, 1::2] + d[:, :, 1::2, 0::2] + d[:, :, 1::2, 1::2]) * 0.25


def avgpool2(x, factor: int = 2) -> Tensor:
    """Mean over non-overlapping ``factor`` x ``factor`` windows."""
    x = as_tensor(x)
    _check_divisible(x, factor, "avgpool input")
    n, c, h, w = x.shape
    f = factor
    if f == 2:
        out = _avg2(x.data)
    else:
        out = x.data.reshape(n, c, h // f, f, w // f, f).sum(axis=5).sum(axis=3) * (1.0 / (f * f))

    def backward(g):
        return (np.repeat(np.repeat(g * (1.0 / (f * f)), f, axis=2), f, axis=3),)

    return _result(out.astype(x.dtype, copy=False), (x,), backward, "avgpool")


def _up2_axis(a: np.ndarray, axis: int) -> np.ndarray:
    """Half-pixel bilinear 2x along one axis with edge clamping."""
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def upsample2(x) -> Tensor:
    x = as_tensor(x)
    _check_rank(x, 4, "upsample2 input")
    out = np.ascontiguousarray(_up2_axis(_up2_axis(x.data, 2), 3))

    def backward(g):
        return (np.ascontiguousarray(_up2_axis_adjoint(_up2_axis_adjoint(g, 3), 2)),)

    return _result(out, (x,), backward, "upsample2")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def batchnorm(x, gamma, beta, state: BNState, mode: str = "train") -> Tensor:
    """Per-channel batch normalisation.

    In ``train`` mode batch statistics are used and, if ``state.track``,
    the running averages in ``state`` are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_rank(x, 4, "batchnorm input")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(f"{name} shape {t.shape} does not match {c} channels", axis="channels")
    eps = state.eps
    gd = gamma.data[None, :, None, None]
    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if state.track:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1 - m) * mean
            state.running_var = m * state.running_var + (1 - m) * var
    elif mode == "infer":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = (gd * xhat + beta.data[None, :, None, None]).astype(x.dtype, copy=False)
    count = x.data.size // c

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if mode == "train":
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv_std[None, :, None, None] / count * (count * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward, "batchnorm")


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, params: Mapping[str, Parameter] | Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable tensor.

    Returns a map name -> gradient for ``params`` (trainable ones only);
    parameters the root does not depend on get zeros.
    """
    if root.data.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
    if params is None:
        plist = []
    elif isinstance(params, Mapping):
        plist = list(params.values())
    else:
        plist = list(params)

    order = _topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.dtype, copy=True)
            else:
                parent.grad += g
        if node is not root:
            # free interior buffers early; leaves keep theirs
            node.grad = None if node._parents else node.grad

    reached = {id(n) for n in order}
    out = {}
    for p in plist:
        if not p.trainable:
            continue
        g = p.tensor.grad if id(p.tensor) in reached else None
        if g is None:
            p.tensor.grad = g = np.zeros_like(p.data)
        out[p.name] = g
    return out
