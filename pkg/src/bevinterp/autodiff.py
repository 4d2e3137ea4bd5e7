"""Dense float64 tensor engine with reverse-mode automatic differentiation.

Every operation records its inputs and a vector-Jacobian callback on the
output node; ``backward`` replays the recorded graph in reverse topological
order exactly once. Float64 everywhere keeps finite-difference checks tight.
"""

from __future__ import annotations

import numpy as np


class NumericError(ValueError):
    """Non-finite values where a finite-domain op requires them."""


class ShapeError(ValueError):
    """Shape or rank contract violation."""


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


class Tensor:
    """A float64 array plus an optional gradient buffer.

    Intermediate tensors carry the parent links and the vjp closure that
    propagates their gradient; leaves carry neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = _as_f64(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"expected scalar tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Named, freezable wrapper around a leaf tensor.

    A frozen parameter never receives a gradient: freezing clears
    ``requires_grad`` on the underlying tensor, so no graph is recorded
    through it and optimizer steps cannot touch it.
    """

    def __init__(self, name: str, data, frozen: bool = False):
        self.name = name
        self.tensor = Tensor(data, requires_grad=not frozen)
        self._frozen = bool(frozen)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool):
        self._frozen = bool(value)
        self.tensor.requires_grad = not self._frozen
        if self._frozen:
            self.tensor.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self):
        return self.tensor.data.shape

    @property
    def count(self) -> int:
        return int(self.tensor.data.size)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self._frozen})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    return Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    The recorded graph is linearized once (iterative post-order) and each
    node's vjp runs exactly once, in reverse topological order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


def _make(data, parents, vjp) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _make(-a.data, (a,), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * c)

    return _make(a.data * c, (a,), vjp)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    out_data = np.matmul(a.data, b.data)

    def vjp(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), vjp)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    orig = a.shape

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), vjp)


def pad_axis(a, axis: int, before: int, after: int) -> Tensor:
    a = as_tensor(a)
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(before, before + a.shape[axis])
    sl = tuple(sl)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g[sl])

    return _make(np.pad(a.data, widths), (a,), vjp)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def vjp(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[sl] = g
            _accumulate(a, full)

    return _make(a.data[sl], (a,), vjp)


# -- reductions ---------------------------------------------------------------

def _restore_axes(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, _restore_axes(g, a.shape, axis, keepdims))

    return _make(out_data, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.data.size / max(out_data.size, 1)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, _restore_axes(g, a.shape, axis, keepdims) / denom)

    return _make(out_data, (a,), vjp)


# -- nonlinearities -----------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = _sigmoid_np(a.data)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), vjp)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic on a plain array (no graph)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_sigmoid_np = sigmoid_np


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably; gradient is sigmoid(x)."""
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * _sigmoid_np(a.data))

    return _make(out_data, (a,), vjp)


def texp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * out_data)

    return _make(out_data, (a,), vjp)


def tlog(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), vjp)


def tsqrt(a) -> Tensor:
    """Elementwise square root; gradient undefined at exactly zero."""
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * 0.5 / out_data)

    return _make(out_data, (a,), vjp)


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out_data = np.power(a.data, p)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * p * np.power(a.data, p - 1.0))

    return _make(out_data, (a,), vjp)


def smooth_l1(a) -> Tensor:
    """Huber at delta=1: 0.5 x^2 inside, |x| - 0.5 outside."""
    a = as_tensor(a)
    absd = np.abs(a.data)
    out_data = np.where(absd < 1.0, 0.5 * a.data * a.data, absd - 0.5)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * np.clip(a.data, -1.0, 1.0))

    return _make(out_data, (a,), vjp)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"maximum needs equal shapes, got {a.shape} vs {b.shape}")
    take_a = a.data >= b.data

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * take_a)
        if b.requires_grad:
            _accumulate(b, g * ~take_a)

    return _make(np.where(take_a, a.data, b.data), (a, b), vjp)


# -- row-structured ops -------------------------------------------------------

def softmax_rows(m, scl: float = 1.0) -> Tensor:
    """Row-wise softmax of m/scl for a rank-2 tensor.

    Max-subtraction keeps saturated rows exact; every output row sums to 1.
    """
    m = as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows requires rank-2 input, got {m.shape}")
    if not np.isfinite(m.data).all():
        raise NumericError("softmax_rows input contains non-finite values")
    if not scl > 0:
        raise NumericError(f"softmax scale must be positive, got {scl}")
    z = m.data / scl
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        if m.requires_grad:
            inner = (g * s).sum(axis=1, keepdims=True)
            _accumulate(m, s * (g - inner) / scl)

    return _make(s, (m,), vjp)


def layer_norm_rows(x, eps: float = 1e-5) -> Tensor:
    """Normalize each row of a rank-2 tensor to mean 0, variance 1.

    Population variance with an eps floor; the learnable affine is applied
    by the caller.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"layer_norm_rows requires rank-2 input, got {x.shape}")
    n = x.shape[1]
    if n < 2:
        raise ShapeError("layer_norm_rows requires at least 2 columns")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def vjp(g):
        if x.requires_grad:
            gm = g.mean(axis=1, keepdims=True)
            gx = (g * xhat).mean(axis=1, keepdims=True)
            _accumulate(x, inv * (g - gm - xhat * gx))

    return _make(xhat, (x,), vjp)


# -- spatial ops --------------------------------------------------------------

def max_pool2d(a, k: int) -> Tensor:
    """Max pool a [C,H,W] tensor with kernel = stride = k."""
    a = as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"max_pool2d expects [C,H,W], got {a.shape}")
    c, h, w = a.shape
    if h % k or w % k:
        raise ShapeError(f"pool size {k} does not divide spatial dims {h}x{w}")
    ho, wo = h // k, w // k
    win = a.data.reshape(c, ho, k, wo, k).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        if a.requires_grad:
            gw = np.zeros_like(win)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            ga = gw.reshape(c, ho, wo, k, k).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
            _accumulate(a, ga)

    return _make(out_data, (a,), vjp)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution of x [Cin,H,W] with w [Cout,Cin,kh,kw] (im2col + GEMM)."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x [Cin,H,W], w [Cout,Cin,kh,kw], got {x.shape}, {w.shape}")
    cin, h, ww = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: x has {cin}, w expects {cin_w}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (ww + 2 * pad - kw) // stride + 1
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    view = view[:, ::stride, ::stride]                       # [Cin,Ho,Wo,kh,kw]
    cols = view.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
    w2d = w.data.reshape(cout, cin * kh * kw)
    out2d = w2d @ cols
    if b is not None:
        out2d = out2d + b.data[:, None]
    out_data = out2d.reshape(cout, ho, wo)

    def vjp(g):
        g2d = g.reshape(cout, ho * wo)
        if w.requires_grad:
            _accumulate(w, (g2d @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, g2d.sum(axis=1))
        if x.requires_grad:
            gcols = w2d.T @ g2d                               # [Cin*kh*kw, Ho*Wo]
            gview = gcols.reshape(cin, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + ho * stride:stride, j:j + wo * stride:stride] += gview[:, i, j]
            _accumulate(x, gxp[:, pad:pad + h, pad:pad + ww] if pad else gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, vjp)


def conv1x1(x, w, b=None) -> Tensor:
    """Channel-mixing 1x1 convolution: x [Cin,H,W], w [Cout,Cin]."""
    x, w = as_tensor(x), as_tensor(w)
    cin, h, ww = x.shape
    flat = reshape(x, (cin, h * ww))
    out = matmul(w, flat)
    if b is not None:
        out = add(out, reshape(as_tensor(b), (w.shape[0], 1)))
    return reshape(out, (w.shape[0], h, ww))


# -- oracles ------------------------------------------------------------------

def finite_diff_gradient(f, p: Parameter, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f(p) w.r.t. every element of p."""
    if not h > 0:
        raise ValueError("h must be positive")
    flat = p.tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = _scalar(f(p))
        flat[i] = orig - h
        down = _scalar(f(p))
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(p.tensor.data.shape)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)
