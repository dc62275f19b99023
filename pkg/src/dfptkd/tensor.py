"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a node (parents + backward rule) so :func:`backward` can
replay them in reverse topological order. Only float32 and float64 are
supported and the two are never mixed implicitly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


class ShapeError(ValueError):
    pass


class DTypeError(TypeError):
    pass


class GradientError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_float_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        dtype = np.dtype(dtype)
        if dtype not in _FLOAT_DTYPES:
            raise DTypeError(f"unsupported dtype {dtype}; use float32 or float64")
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
        return data
    if isinstance(data, np.generic) and data.dtype in _FLOAT_DTYPES:
        return np.asarray(data)
    return np.asarray(data, dtype=DEFAULT_DTYPE)


class Tensor:
    """n-dimensional float array with optional gradient tracking."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if not self.is_leaf:
            raise GradientError("requires_grad can only be changed on leaf tensors")
        self.requires_grad = flag
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return elementwise(self, other, "add")

    def __radd__(self, other):
        return elementwise(other, self, "add")

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __rsub__(self, other):
        return elementwise(other, self, "sub")

    def __mul__(self, other):
        return elementwise(self, other, "mul")

    def __rmul__(self, other):
        return elementwise(other, self, "mul")

    def __truediv__(self, other):
        return elementwise(self, other, "div")

    def __rtruediv__(self, other):
        return elementwise(other, self, "div")

    def __neg__(self):
        return _unary(self, -self.data, lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, axis, "max", keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def backward(self, grad: np.ndarray | None = None):
        return backward(self, grad=grad)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def _lift(x, like: np.dtype | None) -> Tensor:
    """Wrap python/numpy scalars and arrays as constant tensors."""
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0):
        return Tensor(np.asarray(x, dtype=like or DEFAULT_DTYPE))
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(like or DEFAULT_DTYPE)
    return Tensor(arr)


def _check_dtypes(*ts: Tensor) -> None:
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise DTypeError(f"mixed dtypes {sorted(str(d) for d in dts)}; cast explicitly")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _unary(x: Tensor, data: np.ndarray, backward_fn, op: str) -> Tensor:
    return _result(data, (x,), backward_fn, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def elementwise(a, b, op: str) -> Tensor:
    """Broadcasting binary op, ``op`` in {add, sub, mul, div}."""
    like = a.dtype if isinstance(a, Tensor) else (b.dtype if isinstance(b, Tensor) else None)
    a = _lift(a, like)
    b = _lift(b, like)
    _check_dtypes(a, b)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    if op == "add":
        data = ad + bd

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)
    elif op == "sub":
        data = ad - bd

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)
    elif op == "mul":
        data = ad * bd

        def bw(g):
            ga = _unbroadcast(g * bd, sa) if a.requires_grad else None
            gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
            return ga, gb
    elif op == "div":
        if np.any(bd == 0):
            raise ZeroDivisionError("division by a tensor containing zeros")
        data = ad / bd

        def bw(g):
            ga = _unbroadcast(g / bd, sa) if a.requires_grad else None
            gb = _unbroadcast(-g * ad / (bd * bd), sb) if b.requires_grad else None
            return ga, gb
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    assert data.shape == out_shape
    return _result(data, (a, b), bw, op)


def power(x: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    xd = x.data
    return _unary(x, xd ** e, lambda g: (g * e * xd ** (e - 1),), "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _unary(x, out, lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise ValueError("log of non-positive value")
    return _unary(x, np.log(xd), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,), "relu")


# -- reductions ------------------------------------------------------------

def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(t: Tensor, axes=None, mode: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum/mean/max over ``axes``. Max sends its gradient to the first maximum."""
    axes = _normalize_axes(axes, t.ndim)
    shape = t.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    count = int(np.prod([shape[i] for i in axes])) if axes else 1

    if mode == "sum":
        data = t.data.sum(axis=axes, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept), shape).copy(),)
    elif mode == "mean":
        data = t.data.mean(axis=axes, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept) / count, shape).astype(t.dtype),)
    elif mode == "max":
        if count == 0:
            raise ShapeError("max over empty axes")
        rest = tuple(i for i in range(t.ndim) if i not in axes)
        moved = np.transpose(t.data, rest + axes)
        flat = moved.reshape(moved.shape[: len(rest)] + (count,))
        first = np.argmax(flat, axis=-1)  # argmax returns the first maximal index
        data = np.take_along_axis(flat, first[..., None], axis=-1)[..., 0]
        if keepdims:
            data = data.reshape(kept)

        def bw(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, first[..., None], g.reshape(first.shape)[..., None], axis=-1)
            gmoved = gflat.reshape(moved.shape)
            return (np.transpose(gmoved, np.argsort(rest + axes)),)
    else:
        raise ValueError(f"unknown reduce mode {mode!r}")
    return _result(np.asarray(data, dtype=t.dtype), (t,), bw, mode)


# -- shape ops -------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _unary(x, data, lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _unary(x, data, lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    data = x.data[index]
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        gx = np.zeros_like(x.data)
        if fancy:
            np.add.at(gx, index, g)
        else:
            gx[index] = g
        return (gx,)

    return _unary(x, np.array(data, copy=True), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _check_dtypes(*tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, bw, "concat")


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    a = _lift(a, None)
    b = _lift(b, a.dtype)
    _check_dtypes(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


# -- convolution -----------------------------------------------------------

def _im2col(xt: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Channel-major patches of a padded (C, N, H, W) array: (C, kh, kw, N, OH, OW)."""
    c, n = xt.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xt.dtype)
    he, we = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + he:stride, j:j + we:stride]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with symmetric zero padding."""
    parents = (x, weight) if bias is None else (x, weight, bias)
    _check_dtypes(*parents)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OCkk weight, got {x.shape}, {weight.shape}")
    n, c, h, w_ = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    hp, wp = h + 2 * padding, w_ + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d degenerate output: padded input {hp}x{wp} < kernel {kh}x{kw}")
    oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xt = x.data.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == kw == 1 and stride == 1:
        cols = np.ascontiguousarray(xt).reshape(c, n * oh * ow)
    else:
        cols = _im2col(xt, kh, kw, stride, oh, ow).reshape(c * kh * kw, n * oh * ow)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = (wmat @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = gw = gb = None
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * oh * ow)
        if weight.requires_grad:
            gw = (gt @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (wmat.T @ gt).reshape(c, kh, kw, n, oh, ow)
            gxt = np.zeros((c, n, hp, wp), dtype=g.dtype)
            he, we = stride * (oh - 1) + 1, stride * (ow - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i:i + he:stride, j:j + we:stride] += gcols[:, i, j]
            gx = np.ascontiguousarray(gxt[:, :, padding:padding + h, padding:padding + w_].transpose(1, 0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(out, parents, bw, "conv2d")


# -- normalization / softmax ----------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray | None = None,
               var: np.ndarray | None = None, eps: float = 1e-5):
    """Per-channel normalization of NCHW input.

    With ``mean``/``var`` given, those statistics are used (eval mode). Otherwise
    batch statistics are computed; returns ``(out, batch_mean, batch_var)`` where
    batch_var is the biased estimate.
    """
    _check_dtypes(x, gamma, beta)
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm channel mismatch: {x.shape} vs {gamma.shape}")
    gd = gamma.data[None, :, None, None]
    if mean is not None:
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)[None, :, None, None]
        xhat = (x.data - mean.astype(x.dtype)[None, :, None, None]) * inv_std
        out = xhat * gd + beta.data[None, :, None, None]

        def bw(g):
            return g * gd * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _result(out, (x, gamma, beta), bw, "batch_norm_eval"), None, None

    m = x.shape[0] * x.shape[2] * x.shape[3]
    bmean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - bmean[None, :, None, None]
    bvar = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(bvar + eps)).astype(x.dtype)[None, :, None, None]
    xhat = centered * inv_std
    out = xhat * gd + beta.data[None, :, None, None]

    def bw(g):
        dxhat = g * gd
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = inv_std * (dxhat - s1 / m - xhat * s2 / m)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(out, (x, gamma, beta), bw, "batch_norm"), bmean, bvar


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    zd = z.data
    shifted = zd - zd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _unary(z, out, bw, "log_softmax")


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(z, axis))


# -- autodiff driver -------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    """The tape: nodes reachable from ``root``, each after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None,
             inputs: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from leaf tensor to the gradient contributed by this call. If
    ``inputs`` is given, the map holds exactly those tensors, with zeros for any
    not reachable from ``loss``.
    """
    if grad is None:
        if loss.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    result: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                result[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if inputs is not None:
        out = {}
        for t in inputs:
            out[t] = result.get(t, np.zeros_like(t.data))
        return out
    return result


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences."""
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with _enable_grad():
        y = f(leaf)
        analytic = backward(y, inputs=[leaf])[leaf]
    base = x.data.copy()
    numeric = np.zeros_like(base)
    with no_grad():
        for i in np.ndindex(base.shape):
            orig = base[i]
            base[i] = orig + eps
            fp = float(f(Tensor(base.copy())).data)
            base[i] = orig - eps
            fm = float(f(Tensor(base.copy())).data)
            base[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


@contextlib.contextmanager
def _enable_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev
