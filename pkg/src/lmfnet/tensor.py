"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a float32/float64 numpy array. Every differentiable
operation records its parents and a closure mapping the upstream gradient to
one gradient per parent; :meth:`Tensor.backward` walks the recorded graph in
reverse topological order and accumulates into ``.grad`` of the leaves.

Only the operations the segmentation network needs are provided. Binary
elementwise operations accept equal shapes, scalars, or a trailing-suffix
operand (bias-style); anything else raises :class:`DimensionError`, so a
modality axis can never be broadcast by accident.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, NumericError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
DEFAULT_DTYPE = np.dtype(np.float32)

_grad_enabled = True


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
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        dtype = np.dtype(dtype)
        if dtype not in FLOAT_DTYPES:
            raise ConfigError(f"unsupported dtype {dtype}; use float32 or float64")
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """n-dimensional float array that can take part in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic attributes -------------------------------------------------
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

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"implicit gradient needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"gradient shape {grad.shape} does not match output shape {self.shape}")

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis: int):
        return tmax(self, axis)

    def astype(self, dtype):
        return cast(self, dtype)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    # Python/numpy scalars adopt the dtype of the tensor operand.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if int(np.prod(small)) == 1:
        return
    if len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small):
        return
    raise DimensionError(f"{op}: shapes {a} and {b} are not compatible (only equal, scalar or trailing-suffix operands)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.shape, b.shape, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.shape, b.shape, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.shape, b.shape, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.shape, b.shape, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def power(x: Tensor, exponent: float) -> Tensor:
    e = float(exponent)

    def backward(g):
        return (g * e * x.data ** (e - 1.0),)

    return _result(x.data ** e, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def cast(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    src = x.dtype
    return _result(x.data.astype(dtype), (x,), lambda g: (g.astype(src),))


# -- activations ------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (smooth, so finite differences behave)."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _result(out.astype(x.dtype), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilised by subtracting the running max."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    return softmax(x, axis)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if rng is None:
        raise ConfigError("dropout in training mode needs an explicit RNG")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# -- reductions -------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward)


def sorted_sum(x: Tensor, axis: int = -1) -> Tensor:
    """Sum along one axis after sorting it, so the result is bit-identical under any reordering."""
    ax = axis % x.ndim
    # contiguous copy: numpy's reduction order depends on memory layout
    out = np.ascontiguousarray(np.sort(x.data, axis=ax)).sum(axis=ax)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return div(tsum(x, axis, keepdims), float(count))


def tmax(x: Tensor, axis: int) -> Tensor:
    """Maximum along one axis.

    The backward pass routes the upstream gradient to a single argmax entry
    per output element (the first on ties), so the routed mass equals the
    upstream gradient exactly.
    """
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), backward)


# -- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Explicit axis rearrangement; the result is materialised contiguous."""
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


transpose = permute


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g) if _is_fancy(index) else gx.__setitem__(index, gx[index] + g)
        return (gx,)

    return _result(np.array(out, dtype=x.dtype), (x,), backward)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("stack of zero tensors")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise DimensionError(f"stack: shape {t.shape} differs from {first}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _result(out, tensors, backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(t.ndim) if d != ax
        ):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {tensors[0].shape} on axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _result(out, tensors, backward)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (dropping that axis)."""
    ax = axis % x.ndim

    def backward(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[ax] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _result(np.take(x.data, index, axis=ax), (x,), backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with identical batch extents, or a 2-D right operand."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``y[..., j] = sum_i x[..., i] w[i, j] + b[j]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} does not match weight shape {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match weight shape {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(y.reshape(lead + (w.shape[1],)), parents, backward)


# -- normalisation ----------------------------------------------------------

def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise every trailing slice to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {scale.shape}/{shift.shape} vs input {x.shape}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * scale.data + shift.data

    def backward(g):
        gx = gs = gb = None
        if x.requires_grad:
            gxhat = g * scale.data
            gx = rstd * (
                gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if scale.requires_grad:
            gs = (g * xhat).reshape(-1, d).sum(axis=0)
        if shift.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gs, gb

    return _result(out.astype(x.dtype), (x, scale, shift), backward)


# -- convolutions -----------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def _triple(v) -> tuple[int, int, int]:
    return (int(v),) * 3 if np.isscalar(v) else tuple(int(i) for i in v)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over (B, Cin, H, W).

    ``groups`` is either 1 (dense) or the channel count (depthwise, weight
    shaped (C, 1, kh, kw)).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ConfigError("conv2d stride must be >= 1")
    B, C, H, W = x.shape
    cout, cin_g, kh, kw = w.shape
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise DimensionError(f"conv2d: kernel {(kh, kw)} larger than padded input {(H + 2 * ph, W + 2 * pw)}")
    if groups == 1:
        if cin_g != C:
            raise DimensionError(f"conv2d: input channels {C} vs kernel {w.shape}")
        out = _conv2d_dense(x, w, (sh, sw), (ph, pw))
    elif groups == C and cout == C and cin_g == 1:
        out = _conv2d_depthwise(x, w, (sh, sw), (ph, pw))
    else:
        raise ConfigError(f"conv2d supports groups=1 or groups=channels, got groups={groups} for {w.shape}")
    if b is not None:
        if b.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {b.shape} vs {cout} output channels")
        out = add_channel_bias(out, b)
    return out


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to a channel-second tensor (B, C, ...)."""
    if b.shape != (x.shape[1],):
        raise DimensionError(f"channel bias {b.shape} vs input {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        return g, g.sum(axis=red)

    return _result(x.data + b.data.reshape(view), (x, b), backward)


def _out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _conv2d_dense(x: Tensor, w: Tensor, stride, padding) -> Tensor:
    (sh, sw), (ph, pw) = stride, padding
    B, C, H, W = x.shape
    cout, _, kh, kw = w.shape
    Ho, Wo = _out_extent(H, kh, sh, ph), _out_extent(W, kw, sw, pw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), backward)


def _conv2d_depthwise(x: Tensor, w: Tensor, stride, padding) -> Tensor:
    (sh, sw), (ph, pw) = stride, padding
    B, C, H, W = x.shape
    _, _, kh, kw = w.shape
    Ho, Wo = _out_extent(H, kh, sh, ph), _out_extent(W, kw, sw, pw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    k = w.data[:, 0]

    def window(arr, i, j):
        return arr[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw]

    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += window(xp, i, j) * k[:, i, j][None, :, None, None]

    def backward(g):
        gw = np.zeros_like(w.data) if w.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=x.dtype) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gw is not None:
                    gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, window(xp, i, j))
                if gxp is not None:
                    window(gxp, i, j)[...] += g * k[:, i, j][None, :, None, None]
        gx = None if gxp is None else gxp[:, :, ph:ph + H, pw:pw + W]
        return gx, gw

    return _result(out, (x, w), backward)


def grouped_conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, padding=1, groups: int | None = None) -> Tensor:
    """Channel-grouped 3-D cross-correlation with stride 1, groups equal to channels.

    ``x`` is (B, C, D, H, W) and ``w`` is (C, 1, kd, kh, kw): kernel ``c`` only
    ever sees channel ``c``.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"grouped_conv3d expects 5-D input and kernel, got {x.shape} and {w.shape}")
    B, C, D, H, W = x.shape
    groups = C if groups is None else groups
    if groups != C:
        raise ConfigError(f"grouped_conv3d needs groups == channels ({C}), got {groups}")
    if w.shape[0] != C or w.shape[1] != 1:
        raise DimensionError(f"grouped_conv3d kernel {w.shape} incompatible with {C} channels")
    kd, kh, kw = w.shape[2:]
    pd, ph, pw = _triple(padding)
    Do, Ho, Wo = D + 2 * pd - kd + 1, H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    if min(Do, Ho, Wo) < 1:
        raise DimensionError(f"grouped_conv3d: kernel {(kd, kh, kw)} larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    k = w.data[:, 0]
    out = np.zeros((B, C, Do, Ho, Wo), dtype=x.dtype)
    offsets = [(a, i, j) for a in range(kd) for i in range(kh) for j in range(kw)]
    for a, i, j in offsets:
        out += xp[:, :, a:a + Do, i:i + Ho, j:j + Wo] * k[:, a, i, j][None, :, None, None, None]

    def backward(g):
        gw = np.zeros_like(w.data) if w.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=x.dtype) if x.requires_grad else None
        for a, i, j in offsets:
            if gw is not None:
                gw[:, 0, a, i, j] = np.einsum("bcdhw,bcdhw->c", g, xp[:, :, a:a + Do, i:i + Ho, j:j + Wo])
            if gxp is not None:
                gxp[:, :, a:a + Do, i:i + Ho, j:j + Wo] += g * k[:, a, i, j][None, :, None, None, None]
        gx = None if gxp is None else gxp[:, :, pd:pd + D, ph:ph + H, pw:pw + W]
        return gx, gw

    out_t = _result(out, (x, w), backward)
    if b is not None:
        out_t = add_channel_bias(out_t, b)
    return out_t


# -- resampling -------------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel (align_corners=False) convention."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of (B, C, H, W) to (B, C, out_h, out_w)."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"resize target must be positive, got {(out_h, out_w)}")
    if x.ndim != 4:
        raise DimensionError(f"resize_bilinear expects (B, C, H, W), got {x.shape}")
    H, W = x.shape[2:]
    if (H, W) == (out_h, out_w):
        return x
    mh = bilinear_matrix(H, out_h, x.dtype)
    mw = bilinear_matrix(W, out_w, x.dtype)
    out = np.einsum("oh,bchw,pw->bcop", mh, x.data, mw, optimize=True)

    def backward(g):
        return (np.einsum("oh,bcop,pw->bchw", mh, g, mw, optimize=True),)

    return _result(out, (x,), backward)


# -- loss -------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, target: np.ndarray, ignore_label: int | None = 255) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over non-ignored positions.

    ``logits`` is (B, C, ...) and ``target`` the matching (B, ...) integer map.
    """
    target = np.asarray(target)
    C = logits.shape[1]
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"cross entropy: target {target.shape} vs logits {logits.shape}")
    valid = np.ones(target.shape, dtype=bool) if ignore_label is None else target != ignore_label
    count = int(valid.sum())
    if count == 0:
        raise NumericError("cross entropy undefined: every position is ignored")
    tv = target[valid]
    if tv.size and (tv.min() < 0 or tv.max() >= C):
        raise DimensionError(f"cross entropy: target labels outside [0, {C})")
    z = np.moveaxis(logits.data, 1, -1)
    z = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    safe_t = np.where(valid, target, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / count

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe_t[..., None], np.take_along_axis(p, safe_t[..., None], axis=-1) - 1.0, axis=-1)
        p *= (valid / count)[..., None]
        return (np.moveaxis(p * g, -1, 1).astype(logits.dtype),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# -- verification -----------------------------------------------------------

def grad_errors(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Per-parameter relative error between backprop and central differences.

    For each parameter tensor the error is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)``
    over the checked entries. ``max_entries`` subsamples large tensors.
    """
    params = list(params)
    names = [getattr(p, "name", None) or f"param[{i}]" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, p in zip(names, params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient for parameter {name!r}")
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise RuntimeError(f"parameter {name!r} is not contiguous")
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric[k] = (fp - fm) / (2 * h)
        if not np.all(np.isfinite(numeric)):
            raise NumericError(f"non-finite numeric gradient for parameter {name!r}")
        ana = analytic.reshape(-1)[idx]
        denom = max(np.abs(ana).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        errors[name] = float(np.abs(ana - numeric).max(initial=0.0) / denom)
    return errors


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Maximum relative gradient error over ``params`` (see :func:`grad_errors`)."""
    errs = grad_errors(f, params, h=h, max_entries=max_entries, seed=seed)
    return max(errs.values(), default=0.0)
