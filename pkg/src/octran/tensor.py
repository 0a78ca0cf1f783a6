"""A small dense-tensor engine with trace-based reverse-mode differentiation.

Every differentiable op is a `Function` subclass registered in `OPS`; calling
`Function.apply` runs the numpy forward kernel and, when any input requires a
gradient, records the function on the output so `Tensor.backward` can replay
the trace in reverse.

Checked mode (`with checked():`) raises on non-finite results and swaps the
BLAS matmul and attention reductions for kernels whose summation order does
not depend on the position of a row, so outputs are bit-stable under
permutations of independent rows.
"""
from __future__ import annotations

import contextlib
import math
import struct
from collections import defaultdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class TensorError(Exception):
    pass


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class TraceError(TensorError, RuntimeError):
    pass


class _State:
    grad_enabled = True
    checked = False
    ledgers: list["FlopLedger"] = []


@contextlib.contextmanager
def no_grad():
    prev = _State.grad_enabled
    _State.grad_enabled = False
    try:
        yield
    finally:
        _State.grad_enabled = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    prev = _State.checked
    _State.checked = enabled
    try:
        yield
    finally:
        _State.checked = prev


def is_checked() -> bool:
    return _State.checked


class FlopLedger:
    """Multiply-accumulate counts per named op, for one recording session.

    Only forward kernels record; backward passes are not counted.
    """

    def __init__(self):
        self.macs: dict[str, int] = defaultdict(int)

    def record(self, name: str, macs: int) -> None:
        if macs < 0:
            raise ValueError("MAC counts are non-negative")
        self.macs[name] += int(macs)

    def __getitem__(self, name: str) -> int:
        return self.macs.get(name, 0)

    @property
    def total(self) -> int:
        return sum(self.macs.values())

    def __enter__(self):
        _State.ledgers.append(self)
        return self

    def __exit__(self, *exc):
        _State.ledgers.remove(self)


def record_macs(name: str, macs: int) -> None:
    if _State.ledgers:
        _State.ledgers[-1].record(name, macs)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._ctx: Function | None = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _toposort(self) -> list["Tensor"]:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for p in node._ctx.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return order

    def backward(self, grad=None) -> None:
        if self._ctx is None:
            raise TraceError("backward() called on a tensor with no recorded op")
        if grad is None:
            if self.size != 1:
                raise TraceError(f"implicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(self._toposort()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            fn = node._ctx
            if fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if OPS.get(fn.name) is not type(fn):
                raise TraceError(f"op {fn.name!r} is not in the op registry")
            for p, pg in zip(fn.parents, fn.backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise TraceError(f"{fn.name}: gradient shape {pg.shape} != input shape {p.shape}")
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    # operators
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def permute(self, *axes): return permute(self, axes)
    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def relu(self): return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


OPS: dict[str, type["Function"]] = {}


def register(name: str):
    def deco(cls):
        cls.name = name
        OPS[name] = cls
        return cls
    return deco


class Function:
    name = "<unregistered>"

    def __init__(self, parents: tuple[Tensor, ...]):
        self.parents = parents

    def forward(self, *arrays, **kw) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *args, **kw) -> Tensor:
        parents = tuple(as_tensor(a) for a in args)
        fn = cls(parents)
        out = Tensor(fn.forward(*(p.data for p in parents), **kw))
        if _State.checked and not np.all(np.isfinite(out.data)):
            raise NonFiniteError(f"{cls.name} produced non-finite values")
        if _State.grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._ctx = fn
        return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise ---------------------------------------------------------------

@register("add")
class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "add")
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


@register("sub")
class Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "sub")
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


@register("mul")
class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return unbroadcast(g * self.b, self.a.shape), unbroadcast(g * self.a, self.b.shape)


@register("div")
class Div(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "div")
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        return (unbroadcast(g / self.b, self.a.shape),
                unbroadcast(-g * self.a / self.b**2, self.b.shape))


@register("neg")
class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


@register("relu")
class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, g):
        return (g * self.mask,)


@register("sigmoid")
class Sigmoid(Function):
    def forward(self, a):
        self.out = _sigmoid(a)
        return self.out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


@register("exp")
class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


def _sigmoid(a):
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def add(a, b): return Add.apply(a, b)
def sub(a, b): return Sub.apply(a, b)
def mul(a, b): return Mul.apply(a, b)
def div(a, b): return Div.apply(a, b)
def neg(a): return Neg.apply(a)
def relu(a): return Relu.apply(a)
def sigmoid(a): return Sigmoid.apply(a)
def exp(a): return Exp.apply(a)


# --- matmul ----------------------------------------------------------------------

def _exact_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # each output element sums its q products in index order, independent of its row
    return (a[..., :, :, None] * b[..., None, :, :]).sum(axis=-2)


def _matmul_kernel(a, b):
    return _exact_matmul(a, b) if _State.checked else np.matmul(a, b)


@register("matmul")
class MatMul(Function):
    def forward(self, a, b, tag="matmul"):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
        try:
            batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
        p, q = a.shape[-2:]
        r = b.shape[-1]
        record_macs(tag, math.prod(batch) * p * q * r)
        self.a, self.b = a, b
        return _matmul_kernel(a, b)

    def backward(self, g):
        ga = np.matmul(g, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), g)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


def matmul(a, b, tag: str = "matmul") -> Tensor:
    return MatMul.apply(a, b, tag=tag)


# --- reductions and shape ops ----------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@register("sum")
class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _norm_axes(axis, a.ndim)
        return a.sum(axis=self.axes, keepdims=keepdims)

    def backward(self, g):
        g = np.expand_dims(g, tuple(ax for ax in self.axes)) if g.ndim != len(self.shape) else g
        return (np.broadcast_to(g, self.shape).copy(),)


@register("mean")
class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _norm_axes(axis, a.ndim)
        self.n = math.prod(a.shape[ax] for ax in self.axes)
        return a.mean(axis=self.axes, keepdims=keepdims)

    def backward(self, g):
        g = np.expand_dims(g, self.axes) if g.ndim != len(self.shape) else g
        return (np.broadcast_to(g / self.n, self.shape).copy(),)


@register("reshape")
class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None

    def backward(self, g):
        return (g.reshape(self.shape),)


@register("permute")
class Permute(Function):
    def forward(self, a, axes):
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"permute: {tuple(axes)} is not a permutation of {a.ndim} axes")
        self.inv = tuple(np.argsort(axes))
        return np.transpose(a, axes)

    def backward(self, g):
        return (np.transpose(g, self.inv),)


@register("getitem")
class GetItem(Function):
    def forward(self, a, idx):
        self.shape, self.idx = a.shape, idx
        return a[idx]

    def backward(self, g):
        out = np.zeros(self.shape)
        np.add.at(out, self.idx, g)
        return (out,)


@register("concat")
class Concat(Function):
    def forward(self, *arrays, axis=0):
        ref = arrays[0]
        ax = axis % ref.ndim
        for arr in arrays[1:]:
            if arr.ndim != ref.ndim or any(
                arr.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
            ):
                raise ShapeError(f"concat on axis {axis}: shapes {ref.shape} and {arr.shape} differ")
        self.axis = ax
        self.splits = np.cumsum([arr.shape[ax] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=ax)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


def tsum(a, axis=None, keepdims=False): return Sum.apply(a, axis=axis, keepdims=keepdims)
def mean(a, axis=None, keepdims=False): return Mean.apply(a, axis=axis, keepdims=keepdims)
def reshape(a, shape): return Reshape.apply(a, shape=tuple(shape))
def permute(a, axes): return Permute.apply(a, axes=tuple(axes))
def getitem(a, idx): return GetItem.apply(a, idx=idx)
def concat(tensors, axis=0): return Concat.apply(*tensors, axis=axis)


# --- softmax, normalisation, losses ------------------------------------------------------

def _stable_softmax(a, axis):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@register("softmax")
class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        self.out = _stable_softmax(a, axis)
        return self.out

    def backward(self, g):
        p = self.out
        return (p * (g - (g * p).sum(axis=self.axis, keepdims=True)),)


@register("log_softmax")
class LogSoftmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        z = a - a.max(axis=axis, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        self.p = np.exp(out)
        return out

    def backward(self, g):
        return (g - self.p * g.sum(axis=self.axis, keepdims=True),)


@register("layer_norm")
class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps=1e-5):
        if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs input {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        xhat = self.xhat
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = g * self.gamma
        dx = self.inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta


@register("bce_with_logits")
class BCEWithLogits(Function):
    """Weighted mean binary cross-entropy on logits: sum(w * l) / sum(w)."""

    def forward(self, logits, target, weight):
        if logits.shape != target.shape or logits.shape != weight.shape:
            raise ShapeError(f"bce: logits {logits.shape}, target {target.shape}, weight {weight.shape}")
        total = weight.sum()
        if total <= 0:
            raise ValueError("bce: no voxel carries weight")
        self.p = _sigmoid(logits)
        self.target, self.weight, self.total = target, weight, total
        per = np.maximum(logits, 0) - logits * target + np.log1p(np.exp(-np.abs(logits)))
        return np.asarray((weight * per).sum() / total)

    def backward(self, g):
        return g * self.weight * (self.p - self.target) / self.total, None, None


def softmax(a, axis=-1): return Softmax.apply(a, axis=axis)
def log_softmax(a, axis=-1): return LogSoftmax.apply(a, axis=axis)
def layer_norm(x, gamma, beta, eps=1e-5): return LayerNorm.apply(x, gamma, beta, eps=eps)
def bce_with_logits(logits, target, weight): return BCEWithLogits.apply(logits, target, weight)


def cross_entropy(logits, onehot) -> Tensor:
    """Mean softmax cross-entropy over rows; gradient w.r.t. logits is (p - onehot) / rows."""
    rows = math.prod(logits.shape[:-1])
    return neg(tsum(mul(log_softmax(logits, -1), onehot))) / rows


# --- attention kernel --------------------------------------------------------------------

def _ordered_sum(a: np.ndarray, axis: int) -> np.ndarray:
    # sorting first makes the result a function of the multiset of terms only
    return np.sort(a, axis=axis).sum(axis=axis)


@register("attention")
class ScaledDotProductAttention(Function):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes.

    q: (..., M_q, d_k), k: (..., M_k, d_k), v: (..., M_k, d_v).
    """

    def forward(self, q, k, v):
        if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2] \
                or k.shape[:-2] != v.shape[:-2]:
            raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are not compatible")
        dk = q.shape[-1]
        if dk == 0:
            raise ShapeError("attention: d_k must be > 0")
        batch = math.prod(q.shape[:-2])
        mq, mk, dv = q.shape[-2], k.shape[-2], v.shape[-1]
        record_macs("attn.scores", batch * mq * mk * dk)
        record_macs("attn.values", batch * mq * mk * dv)
        self.scale = 1.0 / math.sqrt(dk)
        if _State.checked:
            s = (q[..., :, None, :] * k[..., None, :, :]).sum(axis=-1) * self.scale
            e = np.exp(s - s.max(axis=-1, keepdims=True))
            p = e / _ordered_sum(e, -1)[..., None]
            out = _ordered_sum(p[..., :, :, None] * v[..., None, :, :], -2)
        else:
            s = np.matmul(q, np.swapaxes(k, -1, -2)) * self.scale
            p = _stable_softmax(s, -1)
            out = np.matmul(p, v)
        self.q, self.k, self.v, self.p = q, k, v, p
        return out

    def backward(self, g):
        p = self.p
        dv = np.matmul(np.swapaxes(p, -1, -2), g)
        dp = np.matmul(g, np.swapaxes(self.v, -1, -2))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * self.scale
        dq = np.matmul(ds, self.k)
        dk = np.matmul(np.swapaxes(ds, -1, -2), self.q)
        return dq, dk, dv


def attention(q, k, v) -> Tensor:
    return ScaledDotProductAttention.apply(q, k, v)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """The softmax weight matrix used by `attention` (no trace)."""
    s = np.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(q.shape[-1])
    return _stable_softmax(s, -1)


# --- convolutions ---------------------------------------------------------------------------

def _triple(x):
    return tuple(x) if isinstance(x, (tuple, list)) else (x, x, x)


def _pair(x):
    return tuple(x) if isinstance(x, (tuple, list)) else (x, x)


def conv2d_output_size(n: int, k: int, stride: int, padding: int) -> int:
    """floor((n + 2p - k) / s) + 1"""
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, padding: int) -> int:
    """(n - 1) * s - 2p + k"""
    return (n - 1) * stride - 2 * padding + k


@register("conv2d")
class Conv2d(Function):
    """Cross-correlation. x: (B, C_in, H, W), w: (C_out, C_in, kh, kw)."""

    def forward(self, x, w, stride=1, padding=0):
        sh, sw = _pair(stride)
        ph, pw = _pair(padding)
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not align")
        if sh < 1 or sw < 1:
            raise ShapeError(f"conv2d: stride must be >= 1, got {(sh, sw)}")
        B, cin, H, W = x.shape
        cout, _, kh, kw = w.shape
        ho, wo = conv2d_output_size(H, kh, sh, ph), conv2d_output_size(W, kw, sw, pw)
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"conv2d: kernel {(kh, kw)} needs padded input >= kernel, got {(H + 2 * ph, W + 2 * pw)}"
            )
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        out = np.zeros((B, ho, wo, cout))
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
                out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1]))
        record_macs("conv2d", B * ho * wo * cout * cin * kh * kw)
        self.xp, self.w, self.cfg = xp, w, (sh, sw, ph, pw, ho, wo)
        return out.transpose(0, 3, 1, 2)

    def backward(self, g):
        sh, sw, ph, pw, ho, wo = self.cfg
        xp, w = self.xp, self.w
        _, _, kh, kw = w.shape
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + sh * ho, sh), slice(j, j + sw * wo, sw))
                gw[:, :, i, j] = np.tensordot(g, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
                gxp[sl] += np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        H, W = xp.shape[2] - 2 * ph, xp.shape[3] - 2 * pw
        return gxp[:, :, ph:ph + H, pw:pw + W], gw


@register("conv_transpose3d")
class ConvTranspose3d(Function):
    """Transposed 3-D convolution. x: (B, C_in, D, H, W), w: (C_in, C_out, kd, kh, kw)."""

    def forward(self, x, w, stride=1, padding=0):
        s = _triple(stride)
        p = _triple(padding)
        if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"conv_transpose3d: input {x.shape} and kernel {w.shape} do not align")
        if min(s) < 1:
            raise ShapeError(f"conv_transpose3d: stride must be >= 1, got {s}")
        B, cin = x.shape[:2]
        spatial = x.shape[2:]
        cout = w.shape[1]
        k = w.shape[2:]
        full = [(n - 1) * si + ki for n, si, ki in zip(spatial, s, k)]
        outs = [conv_transpose_output_size(n, ki, si, pi) for n, ki, si, pi in zip(spatial, k, s, p)]
        if min(outs) < 1:
            raise ShapeError(f"conv_transpose3d: output size {outs} from input {spatial}, kernel {k}, padding {p}")
        acc = np.zeros((B, *full, cout))
        for a in range(k[0]):
            for b in range(k[1]):
                for c in range(k[2]):
                    contrib = np.tensordot(x, w[:, :, a, b, c], axes=([1], [0]))
                    acc[:, a:a + s[0] * spatial[0]:s[0], b:b + s[1] * spatial[1]:s[1],
                        c:c + s[2] * spatial[2]:s[2]] += contrib
        record_macs("conv_transpose3d", B * math.prod(spatial) * cin * cout * math.prod(k))
        self.x, self.w, self.s, self.p, self.full = x, w, s, p, full
        crop = acc[:, p[0]:p[0] + outs[0], p[1]:p[1] + outs[1], p[2]:p[2] + outs[2]]
        return np.ascontiguousarray(crop.transpose(0, 4, 1, 2, 3))

    def backward(self, g):
        x, w, s, p = self.x, self.w, self.s, self.p
        spatial = x.shape[2:]
        k = w.shape[2:]
        gfull = np.zeros((g.shape[0], g.shape[1], *self.full))
        gfull[:, :, p[0]:p[0] + g.shape[2], p[1]:p[1] + g.shape[3], p[2]:p[2] + g.shape[4]] = g
        gx = np.zeros((x.shape[0], *spatial, x.shape[1]))
        gw = np.zeros_like(w)
        for a in range(k[0]):
            for b in range(k[1]):
                for c in range(k[2]):
                    gs = gfull[:, :, a:a + s[0] * spatial[0]:s[0], b:b + s[1] * spatial[1]:s[1],
                               c:c + s[2] * spatial[2]:s[2]]
                    gx += np.tensordot(gs, w[:, :, a, b, c], axes=([1], [1]))
                    gw[:, :, a, b, c] = np.tensordot(x, gs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        return gx.transpose(0, 4, 1, 2, 3), gw


@register("upsample_nearest2d")
class UpsampleNearest2d(Function):
    def forward(self, x, factor=2):
        self.f = factor
        return x.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(self, g):
        B, C, H, W = g.shape
        f = self.f
        return (g.reshape(B, C, H // f, f, W // f, f).sum(axis=(3, 5)),)


def conv2d(x, w, stride=1, padding=0) -> Tensor:
    return Conv2d.apply(x, w, stride=stride, padding=padding)


def conv_transpose3d(x, w, stride=1, padding=0) -> Tensor:
    return ConvTranspose3d.apply(x, w, stride=stride, padding=padding)


def upsample_nearest2d(x, factor=2) -> Tensor:
    return UpsampleNearest2d.apply(x, factor=factor)


# --- gradient oracle ----------------------------------------------------------------------

def finite_difference_grad(f: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element of x."""
    if h <= 0:
        raise ValueError("step h must be > 0")
    x = np.array(x, dtype=DTYPE, copy=True)
    grad = np.empty_like(x)

    def value(arr):
        out = f(arr)
        return float(out.data if isinstance(out, Tensor) else out)

    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        fp = value(x)
        x[i] = orig - h
        fm = value(x)
        x[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max |a|, max |n|); 0 when both are identically zero."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(fn: Callable[..., Tensor], *inputs, h: float = 1e-5, seed: int = 0) -> list[float]:
    """Compare backward() of `fn` against central differences for every input.

    The scalar probed is sum(fn(*inputs) * R) for a fixed random R. Returns one
    relative error per input.
    """
    arrays = [np.asarray(a, dtype=DTYPE) for a in inputs]
    tensors = [parameter(a.copy()) for a in arrays]
    out = fn(*tensors)
    r = np.random.default_rng(seed).standard_normal(out.shape)
    tsum(mul(out, r)).backward()
    errors = []
    for i, a in enumerate(arrays):
        def probe(xi, i=i):
            args = [Tensor(arr) for arr in arrays]
            args[i] = Tensor(xi)
            with no_grad():
                return float((fn(*args).data * r).sum())
        numeric = finite_difference_grad(probe, a, h)
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(a)
        errors.append(relative_error(analytic, numeric))
    return errors


# --- TNSR container ---------------------------------------------------------------------------
# magic, u32 rank, rank x u32 dims, then float64 values row-major, all little-endian.

TNSR_MAGIC = b"TNSR"


class TensorFormatError(TensorError, ValueError):
    pass


def tnsr_bytes(x) -> bytes:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f8", order="C")
    header = TNSR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def parse_tnsr(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != TNSR_MAGIC:
        raise TensorFormatError(f"bad TNSR magic {bytes(buf[:4])!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    head = 8 + 4 * rank
    if len(buf) < head:
        raise TensorFormatError("TNSR header truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    n = math.prod(dims)
    if len(buf) != head + 8 * n:
        raise TensorFormatError(f"TNSR payload is {len(buf) - head} bytes, expected {8 * n}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=head).reshape(dims).astype(DTYPE)


def save_tensor(x, path) -> None:
    Path(path).write_bytes(tnsr_bytes(x))


def load_tensor(path) -> np.ndarray:
    return parse_tnsr(Path(path).read_bytes())
