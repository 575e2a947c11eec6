"""Dense tensors with tape-based reverse-mode differentiation.

The op vocabulary is deliberately coarse (matmul, softmax, relu, conv2d,
reductions, ...) so that a forward pass through the whole segmentation
network records only a few dozen nodes.  Values are float32 by default;
wrap gradient checks in ``precision(np.float64)``.

Gradient semantics: leaves (tensors created with ``requires_grad=True``,
including every :class:`Parameter`) accumulate into ``.grad`` across
``backward`` calls until the caller zeroes them.  Intermediate results never
keep a ``.grad``.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DimensionError, NumericError, UsageError

_state = {"dtype": np.dtype(np.float32), "grad_enabled": True}


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference)."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable tensor with its SGD momentum buffer."""

    __slots__ = ("name", "momentum_buffer", "frozen")

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.momentum_buffer = np.zeros_like(self.data)
        self.frozen = False

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a forward result and record it on the tape.

    ``backward_fn(grad)`` returns one gradient (or ``None``) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _topo(root: Tensor) -> List[Tensor]:
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


def backward(loss: Tensor):
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------- ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return make_op(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if a.ndim == 2 and g.ndim > 2 and b.ndim == g.ndim:
                lead = tuple(range(g.ndim - 2))
                ga = np.tensordot(g, b.data, axes=(lead + (g.ndim - 1,), lead + (b.ndim - 1,)))
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_op(out, (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def activation(x, kind: str = "relu") -> Tensor:
    if kind != "relu":
        raise ConfigError(f"unsupported activation {kind!r}")
    return relu(x)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (x,), bw)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(out, (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    inv = np.argsort(axes)
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def clamp_min(x, floor: float) -> Tensor:
    x = as_tensor(x)
    keep = x.data >= floor
    return make_op(np.maximum(x.data, floor).astype(x.dtype), (x,), lambda g: (g * keep,))


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale slices to unit norm; zero-norm slices map to zero with zero gradient."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    nz = norm > 0
    safe = np.where(nz, norm, 1)
    y = np.where(nz, x.data / safe, 0).astype(x.dtype)

    def bw(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(nz, (g - y * proj) / safe, 0),)

    return make_op(y, (x,), bw)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite values in {what}")
    return x


def cross_entropy(logits, labels, ignore_index: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood over non-ignored rows of ``logits[P, K]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy expects logits [P,K] with P labels, "
                             f"got {logits.shape} and {labels.shape}")
    k = logits.shape[1]
    valid = np.ones(labels.shape, bool) if ignore_index is None else labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        p = int(np.flatnonzero(bad)[0])
        raise DataError(f"label {int(labels[p])} at pixel {p} outside [0, {k})")
    n = int(valid.sum())
    z = logits.data
    if n == 0:
        return make_op(np.asarray(0.0, dtype=z.dtype), (logits,), lambda g: (np.zeros_like(z),))
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.flatnonzero(valid)
    tgt = labels[rows].astype(np.int64)
    loss = (lse[rows] - shifted[rows, tgt]).sum() / n

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, tgt] -= 1
        p[~valid] = 0
        return (p * (g / n),)

    return make_op(np.asarray(loss, dtype=z.dtype), (logits,), bw)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NHWC input, weight ``[kh, kw, Cin, Cout]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    kh, kw, cin, cout = w.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    bsz, hp, wp, _ = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # win: [B, Ho, Wo, Cin, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(bsz, ho, wo, cout)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g @ w.data[i, j].T
            gx = gxp[:, padding:hp - padding, padding:wp - padding, :] if padding else gxp
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    return make_op(out, parents, bw)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over every axis but the last.

    In training mode the batch statistics are used and the running buffers
    (plain arrays) are updated in place with the unbiased variance; in
    evaluation mode the running buffers are used and nothing is mutated.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: {c} channels but affine shapes {gamma.shape}, {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    n = x.data.size // c
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (n / max(n - 1, 1))
        running_mean *= 1 - momentum
        running_mean += (momentum * mu).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += (momentum * unbiased).astype(running_var.dtype)
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = (xhat * gamma.data + beta.data).astype(x.dtype)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        if training:
            gx = (gamma.data * inv / n) * (n * g - gb - xhat * gg)
        else:
            gx = g * (gamma.data * inv)
        return gx.astype(x.dtype), gg, gb

    return make_op(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- optimizer


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0):
    """Heavy-ball SGD with L2 weight decay folded into the gradient.

    buf <- momentum * buf + (grad + weight_decay * value); value <- value - lr * buf.
    Gradients are left in place; the caller zeroes them.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for p in params:
        if p.frozen or p.grad is None:
            continue
        d = p.grad + weight_decay * p.data if weight_decay else p.grad
        if momentum:
            p.momentum_buffer *= momentum
            p.momentum_buffer += d
        else:
            p.momentum_buffer[...] = d
        p.data -= (lr * p.momentum_buffer).astype(p.dtype)


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# ------------------------------------------------------------ grad checking


@dataclass
class GradReport:
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    max_abs_error: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-6
    checked: int = 0

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    # spec name
    @property
    def pass_(self) -> bool:
        return self.passed

    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel={self.worst():.3e} over {self.checked} coords"


def _param_name(p: Tensor, i: int) -> str:
    return getattr(p, "name", None) or f"param{i}"


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-6, max_coords: Optional[int] = None, seed: int = 0,
               denom_floor: float = 1e-3,
               analytic: Optional[Sequence[np.ndarray]] = None) -> GradReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, denom_floor)``;
    the floor keeps round-off on near-zero gradients from dominating.  With
    ``max_coords`` set, a seeded random subset of coordinates is checked per
    parameter.  ``analytic`` overrides the backward result (negative controls).
    """
    for p in params:
        if p.dtype != np.float64:
            raise ConfigError("grad_check requires float64 parameters; use precision(np.float64)")
    for p in params:
        p.grad = None
    loss = f()
    if loss.data.size != 1:
        raise UsageError("grad_check needs a scalar function")
    if not np.isfinite(loss.data):
        raise NumericError("grad_check: f is not finite at the base point")
    backward(loss)
    if analytic is None:
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    report = GradReport(tolerance=tol)
    rs = np.random.default_rng(seed)
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rs.choice(flat.size, size=max_coords, replace=False))
        a_flat = np.asarray(analytic[i]).reshape(-1)
        worst_rel = worst_abs = 0.0
        with no_grad():
            for j in idx:
                orig = flat[j]
                flat[j] = orig + eps
                fp = float(f().data)
                flat[j] = orig - eps
                fm = float(f().data)
                flat[j] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"grad_check: f not finite near {_param_name(p, i)}[{j}]")
                num = (fp - fm) / (2 * eps)
                a = float(a_flat[j])
                err = abs(a - num)
                worst_abs = max(worst_abs, err)
                worst_rel = max(worst_rel, err / max(abs(a), abs(num), denom_floor))
        name = _param_name(p, i)
        report.max_rel_error[name] = worst_rel
        report.max_abs_error[name] = worst_abs
        report.checked += len(idx)
    for p in params:
        p.grad = None
    return report


def uniform_init(rs: np.random.Generator, shape, fan_in: int, dtype=None) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rs.uniform(-bound, bound, size=shape).astype(dtype or default_dtype())
