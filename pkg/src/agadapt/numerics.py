"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (the transformer, the guidance losses, the training
loop) is built from the operations here. All arrays are row-major float64;
gradients are exact analytic expressions and are certified against the
central-difference oracle `finite_diff_grad` in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import erf

from .errors import NumericError

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Probabilities below this are clamped before log() in cross_entropy.
CE_CLAMP = 1e-12

# How many times cross_entropy had to clamp a target-index probability.
# Clamping keeps early training alive instead of erroring out.
_ce_clamp_count = 0


def ce_clamp_count() -> int:
    return _ce_clamp_count


def reset_ce_clamp_count() -> None:
    global _ce_clamp_count
    _ce_clamp_count = 0


# ---------------------------------------------------------------------------
# Graph recording
# ---------------------------------------------------------------------------

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (fast inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus the tape bookkeeping for reverse-mode autodiff.

    Tensors are immutable once created (ops return new tensors); `grad` is
    populated by `backward()` on the loss node.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._grad_fn = grad_fn

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                    _unbroadcast(g, b.data.shape) if b.requires_grad else None)

        return _node(a.data + b.data, (a, b), grad_fn)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                    _unbroadcast(-g, b.data.shape) if b.requires_grad else None)

        return _node(a.data - b.data, (a, b), grad_fn)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            c = float(other)
            return _node(self.data * c, (self,), lambda g: (g * c,))
        other = as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            return (_unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
                    _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None)

        return _node(a.data * b.data, (a, b), grad_fn)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
            return (ga, gb)

        return _node(a.data @ b.data, (a, b), grad_fn)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _node(self.data.reshape(shape), (self,),
                     lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _node(self.data.transpose(axes), (self,),
                     lambda g: (g.transpose(inv),))

    def __getitem__(self, idx):
        shape = self.data.shape

        def grad_fn(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return _node(self.data[idx], (self,), grad_fn)

    # -- reductions and elementwise ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.data.shape
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).copy(),)

        return _node(out_data, (self,), grad_fn)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def exp(self):
        out_data = np.exp(self.data)
        return _node(out_data, (self,), lambda g: (g * out_data,))

    def log(self):
        x = self.data
        return _node(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return _node(out_data, (self,), lambda g: (g * 0.5 / out_data,))

    def clamp_min(self, floor: float):
        x = self.data
        mask = x > floor
        return _node(np.maximum(x, floor), (self,),
                     lambda g: (g * mask,))

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar node; fills `grad` on the graph."""
        if self.data.size != 1:
            raise NumericError("backward requires a scalar loss node")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is None:
                continue
            grads = node._grad_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over nodes that require grad; deterministic."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _node(data: Array, parents: tuple, grad_fn) -> Tensor:
    """Create an op node; drops tape bookkeeping when recording is off."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, grad_fn=grad_fn)
    return Tensor(data)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Parameter(Tensor):
    """Named leaf tensor. Frozen parameters never receive gradients and are
    never touched by the optimizer."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


# Gradients keyed by parameter name; values match parameter shapes.
GradientStore = dict[str, Array]


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def backward(loss: Tensor, params: Iterable[Parameter]) -> GradientStore:
    """Gradients of a scalar loss for every trainable parameter in `params`.

    Parameters not on the loss path get an all-zero entry, which keeps the
    optimizer loop uniform.
    """
    params = list(params)
    zero_grads(params)
    loss.backward()
    store: GradientStore = {}
    for p in params:
        if not p.trainable:
            continue
        store[p.name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return store


# ---------------------------------------------------------------------------
# Named operations
# ---------------------------------------------------------------------------

def gelu(t: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    t = as_tensor(t)
    x = t.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _node(out_data, (t,), grad_fn)


def softmax_rows(m) -> Tensor:
    """Row-stochastic softmax over the last axis.

    Masked entries are supplied as -inf and map to exactly 0. A fully masked
    row has no distribution to normalise and raises.
    """
    t = as_tensor(m)
    x = t.data
    mx = np.max(x, axis=-1, keepdims=True)
    if np.any(np.isneginf(mx)):
        raise NumericError("degenerate attention row")
    e = np.exp(x - mx)
    out_data = e / e.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(out_data)):
        raise NumericError("non-finite softmax output")

    def grad_fn(g):
        dot = (out_data * g).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return _node(out_data, (t,), grad_fn)


def cross_entropy(pred, targets_onehot, row_mask=None) -> Tensor:
    """-sum(y * log p) over all rows; `pred` rows are probability distributions.

    Target-index probabilities at or below CE_CLAMP are clamped (with a
    counter bump) rather than erroring, so early training survives.
    `row_mask` (same leading shape as the rows) excludes rows from the sum.
    """
    p = as_tensor(pred)
    y = np.asarray(targets_onehot, dtype=np.float64)
    if p.data.shape != y.shape:
        raise NumericError(
            f"cross_entropy shape mismatch: {p.data.shape} vs {y.shape}")
    row_sums = y.sum(axis=-1)
    if not np.allclose(row_sums, 1.0) or not np.all((y == 0.0) | (y == 1.0)):
        raise NumericError("targets must be one-hot rows")

    target_p = (p.data * y).sum(axis=-1)
    if row_mask is not None:
        mask = np.asarray(row_mask, dtype=np.float64)
        clamped_hits = int(np.sum((target_p <= CE_CLAMP) & (mask > 0)))
    else:
        mask = None
        clamped_hits = int(np.sum(target_p <= CE_CLAMP))
    if clamped_hits:
        global _ce_clamp_count
        _ce_clamp_count += clamped_hits

    picked = (p.clamp_min(CE_CLAMP).log() * y).sum(axis=-1)
    if mask is not None:
        picked = picked * Tensor(mask)
    loss = -(picked.sum())
    if not np.isfinite(loss.data):
        raise NumericError("non-finite cross-entropy")
    return loss


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis with learned gain and bias."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    bias = as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def grad_fn(g):
        dx = dgain = dbias = None
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            dgain = (g * xhat).sum(axis=axes)
        if bias.requires_grad:
            dbias = g.sum(axis=axes)
        return (dx, dgain, dbias)

    return _node(out_data, (x, gain, bias), grad_fn)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather: out[..., :] = weight[ids[...], :]."""
    ids = np.asarray(ids)
    w = as_tensor(weight)
    shape = w.data.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _node(w.data[ids], (w,), grad_fn)


def shift_rows(t: Tensor, axis: int = 1) -> Tensor:
    """Shift forward by one along `axis`; position 0 becomes zeros.

    Used to align next-token predictions so that output row n depends only
    on inputs strictly before n.
    """
    t = as_tensor(t)
    out_data = np.zeros_like(t.data)
    src = [slice(None)] * t.data.ndim
    dst = [slice(None)] * t.data.ndim
    src[axis] = slice(None, -1)
    dst[axis] = slice(1, None)
    out_data[tuple(dst)] = t.data[tuple(src)]

    def grad_fn(g):
        gi = np.zeros_like(g)
        gi[tuple(src)] = g[tuple(dst)]
        return (gi,)

    return _node(out_data, (t,), grad_fn)


_causal_masks: dict[int, Array] = {}


def causal_mask(n: int) -> Array:
    """Additive (n, n) mask: 0 on/below the diagonal, -inf above."""
    m = _causal_masks.get(n)
    if m is None:
        m = np.triu(np.full((n, n), -np.inf), k=1)
        _causal_masks[n] = m
    return m


def attention_map(q, k, causal: bool = True, extra_mask: Array | None = None) -> Tensor:
    """Row-stochastic attention map softmax(q k^T / sqrt(d)).

    Accepts (..., n, d) stacks; `extra_mask` is an additive mask broadcast
    onto the score matrix (used for padded key positions).
    """
    q = as_tensor(q)
    k = as_tensor(k)
    d = q.data.shape[-1]
    if d == 0:
        raise NumericError("attention requires key/query dimension >= 1")
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(d))
    if causal:
        n_q = q.data.shape[-2]
        n_k = k.data.shape[-2]
        if n_q != n_k:
            raise NumericError("causal attention requires square maps")
        scores = scores + Tensor(causal_mask(n_q))
    if extra_mask is not None:
        scores = scores + Tensor(extra_mask)
    return softmax_rows(scores)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """AdamW state: per-parameter moments plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adamw_step(state: OptimizerState, params: Mapping[str, Parameter],
               grads: GradientStore) -> None:
    """One AdamW update in place. Weight decay is decoupled: it scales the
    parameter directly instead of entering the moment estimates."""
    for name in grads:
        if name not in params:
            raise NumericError(f"gradient for unknown parameter {name!r}")
        p = params[name]
        if not p.trainable:
            raise NumericError(f"gradient supplied for frozen parameter {name!r}")
        if grads[name].shape != p.data.shape:
            raise NumericError(
                f"gradient shape {grads[name].shape} does not match "
                f"parameter {name!r} shape {p.data.shape}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if state.weight_decay != 0.0:
            p.data *= (1.0 - state.lr * state.weight_decay)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= state.lr * update
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"non-finite parameter after update: {name!r}")


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Array], float], p: Array, h: float = 1e-4) -> Array:
    """Central-difference gradient of scalar `f` at `p`, one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    base = np.array(p, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base.copy()))
        flat[i] = orig - h
        fm = float(f(base.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_coordinate(f: Callable[[Array], float], p: Array, index: tuple,
                           h: float = 1e-4) -> float:
    """Central difference along a single coordinate of `p`."""
    base = np.array(p, dtype=np.float64)
    orig = base[index]
    base[index] = orig + h
    fp = float(f(base.copy()))
    base[index] = orig - h
    fm = float(f(base.copy()))
    base[index] = orig
    return (fp - fm) / (2.0 * h)
