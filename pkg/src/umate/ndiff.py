"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every op builds a node holding its parents and a closure that maps the
output gradient to parent gradients. ``backward`` walks the graph in
reverse topological order. Only what the umate models need is here:
dense linear algebra, a handful of pointwise functions, reductions,
indexing, softmax, layer norm and attention.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, untracked iterations)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "name")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_or_raise(arr, opname):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite output in op '{opname}'")


def _make(data, parents, backward, opname):
    """Wrap an op result; attach graph info only if some parent needs grad."""
    _finite_or_raise(data, opname)
    out = Tensor(data)
    out.op = opname
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), bw, "pow")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def _sigmoid_np(x):
    # branch-free stable logistic
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(a):
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    out = a.data * s
    return _make(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ContractViolation(f"matmul: {exc}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def einsum(spec, *operands):
    """Explicit-output einsum without ellipsis or repeated indices per operand."""
    operands = [as_tensor(t) for t in operands]
    if "->" not in spec or "." in spec:
        raise ContractViolation("einsum: spec needs explicit '->' and no ellipsis")
    lhs, out_sub = spec.replace(" ", "").split("->")
    subs = lhs.split(",")
    if len(subs) != len(operands):
        raise ContractViolation("einsum: operand count does not match spec")
    for s, t in zip(subs, operands):
        if len(s) != t.ndim or len(set(s)) != len(s):
            raise ContractViolation(f"einsum: bad subscripts '{s}' for shape {t.shape}")
    try:
        out = np.einsum(spec, *[t.data for t in operands], optimize=len(operands) > 2)
    except ValueError as exc:
        raise ContractViolation(f"einsum: {exc}") from None

    def bw(g):
        grads = []
        for i, (s, t) in enumerate(zip(subs, operands)):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [(subs[j], operands[j].data) for j in range(len(operands)) if j != i]
            present = set(out_sub).union(*[set(o) for o, _ in others]) if others else set(out_sub)
            keep = "".join(c for c in s if c in present)
            in_specs = ",".join([out_sub] + [o for o, _ in others])
            gi = np.einsum(f"{in_specs}->{keep}", g, *[d for _, d in others],
                           optimize=len(others) > 1)
            if keep != s:
                # indices summed only inside this operand: broadcast back
                shape = [t.shape[k] if c in keep else 1 for k, c in enumerate(s)]
                gi = np.broadcast_to(gi.reshape(shape), t.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return _make(np.asarray(out, dtype=np.float64), tuple(operands), bw, "einsum")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i, j):
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractViolation(f"reshape: {exc}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


sum = tsum  # noqa: A001  (module-level alias, mirrors numpy naming)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[k] for k in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def norm(a, axis=None, keepdims=False):
    """Euclidean / Frobenius norm; the gradient at an exactly-zero norm is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def bw(g):
        n = out
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            n = np.expand_dims(n, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)
        return (scale * a.data,)

    return _make(np.asarray(out), (a,), bw, "norm")


# ---------------------------------------------------------------- structure


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ContractViolation(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), bw, "stack")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    a = as_tensor(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), bw, "getitem")


def take(a, indices, axis=0):
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _make(out, (a,), bw, "take")


def where(cond, a, b):
    """Elementwise select; the unselected branch receives exactly zero gradient."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def bw(g):
        ga = np.where(cond, g, 0.0)
        gb = np.where(cond, 0.0, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "where")


def straight_through(x, target):
    """Forward value of ``target``; gradient passes to ``x`` unchanged (VQ rounding)."""
    x = as_tensor(x)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    return _make(target.copy(), (x,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------- nn building blocks


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        parents.append(gamma)
        out = out * gamma.data
    if beta is not None:
        beta = as_tensor(beta)
        parents.append(beta)
        out = out + beta.data
    d = x.shape[-1]

    def bw(g):
        gx_hat = g * gamma.data if gamma is not None else g
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)

    return _make(out, tuple(parents), bw, "layer_norm")


def cosine_similarity(a, b, axis=-1):
    """Row-wise cosine between broadcast-compatible ``a`` and ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    na = norm(a, axis=axis, keepdims=True)
    nb = norm(b, axis=axis, keepdims=True)
    if np.any(na.data == 0) or np.any(nb.data == 0):
        raise ContractViolation("cosine_similarity: zero-norm vector")
    return tsum((a / na) * (b / nb), axis=axis)


def pairwise_cosine(x):
    """(..., n, d) -> (..., n, n) matrix of cosine similarities between rows."""
    x = as_tensor(x)
    n = norm(x, axis=-1, keepdims=True)
    if np.any(n.data == 0):
        raise ContractViolation("pairwise_cosine: zero-norm row")
    u = x / n
    return matmul(u, swapaxes(u, -1, -2))


def scaled_dot_product_attention(q, k, v, key_mask=None):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes.

    ``key_mask`` is a boolean array broadcastable to (..., 1, n_keys); False
    entries are excluded from attention.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    dk = q.shape[-1]
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dk))
    if key_mask is not None:
        scores = scores + np.where(key_mask, 0.0, -1e30)
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------- backward


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss, params=None):
    """Reverse sweep from a scalar ``loss``.

    Returns a list of gradients aligned with ``params`` (zeros for params the
    loss does not touch). Leaf ``.grad`` attributes are also filled in.
    """
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                continue
            del grads[id(node)]
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
    if params is None:
        return None
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64))
    return out


def zero_grad(params):
    for p in params:
        p.grad = None


def grad_check(fn, params, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``fn(params)`` must return a scalar Tensor. Relative error per coordinate
    is |analytic - numeric| / (|numeric| + 1e-12).
    """
    if eps <= 0:
        raise ContractViolation("grad_check: eps must be positive")
    params = list(params)
    loss = fn(params)
    _finite_or_raise(as_tensor(loss).data, "grad_check")
    analytic = backward(loss, params)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(as_tensor(fn(params)).data)
                flat[i] = orig - eps
                fm = float(as_tensor(fn(params)).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("grad_check: non-finite function value")
                num = (fp - fm) / (2.0 * eps)
                err = abs(gflat[i] - num) / (abs(num) + 1e-12)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """In-place bias-corrected Adam update of ``params``; returns ``state``."""
    if len(params) != len(grads):
        raise ContractViolation("adam_step: params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractViolation("adam_step: optimizer state does not match params")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ContractViolation(f"adam_step: shape mismatch {g.shape} vs {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
