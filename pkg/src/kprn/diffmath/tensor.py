"""Dense float64 tensors with reverse-mode differentiation.

Every op is a plain function that takes ``Tensor`` arguments and returns a new
``Tensor``. When any input requires a gradient, the result keeps references to
its inputs plus a closure mapping the output gradient to input gradients; the
resulting DAG is the tape walked by :func:`backward`.
"""

from __future__ import annotations

import numpy as np

from kprn.errors import ContractViolation, NumericDomainError

__all__ = [
    "Tensor",
    "variable",
    "constant",
    "backward",
    "tape_of",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "relu",
    "softplus",
    "sigmoid",
    "tanh",
    "softmax",
    "log_softmax",
    "mean",
    "total",
    "mse",
    "weighted_bce",
    "nll_log_softmax",
    "embedding",
    "take_rows",
    "slice_last",
    "reshape",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericDomainError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractViolation(f"tensor of shape {self.shape} is not a scalar")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # Operator sugar; each maps onto the catalog functions below.
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def variable(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data):
    return Tensor(data, requires_grad=False)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op, parents, grad_fn):
    out = Tensor.__new__(Tensor)
    if not np.isfinite(data).all():
        raise NumericDomainError(f"{op} produced a non-finite value")
    out.data = data
    out.name = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# Op catalog
# --------------------------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (g @ B.T if need_a else None), (A.T @ g if need_b else None)

    return _result(A @ B, "matmul", (a, b), grad_fn)


def add(a, b):
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, "add", (a, b), grad_fn)


def sub(a, b):
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _result(a.data - b.data, "sub", (a, b), grad_fn)


def mul(a, b):
    _broadcast_shape(a, b, "mul")
    A, B = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _result(A * B, "mul", (a, b), grad_fn)


def scale(a, c):
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _result(a.data * c, "scale", (a,), grad_fn)


def concat(tensors, axis=-1):
    """Concatenate along ``axis`` (last axis by default)."""
    tensors = list(tensors)
    if not tensors:
        raise ContractViolation("concat: empty input list")
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors:
        if t.data.ndim != ndim or any(
            t.shape[k] != tensors[0].shape[k] for k in range(ndim) if k != ax
        ):
            raise ContractViolation(
                f"concat: shapes {[x.shape for x in tensors]} disagree off axis {axis}"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(tensors))
        )

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(data, "concat", tuple(tensors), grad_fn)


def relu(a):
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _result(a.data * mask, "relu", (a,), grad_fn)


def sigmoid(a):
    x = a.data
    # Branch-free stable form: exp only ever sees non-positive arguments.
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _result(s, "sigmoid", (a,), grad_fn)


def softplus(a):
    """log(1 + exp(x)), computed without overflow."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def grad_fn(g):
        return (g * s,)

    return _result(out, "softplus", (a,), grad_fn)


def tanh(a):
    t = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - t * t),)

    return _result(t, "tanh", (a,), grad_fn)


def _check_rows(a, op):
    if a.data.ndim == 0 or a.shape[-1] == 0:
        raise ContractViolation(f"{op}: rows must be non-empty, got shape {a.shape}")


def softmax(a):
    """Softmax along the last axis, with max subtraction."""
    _check_rows(a, "softmax")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, "softmax", (a,), grad_fn)


def log_softmax(a):
    _check_rows(a, "log_softmax")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def grad_fn(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _result(out, "log_softmax", (a,), grad_fn)


def mean(a):
    n = a.data.size
    if n == 0:
        raise ContractViolation("mean: empty tensor")
    shape = a.shape

    def grad_fn(g):
        return (np.full(shape, float(g) / n),)

    return _result(np.array(a.data.mean()), "mean", (a,), grad_fn)


def total(a):
    """Sum of all entries, as a scalar."""
    shape = a.shape

    def grad_fn(g):
        return (np.full(shape, float(g)),)

    return _result(np.array(a.data.sum()), "sum", (a,), grad_fn)


def mse(a, b):
    if a.shape != b.shape:
        raise ContractViolation(f"mse: shapes {a.shape} and {b.shape} differ")
    if a.data.size == 0:
        raise ContractViolation("mse: empty input")
    d = a.data - b.data
    n = d.size

    def grad_fn(g):
        ga = (2.0 * float(g) / n) * d
        return ga, -ga

    return _result(np.array((d * d).mean()), "mse", (a, b), grad_fn)


def weighted_bce(logits, targets, weights):
    """Mean over labels of ``w * BCE(sigmoid(logits), targets)``.

    Computed from logits (softplus form) so saturated predictions stay finite.
    ``targets`` and ``weights`` are constants.
    """
    z = logits.data
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    if y.shape != z.shape or w.shape != z.shape:
        raise ContractViolation(
            f"weighted_bce: logits {z.shape}, targets {y.shape}, weights {w.shape} must match"
        )
    n = z.size
    softplus = np.logaddexp(0.0, z)
    val = (w * (softplus - y * z)).mean()
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def grad_fn(g):
        return (float(g) * w * (p - y) / n,)

    return _result(np.array(val), "weighted_bce", (logits,), grad_fn)


def nll_log_softmax(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row-softmax(logits)."""
    if logits.data.ndim != 2:
        raise ContractViolation(f"nll_log_softmax: expected 2-d logits, got {logits.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    rows = logits.shape[0]
    if idx.shape != (rows,):
        raise ContractViolation(f"nll_log_softmax: {idx.shape[0] if idx.ndim else 0} targets for {rows} rows")
    if rows == 0 or logits.shape[1] == 0:
        raise ContractViolation("nll_log_softmax: empty logits")
    if idx.min() < 0 or idx.max() >= logits.shape[1]:
        raise ContractViolation("nll_log_softmax: target index out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    ar = np.arange(rows)
    val = -logp[ar, idx].mean()
    p = np.exp(logp)

    def grad_fn(g):
        gz = p.copy()
        gz[ar, idx] -= 1.0
        return (gz * (float(g) / rows),)

    return _result(np.array(val), "nll_log_softmax", (logits,), grad_fn)


def embedding(table, indices):
    """Rows of ``table`` selected by integer ``indices``."""
    if table.data.ndim != 2:
        raise ContractViolation(f"embedding: table must be 2-d, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractViolation("embedding: index out of range")
    shape = table.shape

    def grad_fn(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx], "embedding", (table,), grad_fn)


take_rows = embedding


def slice_last(a, start, stop):
    """``a[..., start:stop]``."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise ContractViolation(f"slice_last: [{start}:{stop}] outside last axis {a.shape[-1]}")
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop], "slice", (a,), grad_fn)


def reshape(a, shape):
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    old = a.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _result(data, "reshape", (a,), grad_fn)


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------


def tape_of(loss):
    """Topologically ordered list of the recorded nodes reachable from ``loss``
    (inputs before the ops that consume them)."""
    order, seen = [], set()
    stack = [(loss, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Gradients of scalar ``loss``.

    ``params`` is a ``ParamStore`` or any mapping name -> Tensor; the result
    maps each of those names to a gradient array (zeros when the tensor does
    not influence ``loss``). Without ``params`` the result is keyed by the
    leaf tensors' ``id``.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractViolation(f"backward: loss must be a scalar tensor, got {getattr(loss, 'shape', loss)}")
    grads = {}
    owned = set()  # gradient buffers allocated here, safe to add into in place
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(tape_of(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                if prev is None:
                    grads[key] = pg
                elif key in owned:
                    prev += pg
                else:
                    grads[key] = prev + pg
                    owned.add(key)
    if params is None:
        return grads
    items = params.items()
    return {
        name: grads[id(t)] if id(t) in grads else np.zeros_like(t.data) for name, t in items
    }
