"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every trainable quantity in the package flows through this module. A
``Tensor`` wraps a numpy float64 array; primitive operations executed while a
``Tape`` is active append one record each (output, parents, local vector-
Jacobian products). Records are appended in execution order, which is already
a topological order, so the backward sweep is a single reverse pass that
visits each node exactly once.

Broadcasting is deliberately restricted: elementwise operations accept equal
shapes or a scalar on one side, nothing else. Callers reshape and
``broadcast_to`` explicitly.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "TapeError", "backward", "constant",
    "add", "subtract", "multiply", "divide", "negative", "matmul", "power",
    "tensor_sum", "tensor_mean", "exp", "log", "sigmoid", "softmax",
    "log_softmax", "leaky_relu", "tanh", "softplus", "concat", "reshape",
    "transpose", "broadcast_to", "where", "layer_norm",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class TapeError(RuntimeError):
    """Invalid backward request (non-scalar root, or root not on a tape)."""


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def current_tape():
    """The innermost active Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations for one reverse-mode sweep.

    A tape is single-threaded; share Tensors across threads read-only and
    give each worker its own tape. Use as a context manager::

        with Tape() as tape:
            loss = ...
            grads = tape.backward(loss)
    """

    __slots__ = ("_outputs", "_parents", "_vjps")

    def __init__(self):
        self._outputs: list[Tensor] = []
        self._parents: list[tuple] = []
        self._vjps: list[tuple] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._outputs)

    def _record(self, out: "Tensor", parents: tuple, vjps: tuple) -> None:
        out._tape = self
        out._node = len(self._outputs)
        self._outputs.append(out)
        self._parents.append(parents)
        self._vjps.append(vjps)

    def backward(self, root: "Tensor") -> dict:
        """Accumulate d(root)/d(leaf) for every requires_grad leaf.

        Returns a dict mapping each leaf Tensor to its gradient array and
        also stores the array on ``leaf.grad``. Gradients of repeated leaves
        accumulate. The root must be a scalar produced under this tape.
        """
        if root._tape is not self or root._node is None:
            raise TapeError("backward root was not produced on this tape")
        if root.data.shape != ():
            raise TapeError(
                f"backward root must be scalar, got shape {root.data.shape}")
        node_grads: dict[int, np.ndarray] = {root._node: np.ones(())}
        leaf_grads: dict[int, tuple] = {}
        parents_all = self._parents
        vjps_all = self._vjps
        for i in range(root._node, -1, -1):
            g = node_grads.pop(i, None)
            if g is None:
                continue
            parents = parents_all[i]
            vjps = vjps_all[i]
            for p, vjp in zip(parents, vjps):
                if vjp is None or not p.requires_grad:
                    continue
                contrib = vjp(g)
                if p._tape is self and p._node is not None:
                    j = p._node
                    acc = node_grads.get(j)
                    node_grads[j] = contrib if acc is None else acc + contrib
                else:
                    key = id(p)
                    entry = leaf_grads.get(key)
                    if entry is None:
                        leaf_grads[key] = (p, np.array(contrib))
                    else:
                        leaf_grads[key] = (p, entry[1] + contrib)
        out = {}
        for p, g in leaf_grads.values():
            p.grad = g
            out[p] = g
        return out


def backward(root: "Tensor") -> dict:
    """Module-level convenience: run the backward sweep on the root's tape."""
    if root._tape is None:
        raise TapeError("backward root was not produced on an active tape")
    return root._tape.backward(root)


class Tensor:
    """Immutable dense float64 value, optionally tracked for gradients.

    Invariants: ``data`` is a float64 array whose element count equals the
    product of its shape; ``grad``, when present, has the same shape as
    ``data``. Tensors are safe to share read-only across threads.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A constant view of this tensor's value (no gradient tracking)."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; all route through the module primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def constant(x) -> Tensor:
    """Wrap a value as a non-tracked Tensor (no-op on constant Tensors)."""
    if isinstance(x, Tensor):
        return x if not x.requires_grad else x.detach()
    return Tensor(x)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjps) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.requires_grad = track
    out.grad = None
    out._tape = None
    out._node = None
    if track:
        tape._record(out, parents, vjps)
    return out


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa != sb and sa != () and sb != ():
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform "
                         "(equal shapes or scalar broadcast only)")


def _reduce_for(shape: tuple, g: np.ndarray) -> np.ndarray:
    # gradient for a scalar operand of an elementwise op
    return g.sum() if shape == () and g.shape != () else g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("add", a, b)
    return _make(a.data + b.data, (a, b),
                 (lambda g: _reduce_for(a.data.shape, g),
                  lambda g: _reduce_for(b.data.shape, g)))


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("subtract", a, b)
    return _make(a.data - b.data, (a, b),
                 (lambda g: _reduce_for(a.data.shape, g),
                  lambda g: _reduce_for(b.data.shape, -g)))


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("multiply", a, b)
    return _make(a.data * b.data, (a, b),
                 (lambda g: _reduce_for(a.data.shape, g * b.data),
                  lambda g: _reduce_for(b.data.shape, g * a.data)))


def divide(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("divide", a, b)
    return _make(a.data / b.data, (a, b),
                 (lambda g: _reduce_for(a.data.shape, g / b.data),
                  lambda g: _reduce_for(b.data.shape,
                                        -g * a.data / (b.data * b.data))))


def negative(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), (lambda g: -g,))


def power(a, p) -> Tensor:
    """Elementwise a**p for a Python scalar exponent."""
    a = _as_tensor(a)
    p = float(p)
    if p == 2.0:
        return _make(a.data * a.data, (a,), (lambda g: g * (2.0 * a.data),))
    return _make(a.data ** p, (a,),
                 (lambda g: g * (p * a.data ** (p - 1.0)),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product. 2-D inputs, or stacked (batched) inputs whose leading
    dimensions match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    ok = (len(sa) == len(sb) >= 2 and sa[:-2] == sb[:-2]
          and sa[-1] == sb[-2])
    if not ok:
        raise ShapeError(f"matmul: shapes {sa} and {sb} do not conform")
    out = a.data @ b.data

    def vjp_a(g):
        return g @ b.data.swapaxes(-1, -2)

    def vjp_b(g):
        return a.data.swapaxes(-1, -2) @ g

    return _make(out, (a, b), (vjp_a, vjp_b))


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 (lambda g: _expand_reduced(g, shape, axis, keepdims),))


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = max(1, a.data.size // max(out.size, 1))

    def vjp(g):
        return _expand_reduced(g, shape, axis, keepdims) / count

    return _make(out, (a,), (vjp,))


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), (lambda g: g / a.data,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    out = np.where(a.data >= 0, out, 1.0 - out)
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed stably."""
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    sig = np.where(a.data >= 0, sig, 1.0 - sig)
    return _make(out, (a,), (lambda g: g * sig,))


def leaky_relu(a, negative_slope: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, negative_slope * a.data)
    return _make(out, (a,),
                 (lambda g: g * np.where(mask, 1.0, negative_slope),))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _make(out, (a,), (vjp,))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def vjp(g):
        return g - p * g.sum(axis=axis, keepdims=True)

    return _make(out, (a,), (vjp,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.data.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,),
                 (lambda g: g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast. Input must already have the target rank, with
    size-1 axes wherever expansion happens."""
    a = _as_tensor(a)
    shape = tuple(shape)
    old = a.data.shape
    if len(old) != len(shape) or any(o not in (1, s)
                                     for o, s in zip(old, shape)):
        raise ShapeError(f"broadcast_to: cannot expand {old} to {shape}; "
                         "reshape to matching rank with size-1 axes first")
    expanded = tuple(i for i, (o, s) in enumerate(zip(old, shape)) if o != s)

    def vjp(g):
        return g.sum(axis=expanded, keepdims=True) if expanded else g

    return _make(np.broadcast_to(a.data, shape), (a,), (vjp,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return _make(out, tuple(tensors),
                 tuple(make_vjp(i) for i in range(len(tensors))))


def _key_has_array(key) -> bool:
    if isinstance(key, tuple):
        return any(isinstance(k, np.ndarray) for k in key)
    return isinstance(key, np.ndarray)


def _getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    shape = a.data.shape
    fancy = _key_has_array(key)

    def vjp(g):
        z = np.zeros(shape)
        if fancy:
            np.add.at(z, key, g)
        else:
            z[key] = g
        return z

    return _make(np.asarray(out), (a,), (vjp,))


def where(cond, a, b) -> Tensor:
    """Elementwise select; ``cond`` is a constant boolean mask (no gradient).

    ``a`` and ``b`` must match the mask's shape or be scalars.
    """
    mask = cond.data if isinstance(cond, Tensor) else np.asarray(cond)
    mask = mask.astype(bool)
    a, b = _as_tensor(a), _as_tensor(b)
    for name, t in (("where/a", a), ("where/b", b)):
        if t.data.shape != mask.shape and t.data.shape != ():
            raise ShapeError(f"{name}: shape {t.data.shape} does not match "
                             f"condition shape {mask.shape}")
    out = np.where(mask, a.data, b.data)
    return _make(out, (a, b),
                 (lambda g: _reduce_for(a.data.shape, g * mask),
                  lambda g: _reduce_for(b.data.shape, g * ~mask)))


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part;
    compose with multiply/add for gain and bias)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return inv * (g - gm - y * gym)

    return _make(y, (a,), (vjp,))
