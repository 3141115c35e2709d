"""Dense float64 tensors with a reverse-mode gradient tape.

Every operation returns a fresh Tensor that remembers its inputs and how
to route an output gradient back to them; backward() replays the tape in
reverse topological order. The tape is rebuilt on every forward pass, so
callers are free to change batch shapes or control flow between steps.

Checked mode (on by default) inspects every op output for NaN/Inf and
raises NumericError naming the op that produced the first bad value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NumericError

_CHECKED = True

# Rows whose norm falls below this are refused by normalize_rows: the
# direction of a near-zero vector is noise and its gradient explodes.
DEGENERATE_NORM = 1e-12


def set_checked(flag: bool) -> None:
    """Toggle per-op NaN/Inf validation (on by default)."""
    global _CHECKED
    _CHECKED = bool(flag)


def checked_mode() -> bool:
    return _CHECKED


class Tensor:
    """A node in the computation graph: float64 values plus grad plumbing.

    Leaf tensors created through ParamSet carry a persistent zero-filled
    .grad buffer; backward() accumulates into it and flips .grad_filled.
    Interior nodes get a fresh grad during backward and are discarded
    with the tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "grad_filled", "name",
                 "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        data = np.asarray(values, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep them 0-d.
        self.data = np.ascontiguousarray(data) if data.ndim else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.grad_filled = False
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; every op lives at module level.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _CHECKED and not np.all(np.isfinite(data)):
        raise NumericError(f"op '{op}' produced non-finite values")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, grad) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros(t.data.shape, dtype=np.float64)
    np.add(t.grad, grad, out=t.grad)
    if t._backward is None:
        t.grad_filled = True


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _coerce(a)

    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward, "neg")


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    a = _coerce(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.data.shape}")

    def backward(g):
        _accumulate(a, g.T)

    return _make(a.data.T.copy(), (a,), backward, "transpose")


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(data.copy(), (a,), backward, "reshape")


def tanh(a) -> Tensor:
    a = _coerce(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward, "tanh")


def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward, "exp")


def _reduction_grad(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        _accumulate(a, _reduction_grad(np.asarray(g), a.data.shape, axis, keepdims))

    return _make(data, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        spread = _reduction_grad(np.asarray(g), a.data.shape, axis, keepdims)
        _accumulate(a, spread / count)

    return _make(data, (a,), backward, "mean")


def logsumexp(a, axis: int) -> Tensor:
    """Numerically stable log(sum(exp(a))) along one axis."""
    a = _coerce(a)
    shifted_max = a.data.max(axis=axis, keepdims=True)
    out_keep = np.log(np.exp(a.data - shifted_max).sum(axis=axis, keepdims=True)) + shifted_max
    data = np.squeeze(out_keep, axis=axis)

    def backward(g):
        softmax = np.exp(a.data - out_keep)
        _accumulate(a, np.expand_dims(np.asarray(g), axis) * softmax)

    return _make(data, (a,), backward, "logsumexp")


def diagonal(a) -> Tensor:
    a = _coerce(a)
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise DimensionError(f"diagonal needs a square matrix, got {a.data.shape}")
    n = a.data.shape[0]

    def backward(g):
        scatter = np.zeros_like(a.data)
        scatter[np.arange(n), np.arange(n)] = g
        _accumulate(a, scatter)

    return _make(a.data.diagonal().copy(), (a,), backward, "diagonal")


def concat_rows(tensors) -> Tensor:
    """Stack 2-D tensors along axis 0; gradient splits back per block."""
    tensors = tuple(_coerce(t) for t in tensors)
    if not tensors:
        raise ContractError("concat_rows needs at least one tensor")
    width = tensors[0].data.shape
    for t in tensors:
        if t.data.ndim != 2 or t.data.shape[1:] != width[1:]:
            raise DimensionError(
                f"concat_rows widths differ: {width} vs {t.data.shape}")
    data = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]

    def backward(g):
        start = 0
        for t, n in zip(tensors, sizes):
            _accumulate(t, g[start:start + n])
            start += n

    return _make(data, tensors, backward, "concat_rows")


def normalize_rows(a) -> Tensor:
    """Scale each row to unit L2 norm; refuses rows with ~zero norm."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise DimensionError(f"normalize_rows needs a 2-D tensor, got {a.data.shape}")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if norms.size and norms.min() < DEGENERATE_NORM:
        row = int(np.argmin(norms))
        raise DegenerateInputError(
            f"row {row} has norm {float(norms[row, 0]):.3e}, below {DEGENERATE_NORM:.0e}")
    out_data = a.data / norms

    def backward(g):
        inner = (g * out_data).sum(axis=1, keepdims=True)
        _accumulate(a, (g - out_data * inner) / norms)

    return _make(out_data, (a,), backward, "normalize_rows")


def forward_linear(weight: Tensor, bias: Tensor, inputs) -> Tensor:
    """Affine map inputs @ weight + bias; accepts a single vector or a batch."""
    x = _coerce(inputs)
    single = x.data.ndim == 1
    if single:
        x = reshape(x, (1, x.data.shape[0]))
    if x.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise DimensionError(
            f"linear input {x.data.shape} does not match weight {weight.data.shape}")
    out = add(matmul(x, weight), bias)
    if single:
        out = reshape(out, (out.data.shape[1],))
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any trainable tensor")
    order = _topo_order(loss)
    loss.grad = np.ones((), dtype=np.float64)
    if loss._backward is None:
        loss.grad_filled = True
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


class ParamSet:
    """Named trainable tensors, each with a persistent gradient buffer.

    Iteration follows insertion order, which every consumer (init, the
    optimizer, checkpoints) keeps deterministic.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(values, requires_grad=True, name=name)
        t.grad = np.zeros(t.data.shape, dtype=np.float64)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ContractError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0
            t.grad_filled = False

    def any_grad_filled(self) -> bool:
        return any(t.grad_filled for t in self._params.values())

    def copy(self) -> "ParamSet":
        dup = ParamSet()
        for name, t in self._params.items():
            dup.add(name, t.data.copy())
        return dup


@dataclass
class GradCheckReport:
    """Worst relative error per parameter from a finite-difference sweep."""
    max_rel_error: dict[str, float]
    rtol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0

    @property
    def passed(self) -> bool:
        return all(v <= self.rtol for v in self.max_rel_error.values())

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.max_rel_error.items() if v > self.rtol}


def grad_check(function, params: ParamSet, rtol: float = 1e-4,
               step: float = 1e-4, eps: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of function(params) with central differences.

    function must rebuild its graph on every call and return a scalar
    Tensor. Relative error per entry is |g - fd| / (|fd| + eps); the
    report keeps the max per parameter. Non-finite values on either side
    raise NumericError naming the parameter.
    """
    params.zero_grads()
    loss = function(params)
    backward(loss)
    analytic = {name: t.grad.copy() for name, t in params.items()}

    report: dict[str, float] = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            hi = function(params).item()
            flat[i] = saved - step
            lo = function(params).item()
            flat[i] = saved
            fd[i] = (hi - lo) / (2.0 * step)
        grad_flat = analytic[name].reshape(-1)
        if not np.all(np.isfinite(fd)) or not np.all(np.isfinite(grad_flat)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        rel = np.abs(grad_flat - fd) / (np.abs(fd) + eps)
        report[name] = float(rel.max()) if rel.size else 0.0
    params.zero_grads()
    return GradCheckReport(max_rel_error=report, rtol=rtol)
