"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Only what the toy model and the continual-learning losses need is provided.
Broadcasting is limited to leading-batch expansion: the second operand of a
binary op may either match the first operand's shape exactly or match its
trailing dimensions.
"""
from __future__ import annotations

import hashlib
import itertools
from collections.abc import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DegenerateBatchError(ValueError):
    """A masked reduction had no valid positions."""


class Tensor:
    """Dense float64 array that records the ops producing it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "id")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(as_tensor(other), self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(self, other)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)
    __truediv__ = lambda self, other: scale(self, 1.0 / float(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _check_expandable(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- graph ------------------------------------------------------------------


class Graph:
    """Nodes reachable from a scalar root, in topological order (inputs first)."""

    def __init__(self, root: Tensor):
        if root.data.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        self.root = root
        self.nodes = _topological(root)

    def backward(self) -> None:
        _accumulate(self.root, np.ones_like(self.root.data))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Intermediate gradients are released afterwards so that only leaves keep
    ``.grad`` populated.
    """
    if not root.requires_grad:
        if root.data.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        return
    graph = Graph(root)
    graph.backward()
    for node in graph.nodes:
        if node._parents:
            node.grad = None


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_expandable(a, b, "add")
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw(g):
            _accumulate(a, g)
            _accumulate(b, _reduce_to(g, b.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_expandable(a, b, "mul")
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accumulate(a, g * b.data)
            if b.requires_grad:
                _accumulate(b, _reduce_to(g * a.data, b.shape))
        out._backward = _bw
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _make(a.data * c, (a,), "scale")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g * c)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _make(y, (a,), "tanh")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g * (1.0 - y * y))
    return out


def square(a: Tensor) -> Tensor:
    out = _make(a.data * a.data, (a,), "square")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, 2.0 * a.data * g)
    return out


# -- shape ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` (or batched ``b`` with the same leading dims)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                if b.ndim == 2:
                    k, n = b.shape
                    gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                else:
                    gb = np.swapaxes(a.data, -1, -2) @ g
                _accumulate(b, gb)
        out._backward = _bw
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g.reshape(a.shape))
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ax = axis % parts[0].ndim
    out = _make(np.concatenate([p.data for p in parts], axis=ax), parts, "concat")
    if out.requires_grad:
        bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

        def _bw(g):
            for p, piece in zip(parts, np.split(g, bounds, axis=ax)):
                _accumulate(p, piece)
        out._backward = _bw
    return out


def repeat_axis(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and tile ``a`` ``n`` times along it."""
    expanded = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    out = _make(expanded, (a,), "repeat")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g.sum(axis=axis))
    return out


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    out = _make(np.asarray(a.data.sum(axis=axis)), (a,), "sum")
    if out.requires_grad:
        def _bw(g):
            if axis is None:
                _accumulate(a, np.broadcast_to(g, a.shape))
            else:
                _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))
        out._backward = _bw
    return out


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.data.size)


def gather(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather table must be rank 2, got {table.shape}")
    if ids.size:
        bad = ids[(ids < 0) | (ids >= table.shape[0])]
        if bad.size:
            raise IndexError(f"gather id {int(bad.flat[0])} outside [0, {table.shape[0]})")
    out = _make(table.data[ids], (table,), "gather")
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accumulate(table, full)
        out._backward = _bw
    return out


def take_last(a: Tensor, index) -> Tensor:
    """Pick ``a[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"take_last index shape {index.shape} does not match {a.shape[:-1]}")
    picked = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]
    out = _make(picked, (a,), "take_last")
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(a.data)
            np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
            _accumulate(a, full)
        out._backward = _bw
    return out


# -- softmax family ---------------------------------------------------------


def _check_temperature(T: float) -> None:
    if not T > 0:
        raise ContractError(f"temperature must be positive, got {T}")


def softmax_temp(logits: Tensor, T: float = 1.0) -> Tensor:
    """Softmax of ``logits / T`` over the last axis."""
    _check_temperature(T)
    logits = as_tensor(logits)
    z = logits.data / T
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=-1, keepdims=True)
    out = _make(p, (logits,), "softmax")
    if out.requires_grad:
        def _bw(g):
            inner = (g * p).sum(axis=-1, keepdims=True)
            _accumulate(logits, p * (g - inner) / T)
        out._backward = _bw
    return out


def log_softmax_temp(logits: Tensor, T: float = 1.0) -> Tensor:
    _check_temperature(T)
    logits = as_tensor(logits)
    z = logits.data / T
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    out = _make(logp, (logits,), "log_softmax")
    if out.requires_grad:
        p = np.exp(logp)

        def _bw(g):
            _accumulate(logits, (g - p * g.sum(axis=-1, keepdims=True)) / T)
        out._backward = _bw
    return out


def _valid_mask(mask, shape: tuple[int, ...]) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != shape:
        raise ShapeError(f"mask shape {m.shape} does not match {shape}")
    total = m.sum()
    if total <= 0:
        raise DegenerateBatchError("mask selects no positions")
    return m


def masked_mean(values: Tensor, mask) -> Tensor:
    """Mean of ``values`` over positions where ``mask`` is 1."""
    m = _valid_mask(mask, values.shape)
    return scale(sum(mul(values, m)), 1.0 / m.sum())


def token_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Per-position ``-log softmax(logits)[target]``; padding targets are ignored."""
    targets = np.asarray(targets, dtype=np.int64)
    safe = np.where(np.asarray(mask) > 0, targets, 0)
    return scale(take_last(log_softmax_temp(logits), safe), -1.0)


def masked_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean over masked-in positions of ``-log softmax(logits)[target]``."""
    m = _valid_mask(mask, logits.shape[:-1])
    return masked_mean(token_cross_entropy(logits, targets, m), m)


# -- optimizer --------------------------------------------------------------


class ParameterStore:
    """Ordered named parameters with per-name frozen flags."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=not frozen)
        self._params[name] = t
        if frozen:
            self.frozen.add(name)
        return t

    def freeze(self, name: str) -> None:
        self.frozen.add(name)
        self._params[name].requires_grad = False
        self._params[name].grad = None

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if n not in self.frozen]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}

    def snapshot(self) -> "ParameterStore":
        """Deep copy with every parameter frozen (no gradients are tracked)."""
        snap = ParameterStore()
        for n, t in self._params.items():
            snap.add(n, t.data.copy(), frozen=True)
        return snap

    def digest(self, names: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for n in (self._params if names is None else names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._params[n].data).tobytes())
        return h.hexdigest()


class AdamW:
    """Adam with decoupled weight decay.

    Parameters without a gradient in a step are skipped entirely, weight
    decay included; frozen parameters are never touched.
    """

    def __init__(self, lr: float = 1e-4, weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.state: dict[str, dict] = {}

    def step(self, params: ParameterStore) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        for name, p in params.trainable():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            st["t"] += 1
            t = st["t"]
            p.data *= 1.0 - self.lr * self.weight_decay
            st["m"] = b1 * st["m"] + (1.0 - b1) * g
            st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
            m_hat = st["m"] / (1.0 - b1 ** t)
            v_hat = st["v"] / (1.0 - b2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- gradient checking ------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. ``t.data`` (in place)."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn().data)
        flat[i] = orig - eps
        down = float(fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare backward gradients of ``fn`` against central differences.

    Returns the worst relative error over all elements of ``inputs``.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    backward(out)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numerical_grad(fn, t, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
