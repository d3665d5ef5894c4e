"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every op returns a new Tensor holding the
computed value plus a backward closure for each differentiable input.
``backward`` on a scalar root walks the graph once in reverse topological
order and accumulates gradients into ``.grad`` arrays.

Conventions:
  * everything is float64; any op producing NaN/Inf raises NonFiniteError
  * broadcasting is limited to scalar-vs-array; equal shapes otherwise
    (``add_rows`` exists as a dedicated op for bias addition)
  * relu'(0) = 0
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fns",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialized with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fns: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar used throughout the model code
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named, possibly frozen, model weight.

    ``trainable`` marks weights that belong to a trainable component at all
    (the speech frontend never does); ``frozen`` is the current training
    regime. Gradients flow only while ``trainable and not frozen``.
    """

    __slots__ = ("name", "tensor", "trainable", "frozen")

    def __init__(self, name: str, data, trainable: bool = True,
                 frozen: bool = False):
        self.name = name
        self.tensor = Tensor(data, requires_grad=trainable and not frozen)
        self.trainable = trainable
        self.frozen = frozen

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64)

    @property
    def updatable(self) -> bool:
        return self.trainable and not self.frozen

    def set_frozen(self, flag: bool) -> None:
        self.frozen = flag
        self.tensor.requires_grad = self.trainable and not flag

    def __repr__(self) -> str:
        return (f"Parameter({self.name!r}, shape={self.tensor.shape}, "
                f"trainable={self.trainable}, frozen={self.frozen})")


def _make_node(data: np.ndarray, parents: Sequence[Tensor],
               backward_fns: Sequence[Callable[[np.ndarray], np.ndarray] | None]
               ) -> Tensor:
    """Wrap an op result; attach backward closures only for grad-requiring inputs."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward_done = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        keep_p, keep_f = [], []
        for p, f in zip(parents, backward_fns):
            if p.requires_grad and f is not None:
                keep_p.append(p)
                keep_f.append(f)
        out.requires_grad = True
        out._parents = tuple(keep_p)
        out._backward_fns = tuple(keep_f)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fns = ()
    return out


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root.

    Visits每 node exactly once in reverse topological order; repeated calls
    on the same root are rejected (gradients would silently double).
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if root._backward_done:
        raise RuntimeError("backward already ran on this root; build a new graph")
    root._backward_done = True

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, fn in zip(node._parents, node._backward_fns):
            pg = fn(g)
            key = id(parent)
            if key in grads:
                grads[key] += pg
            else:
                grads[key] = pg
        if not node._parents and node.requires_grad:
            node.accumulate_grad(g)
        node._parents = ()
        node._backward_fns = ()


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_data = a.data @ b.data
    return _make_node(
        out_data, (a, b),
        (lambda g, bd=b.data: g @ bd.T,
         lambda g, ad=a.data: ad.T @ g))


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _binary_shapes_ok(a: Tensor, b: Tensor) -> bool:
    return a.shape == b.shape or _is_scalar(a) or _is_scalar(b)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)  # scalar operand broadcast


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _binary_shapes_ok(a, b):
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data
    return _make_node(
        out, (a, b),
        (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; one operand may be a scalar (gate scaling)."""
    if not _binary_shapes_ok(a, b):
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.data * b.data
    return _make_node(
        out, (a, b),
        (lambda g, bd=b.data: _reduce_to(g * bd, a.shape),
         lambda g, ad=a.data: _reduce_to(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make_node(a.data * c, (a,), (lambda g: g * c,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    pos = a.data > 0.0  # derivative at exactly 0 is 0
    return _make_node(out, (a,), (lambda g: g * pos,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make_node(out, (a,), (lambda g, o=out: g * (1.0 - o * o),))


def elementwise(kind: str, *operands: Tensor, c: float | None = None) -> Tensor:
    """Dispatch table for the elementwise family."""
    if kind == "relu":
        return relu(*operands)
    if kind == "tanh":
        return tanh(*operands)
    if kind == "add":
        return add(*operands)
    if kind == "hadamard":
        return mul(*operands)
    if kind == "scale":
        (a,) = operands
        return scale(a, c if c is not None else 1.0)
    raise ValueError(f"unknown elementwise kind: {kind!r}")


def add_rows(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of a T x d matrix (bias add)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rows shape mismatch: {x.shape} vs {b.shape}")
    out = x.data + b.data
    return _make_node(
        out, (x, b),
        (lambda g: g, lambda g: g.sum(axis=0)))


def softmax_rows(x: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Row softmax with max-subtraction; optional boolean mask of allowed keys."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects 2-D input, got {x.shape}")
    data = x.data
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != data.shape:
            raise ShapeError(
                f"softmax mask shape {allowed.shape} does not match {data.shape}")
        if not allowed.any(axis=1).all():
            raise ValueError("softmax row with no allowed positions")
        mx = np.where(allowed, data, -np.inf).max(axis=1, keepdims=True)
        e = np.exp(np.where(allowed, data - mx, 0.0))
        e = np.where(allowed, e, 0.0)
    else:
        mx = data.max(axis=1, keepdims=True)
        e = np.exp(data - mx)
    s = e.sum(axis=1, keepdims=True)
    y = e / s

    def grad_x(g, y=y):
        dot = (g * y).sum(axis=1, keepdims=True)
        return y * (g - dot)

    return _make_node(y, (x,), (grad_x,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def grad_x(g, xhat=xhat, inv=inv, gd=gain.data, d=d):
        dxhat = g * gd
        return (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv

    def grad_gain(g, xhat=xhat):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def grad_bias(g, d=d):
        return g.reshape(-1, d).sum(axis=0)

    return _make_node(out, (x, gain, bias), (grad_x, grad_gain, grad_bias))


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over unmasked positions (stable LSE)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects T x V logits, got {logits.shape}")
    t, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != (t,) or mask.shape != (t,):
        raise ShapeError("targets/mask length must match logits rows")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy with all positions masked out")
    if targets[mask].min(initial=0) < 0 or targets[mask].max(initial=0) >= v:
        raise ValueError("target id out of vocabulary range")
    data = logits.data
    mx = data.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(data - mx).sum(axis=1))
    nll = lse - data[np.arange(t), targets]
    loss = np.array(nll[mask].mean())

    def grad_logits(g, data=data, mx=mx, targets=targets, mask=mask, n=n):
        p = np.exp(data - mx)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(t), targets] -= 1.0
        p *= (mask[:, None] / n) * g
        return p

    return _make_node(loss, (logits,), (grad_logits,))


def embedding_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows by id; backward scatter-adds into the table gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding ids must be 1-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"embedding id out of range 0..{table.shape[0] - 1}")
    out = table.data[ids]

    def grad_table(g, ids=ids, shape=table.shape):
        acc = np.zeros(shape)
        np.add.at(acc, ids, g)
        return acc

    return _make_node(out, (table,), (grad_table,))


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_rows of nothing")
    width = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise ShapeError("concat_rows width mismatch")
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])
    fns = [
        (lambda g, lo=offsets[i], hi=offsets[i + 1]: g[lo:hi])
        for i in range(len(parts))
    ]
    return _make_node(out, tuple(parts), tuple(fns))


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_cols of nothing")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError("concat_cols row-count mismatch")
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])
    fns = [
        (lambda g, lo=offsets[i], hi=offsets[i + 1]: g[:, lo:hi])
        for i in range(len(parts))
    ]
    return _make_node(out, tuple(parts), tuple(fns))


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo <= hi <= x.shape[0]):
        raise ShapeError(f"slice_rows [{lo}:{hi}] invalid for shape {x.shape}")
    out = x.data[lo:hi].copy()

    def grad(g, lo=lo, hi=hi, shape=x.shape):
        acc = np.zeros(shape)
        acc[lo:hi] = g
        return acc

    return _make_node(out, (x,), (grad,))


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo <= hi <= x.shape[1]):
        raise ShapeError(f"slice_cols [{lo}:{hi}] invalid for shape {x.shape}")
    out = x.data[:, lo:hi].copy()

    def grad(g, lo=lo, hi=hi, shape=x.shape):
        acc = np.zeros(shape)
        acc[:, lo:hi] = g
        return acc

    return _make_node(out, (x,), (grad,))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _make_node(x.data.T.copy(), (x,), (lambda g: g.T,))


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = np.array(x.data.sum())
    return _make_node(out, (x,), (lambda g, shape=x.shape: np.broadcast_to(g, shape).copy(),))
