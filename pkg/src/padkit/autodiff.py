"""Minimal reverse-mode differentiation engine on dense float64 arrays.

Define-by-run: every operation immediately computes its value on numpy
arrays and records a closure that pushes the adjoint back to its parents.
Tensors are limited to at most three axes; everything trained in this
package fits in scalars, vectors and matrices.

All intermediate values are checked for finiteness after each forward and
backward step. Masked attention therefore uses a large negative sentinel
(``NEG_INF``) instead of a literal infinity; at float64 the exponential of
the sentinel underflows to exactly zero, so masked positions carry weight
0.0 bitwise while every tensor stays finite.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

# Effectively -inf for softmax purposes: exp(NEG_INF - rowmax) == 0.0 exactly.
NEG_INF = -1.0e30


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared in a forward or backward value."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 3:
        raise ShapeError(f"tensors support at most 3 axes, got shape {a.shape}")
    return a


def _check_finite(a: np.ndarray, node: str) -> None:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"non-finite value produced at node '{node}'")


class Tensor:
    """A node in the computation graph.

    ``value`` is always a float64 ndarray. ``grad`` is populated by
    :func:`backward` for nodes created with ``requires_grad=True`` and for
    every interior node on a path to one.
    """

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        name: str = "tensor",
        _parents: tuple["Tensor", ...] = (),
        _vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None,
    ):
        self.value = _as_array(value)
        _check_finite(self.value, name)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.name = name
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.shape}, grad={self.requires_grad})"


def parameter(value, name: str = "param") -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def constant(value, name: str = "const") -> Tensor:
    return Tensor(value, requires_grad=False, name=name)


def _op(name: str, value: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    return Tensor(value, name=name, _parents=parents, _vjp=vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise and linear algebra primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    return _op(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    return _op(
        "sub",
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    return _op(
        "mul",
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        v = a.value / b.value
    return _op(
        "div",
        v,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (broadcast-scale)."""
    c = float(c)
    return _op("scale", a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not (n,k)@(k,m)")
    return _op(
        "matmul",
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _op("transpose", a.value.T, (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _op(
        "concat",
        np.concatenate([p.value for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable in both tails
    v = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.value))),
                 np.exp(-np.abs(a.value)) / (1.0 + np.exp(-np.abs(a.value))))
    return _op("sigmoid", v, (a,), lambda g: (g * v * (1.0 - v),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        v = np.exp(a.value)
    return _op("exp", v, (a,), lambda g: (g * v,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(a.value)
    return _op("log", v, (a,), lambda g: (g / a.value,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        v = np.sqrt(a.value)
    # the 1e-150 floor only matters at exactly zero, where the true
    # derivative is unbounded anyway
    return _op("sqrt", v, (a,), lambda g: (g / (2.0 * np.maximum(v, 1e-150)),))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    v = np.clip(a.value, lo, hi)
    inside = np.ones_like(a.value)
    if lo is not None:
        inside = inside * (a.value >= lo)
    if hi is not None:
        inside = inside * (a.value <= hi)
    return _op("clamp", v, (a,), lambda g: (g * inside,))


def rowsum(a: Tensor) -> Tensor:
    """Sum the last axis of a matrix, keeping it as a (n, 1) column."""
    if a.value.ndim != 2:
        raise ShapeError(f"rowsum expects a matrix, got shape {a.shape}")
    return _op(
        "rowsum",
        a.value.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
    )


def sum_all(a: Tensor) -> Tensor:
    return _op(
        "sum_all",
        np.asarray(a.value.sum()),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size
    return _op(
        "mean_all",
        np.asarray(a.value.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
    )


def row_softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis of a matrix, max-subtracted."""
    if a.value.ndim != 2:
        raise ShapeError(f"row_softmax expects a matrix, got shape {a.shape}")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g: np.ndarray):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _op("row_softmax", s, (a,), vjp)


def masked_fill(a: Tensor, mask: np.ndarray, fill: float) -> Tensor:
    """Replace entries where ``mask`` is True with the constant ``fill``.

    The gradient is zero at filled positions and passes through elsewhere.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    v = np.where(m, fill, a.value)
    return _op("masked_fill", v, (a,), lambda g: (np.where(m, 0.0, g),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learned affine parameters."""
    if x.value.ndim != 2:
        raise ShapeError(f"layer_norm expects a matrix, got shape {x.shape}")
    d = x.shape[1]
    mu = x.value.mean(axis=1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    v = xhat * gamma.value + beta.value

    def vjp(g: np.ndarray):
        gg = g * gamma.value
        # d xhat / d x folded into one expression
        dx = inv / d * (d * gg - gg.sum(axis=1, keepdims=True)
                        - xhat * (gg * xhat).sum(axis=1, keepdims=True))
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        return dx, dgamma, dbeta

    return _op("layer_norm", v, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar ``root`` into every reachable node.

    Existing ``grad`` buffers on reachable nodes are reset first, so a
    second call recomputes rather than accumulates across calls.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward expects a scalar root, got shape {root.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        if not node.requires_grad:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64)
            _check_finite(g, f"grad({node.name})")
            if parent.grad is None:
                parent.grad = g.copy()
            else:
                parent.grad = parent.grad + g


def finite_diff_check(
    build: Callable[[list[Tensor]], Tensor],
    params: list[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build`` must be a pure function mapping a list of input Tensors to a
    scalar loss Tensor. It is called once with trainable Tensors wrapping
    ``params`` (analytic route) and then repeatedly with perturbed constants
    (finite-difference route). Relative error per coordinate is
    ``|g_analytic - g_fd| / max(1, |g_fd|)``.
    """
    tensors = [parameter(p.copy(), name=f"p{i}") for i, p in enumerate(params)]
    loss = build(tensors)
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.value) for t in tensors]

    def eval_at(arrays: list[np.ndarray]) -> float:
        out = build([constant(a) for a in arrays])
        return float(out.value)

    worst = 0.0
    base = [p.copy() for p in params]
    for i, p in enumerate(base):
        flat = p.reshape(-1)
        ga = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = eval_at(base)
            flat[j] = orig - h
            down = eval_at(base)
            flat[j] = orig
            gfd = (up - down) / (2.0 * h)
            err = abs(ga[j] - gfd) / max(1.0, abs(gfd))
            if err > worst:
                worst = err
    return worst
