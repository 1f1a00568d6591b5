"""Reverse-mode automatic differentiation over float32 numpy arrays.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
result remembers its parents and a closure that pushes the output gradient back
to them. :func:`backward` linearises that graph into a :class:`Tape` (inputs
always precede outputs) and walks it in reverse.

Broadcasting is deliberately narrow:

* ``add``/``sub`` accept a trailing-axis vector against any tensor whose last
  axis matches (bias rows), otherwise shapes must be equal;
* ``matmul`` follows numpy's stacked-matrix rule, so a batch of token matrices
  can be multiplied by one weight matrix.

Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True
# finite-difference oracle evaluates in float64; everything else stays float32
_compute_dtype = DTYPE


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / deployment)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def float64_mode():
    global _compute_dtype
    previous = _compute_dtype
    _compute_dtype = np.float64
    try:
        yield
    finally:
        _compute_dtype = previous


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=_compute_dtype)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # inf/nan survive multiplication by zero, finite values vanish: one BLAS pass
    flat = arr.reshape(-1)
    if flat.size > 1024 and flat.dtype == np.float32 and flat.flags.c_contiguous:
        probe = np.dot(flat, np.zeros(flat.size, dtype=np.float32))
        if probe == 0:
            return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite output from {op}")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data.astype(_compute_dtype, copy=False)
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _shape_error(op: str, a: Tensor | tuple, b: Tensor | tuple) -> ShapeError:
    sa = a.shape if isinstance(a, Tensor) else a
    sb = b.shape if isinstance(b, Tensor) else b
    return ShapeError(f"{op}: incompatible shapes {tuple(sa)} and {tuple(sb)}")


def _is_row_broadcast(big: tuple, vec: tuple) -> bool:
    return len(vec) == 1 and len(big) >= 1 and big[-1] == vec[0] and len(big) > 1


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out the leading axes numpy broadcast over."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _sum_last(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keepdims; numpy's reduce is slow on short axes."""
    n = x.shape[-1]
    if n <= 256 and x.ndim > 1:
        return x @ np.ones((n, 1), dtype=x.dtype)
    return x.sum(axis=-1, keepdims=True)


def _max_last(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n <= 32:
        out = x[..., 0].copy()
        for i in range(1, n):
            np.maximum(out, x[..., i], out=out)
        return out[..., None]
    return x.max(axis=-1, keepdims=True)


def _sum_axis(x: np.ndarray, axis: int) -> np.ndarray:
    if axis in (-1, x.ndim - 1):
        return _sum_last(x)
    return x.sum(axis=axis, keepdims=True)


def _max_axis(x: np.ndarray, axis: int) -> np.ndarray:
    if axis in (-1, x.ndim - 1):
        return _max_last(x)
    return x.max(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# binary ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not (
        _is_row_broadcast(a.shape, b.shape) or _is_row_broadcast(b.shape, a.shape)
        or a.ndim == 0 or b.ndim == 0
    ):
        raise _shape_error("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


broadcast_add = add


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not (
        _is_row_broadcast(a.shape, b.shape) or _is_row_broadcast(b.shape, a.shape)
        or a.ndim == 0 or b.ndim == 0
    ):
        raise _shape_error("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), -_reduce_to(g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; equal shapes, a row vector, or a scalar."""
    if a.shape != b.shape and not (
        _is_row_broadcast(a.shape, b.shape) or _is_row_broadcast(b.shape, a.shape)
        or a.ndim == 0 or b.ndim == 0
    ):
        raise _shape_error("mul", a, b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = _reduce_to(g * bd, sa) if a.requires_grad else None
        gb = _reduce_to(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * DTYPE(c), (a,), lambda g: (g * DTYPE(c),), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a, b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    # stacked rows times one matrix: fold into a single 2D product
    folded = ad.ndim > 2 and bd.ndim == 2
    try:
        if folded:
            out = (ad.reshape(-1, sa[-1]) @ bd).reshape(sa[:-1] + (sb[-1],))
        else:
            out = np.matmul(ad, bd)
    except ValueError:
        raise _shape_error("matmul", a, b) from None

    def backward(g):
        ga = gb = None
        if folded:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(sa)
            if b.requires_grad:
                gb = ad.reshape(-1, sa[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _reduce_to(np.matmul(g, np.swapaxes(bd, -1, -2)), sa)
        if b.requires_grad:
            gb = _reduce_to(np.matmul(np.swapaxes(ad, -1, -2), g), sb)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# unary elementwise


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is 0
    return _make(np.where(mask, a.data, DTYPE(0)), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # overflow-free logistic
    return _make(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    _check_finite(x, "log input")
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _make(y, (a,), lambda g: (g / x,), "log")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2 * g * x,), "square")


def detach(a: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(a.data)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only where the input is strictly inside."""
    x = a.data
    inside = (x > lo) & (x < hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# axis ops


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    _check_finite(x, "softmax input")
    e = np.exp(x - _max_axis(x, axis))
    y = e / _sum_axis(e, axis)

    def backward(g):
        return (y * (g - _sum_axis(g * y, axis)),)

    return _make(y, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    _check_finite(x, "log_softmax input")
    shifted = x - _max_axis(x, axis)
    lse = np.log(_sum_axis(np.exp(shifted), axis))
    y = shifted - lse

    def backward(g):
        p = np.exp(y)
        return (g - p * _sum_axis(g, axis),)

    return _make(y, (a,), backward, "log_softmax")


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional affine gain/bias."""
    x = a.data
    n = x.shape[-1]
    mu = _sum_last(x) / n
    xc = x - mu
    var = _sum_last(xc * xc) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx = (inv / n) * (n * g - _sum_last(g) - xhat * _sum_last(g * xhat))
        return (gx,)

    out = _make(xhat, (a,), backward, "layer_norm")
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def sum_(a: Tensor, axis: int | tuple | None = None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis in (-1, a.ndim - 1) and a.ndim > 1:
        y = _sum_last(a.data)
        if not keepdims:
            y = y[..., 0]
    else:
        y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(y), (a,), backward, "sum")


def mean(a: Tensor, axis: int | tuple | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise _shape_error("concat", tensors[0], t)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
            for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax),
                 tuple(tensors), backward, "concat")


def slice_(a: Tensor, index) -> Tensor:
    shape = a.shape
    y = a.data[index]

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        return (full,)

    return _make(np.array(y), (a,), backward, "slice")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def repeat(a: Tensor, n: int, axis: int) -> Tensor:
    """Insert a new axis of length ``n`` by copying (explicit, not implicit, broadcast)."""
    y = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _make(y, (a,), lambda g: (g.sum(axis=axis),), "repeat")


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(tuple(shape))
    except ValueError:
        raise _shape_error("reshape", old, tuple(shape)) from None
    return _make(y, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Operations reachable from a loss, inputs before outputs."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.grads: dict[int, np.ndarray] = {}

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> list[Parameter]:
    """Accumulate d(loss)/d(param) into every reachable Parameter's ``grad``.

    Returns the parameters touched. The graph is released afterwards.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any parameter")
    tape = Tape.trace(loss)
    grads = tape.grads
    grads[id(loss)] = np.ones_like(loss.data)
    touched: list[Parameter] = []
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if isinstance(node, Parameter):
                node.grad = node.grad + g if node.grad is not None else g.copy()
                touched.append(node)
            else:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg.astype(_compute_dtype, copy=False) if prev is None else prev + pg
        node._parents = ()
        node._backward = None
    return touched


# ---------------------------------------------------------------------------
# gradient checking


def numeric_grad(fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-3,
                 coords: np.ndarray | None = None,
                 kinks: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``tensor.data``.

    Evaluated in float64 so rounding noise does not swamp the comparison.
    Probes ``x +- eps`` and ``x +- 2 eps``. With ``coords`` (flat indices) only
    those coordinates are probed and a matching 1-d array is returned. If
    ``kinks`` is given it is filled with True where the two plain central
    differences disagree, i.e. a non-smooth point lies inside the probe interval.
    """
    original = tensor.data
    work = original.astype(np.float64)
    tensor.data = work
    flat = work.reshape(-1)
    coords = np.arange(flat.size) if coords is None else np.asarray(coords)
    grad = np.zeros(coords.size, dtype=np.float64)
    kflat = kinks.reshape(-1) if kinks is not None else None
    try:
        with no_grad(), float64_mode():
            f0 = float(fn().data) if kflat is not None else 0.0
            for j, i in enumerate(coords):
                orig = flat[i]
                vals = []
                for step in (eps, -eps, 2 * eps, -2 * eps):
                    flat[i] = orig + step
                    vals.append(float(fn().data))
                flat[i] = orig
                # five-point central stencil, O(eps^4) truncation
                grad[j] = (8 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12 * eps)
                if kflat is not None:
                    kflat[j] = _straddles_kink(f0, vals, eps)
    finally:
        tensor.data = original
    return grad.reshape(original.shape) if coords.size == original.size else grad


KINK_TOL = 1e-3


def _straddles_kink(f0: float, vals: list[float], eps: float) -> bool:
    """Compare slope and curvature estimates at step eps and 2 eps.

    For a smooth function they agree to O(eps^2); a kink anywhere in
    ``[x - 2 eps, x + 2 eps]`` (including exactly at x) breaks one of them.
    """
    fp, fm, fp2, fm2 = vals
    d1, d2 = (fp - fm) / (2 * eps), (fp2 - fm2) / (4 * eps)
    c1, c2 = (fp - 2 * f0 + fm) / eps ** 2, (fp2 - 2 * f0 + fm2) / (4 * eps ** 2)
    slope_off = abs(d1 - d2) > KINK_TOL * max(abs(d1), abs(d2), 1e-9)
    curve_off = abs(c1 - c2) > 0.1 * max(abs(c1), abs(c2)) + 1e-3
    return slope_off or curve_off


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


@dataclass
class GradCheckResult:
    max_error: float
    checked: int
    kinks: int  # probe interval straddles a non-smooth point
    small: int  # analytic and numeric both below atol


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-3,
               atol: float = 0.0) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` closes over ``inputs`` (leaf tensors with ``requires_grad``) and
    must be deterministic. Coordinates whose analytic and numeric gradients are
    both below ``atol`` are ignored; with the default 0 nothing is skipped.
    """
    return grad_check_detail(fn, inputs, eps, atol).max_error


def grad_check_detail(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-3,
                      atol: float = 0.0, skip_kinks: bool = False,
                      max_coords: int | None = None, seed: int = 0) -> GradCheckResult:
    """``grad_check`` with options for large piecewise-smooth networks.

    ``skip_kinks`` drops coordinates where a relu kink falls inside the probe
    interval; finite differences say nothing there. ``max_coords`` probes a
    seeded random subset of at most that many coordinates per input.
    """
    for t in inputs:
        t.grad = np.zeros_like(t.data)
    backward(fn())
    rng = np.random.default_rng(seed)
    worst, checked, n_kinks, n_small = 0.0, 0, 0, 0
    for t in inputs:
        analytic = t.grad.astype(np.float64).reshape(-1)
        coords = np.arange(analytic.size)
        if max_coords is not None and analytic.size > max_coords:
            coords = np.sort(rng.choice(analytic.size, max_coords, replace=False))
        kinks = np.zeros(coords.size, dtype=bool)
        numeric = numeric_grad(fn, t, eps, coords, kinks).reshape(-1)
        analytic = analytic[coords]
        keep = np.ones(coords.size, dtype=bool)
        if atol > 0:
            keep &= (np.abs(analytic) > atol) | (np.abs(numeric) > atol)
            n_small += int(np.sum(~keep))
        if skip_kinks:
            n_kinks += int(np.sum(keep & kinks))
            keep &= ~kinks
        checked += int(np.sum(keep))
        worst = max(worst, relative_error(analytic[keep], numeric[keep]))
    return GradCheckResult(worst, checked, n_kinks, n_small)
