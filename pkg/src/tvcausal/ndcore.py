"""Dense float64 tensors with a small tape-based reverse-mode differentiator.

Values are plain ``numpy.ndarray`` objects (float64, row-major).  A
:class:`Tensor` wraps a value together with the closures needed to push
gradients back to its parents.  Only the op vocabulary the model and the
acyclicity penalties need is provided.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg as sla


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class SingularityError(ArithmeticError):
    """Raised when a log-determinant leaves the positive-determinant region."""

    def __init__(self, message: str, pivot: int, batch_index: int | None = None):
        super().__init__(message)
        self.pivot = pivot
        self.batch_index = batch_index


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A node on the differentiation tape."""

    __slots__ = ("value", "parents", "requires_grad", "name")

    def __init__(self, value, parents: Sequence[tuple["Tensor", Callable]] = (),
                 requires_grad: bool = False, name: str | None = None):
        self.value = as_array(value)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, grad={self.requires_grad})"

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
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self):
        return swap_last(self)


def param(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def const(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def detach(t: Tensor) -> Tensor:
    return Tensor(t.value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _node(value, *links) -> Tensor:
    return Tensor(value, [(p, fn) for p, fn in links if p.requires_grad])


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    return _node(a.value + b.value,
                 (a, lambda g: _unbroadcast(g, a.shape)),
                 (b, lambda g: _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    return _node(a.value - b.value,
                 (a, lambda g: _unbroadcast(g, a.shape)),
                 (b, lambda g: _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    return _node(av * bv,
                 (a, lambda g: _unbroadcast(g * bv, a.shape)),
                 (b, lambda g: _unbroadcast(g * av, b.shape)))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.value
    return _node(out, (a, lambda g: -g * out * out))


def square(a: Tensor) -> Tensor:
    av = a.value
    return _node(av * av, (a, lambda g: 2.0 * g * av))


def absolute(a: Tensor) -> Tensor:
    av = a.value
    return _node(np.abs(av), (a, lambda g: g * np.sign(av)))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return _node(out, (a, lambda g: g * 0.5 / np.where(out > 0, out, np.inf)))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _node(a.value * mask, (a, lambda g: g * mask))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _node(out, (a, lambda g: g * out * (1.0 - out)))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _node(out, (a, lambda g: g * (1.0 - out * out)))


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "identity": identity,
}


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a, back))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def norm1(a: Tensor) -> Tensor:
    """Induced 1-norm (maximum absolute column sum) over the last two axes.

    The gradient is the subgradient through the first maximising column.
    """
    av = a.value
    colsum = np.abs(av).sum(axis=-2)
    arg = colsum.argmax(axis=-1)

    def back(g):
        out = np.zeros_like(av)
        mask = np.zeros(colsum.shape, dtype=bool)
        np.put_along_axis(mask, arg[..., None], True, axis=-1)
        out += np.sign(av) * mask[..., None, :]
        return out * np.asarray(g)[..., None, None]

    return _node(colsum.max(axis=-1), (a, back))


# ---------------------------------------------------------------- structural

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.value.reshape(shape), (a, lambda g: g.reshape(old)))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a, lambda g: np.transpose(g, inv)))


def swap_last(a: Tensor) -> Tensor:
    return _node(np.swapaxes(a.value, -1, -2), (a, lambda g: np.swapaxes(g, -1, -2)))


def take(a: Tensor, key) -> Tensor:
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return out

    return _node(a.value[key], (a, back))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [const(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def make_back(i):
        return lambda g: np.split(g, sizes, axis=axis)[i]

    return _node(np.concatenate([p.value for p in parts], axis=axis),
                 *[(p, make_back(i)) for i, p in enumerate(parts)])


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    return _node(av @ bv,
                 (a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape)),
                 (b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)))


def lu_logdet(m: np.ndarray) -> tuple[float, tuple]:
    """log det of one square matrix via pivoted LU.

    Returns the log-determinant and the LU factorisation for reuse.  Raises
    :class:`SingularityError` if a pivot is zero or the determinant sign is
    negative; the error names the offending pivot.
    """
    lu, piv = sla.lu_factor(m, check_finite=False)
    diag = np.diag(lu)
    zero = np.flatnonzero(diag == 0)
    if zero.size:
        raise SingularityError(f"zero pivot at index {zero[0]}", int(zero[0]))
    step = np.where(diag < 0, -1, 1) * np.where(piv != np.arange(piv.size), -1, 1)
    running = np.cumprod(step)
    if running[-1] < 0:
        # last pivot at which the running sign turned negative
        turned = np.flatnonzero((running < 0) & (np.concatenate([[1], running[:-1]]) > 0))
        offending = int(turned[-1])
        raise SingularityError(f"negative determinant (pivot {offending})", offending)
    return float(np.log(np.abs(diag)).sum()), (lu, piv)


def logdet_pd(m) -> Tensor:
    """Natural log-determinant over the last two axes (batched).

    Gradient is ``m^{-T}`` per matrix.
    """
    m = const(m)
    mv = m.value
    if mv.ndim < 2 or mv.shape[-1] != mv.shape[-2]:
        raise ShapeError(f"logdet_pd: expected square matrices, got {mv.shape}")
    d = mv.shape[-1]
    flat = mv.reshape(-1, d, d)
    vals = np.empty(flat.shape[0])
    inv_t = np.empty_like(flat)
    eye = np.eye(d)
    for i, mat in enumerate(flat):
        try:
            vals[i], factors = lu_logdet(mat)
        except SingularityError as err:
            err.batch_index = i
            raise
        if m.requires_grad:
            inv_t[i] = sla.lu_solve(factors, eye, check_finite=False).T
    batch = mv.shape[:-2]
    inv_t = inv_t.reshape(mv.shape)
    return _node(vals.reshape(batch) if batch else vals[0],
                 (m, lambda g: np.asarray(g)[..., None, None] * inv_t))


def conv1d(x, w, b=None) -> Tensor:
    """Valid 1-D convolution along axis -2.

    x: (..., L, C_in); w: (width, C_in, C_out); b: (C_out,).
    Returns (..., L - width + 1, C_out).
    """
    x, w = const(x), const(w)
    width, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape[-1]} != kernel channels {c_in}")
    length = x.shape[-2]
    if width > length:
        raise ShapeError(f"conv1d: kernel width {width} exceeds length {length}")
    n_out = length - width + 1
    # patches: (..., n_out, width, C_in)
    idx = np.arange(n_out)[:, None] + np.arange(width)[None, :]
    patches = x.value[..., idx, :]
    flat = patches.reshape(*patches.shape[:-2], width * c_in)
    wf = w.value.reshape(width * c_in, c_out)
    out = flat @ wf

    def back_w(g):
        gw = flat.reshape(-1, width * c_in).T @ g.reshape(-1, c_out)
        return gw.reshape(w.shape)

    def back_x(g):
        gp = (g @ wf.T).reshape(patches.shape)
        gx = np.zeros(x.shape)
        for k in range(width):
            gx[..., k:k + n_out, :] += gp[..., :, k, :]
        return gx

    node = _node(out, (w, back_w), (x, back_x))
    if b is not None:
        node = add(node, b)
    return node


# ---------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``root`` w.r.t. every tracked leaf.

    Leaves are nodes created with :func:`param`.  If ``wrt`` is given, the
    result is restricted to those tensors (zeros for unreachable ones).
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                leaves[node] = g
            continue
        for parent, fn in node.parents:
            contrib = fn(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = np.asarray(contrib, dtype=np.float64)
    if wrt is None:
        return leaves
    return {t: leaves.get(t, np.zeros_like(t.value)) for t in wrt}


# ---------------------------------------------------------------- randomness

class Rng:
    """Seeded random source.

    Bits come from the Philox-4x64 counter-based generator; Gaussian draws use
    numpy's ziggurat transform (``Generator.standard_normal``).  Children are
    forked through ``SeedSequence.spawn`` so sub-streams never overlap.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = int(seed.entropy)
        else:
            self.seed = int(seed)
            self._seq = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    def spawn(self, n: int) -> list["Rng"]:
        return [Rng(s) for s in self._seq.spawn(n)]

    def normal(self, scale: float = 1.0, size=None) -> np.ndarray:
        return scale * self.gen.standard_normal(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)

    def random(self, size=None) -> np.ndarray:
        return self.gen.random(size)
