"""Reverse-mode automatic differentiation over dense float64 arrays.

A `Tensor` records the operation that produced it together with
vector-Jacobian callbacks for each input; `Tensor.backward` replays the
tape in reverse topological order. The op set is deliberately small:
elementwise arithmetic with numpy broadcasting, 2-D matmul, reductions,
row gathering for embedding lookups, and the handful of nonlinearities
the losses need. Everything runs in double precision so that analytic
gradients can be validated against central finite differences at tight
relative tolerances.

Division is only supported by non-differentiable values (Python numbers
or ndarrays): every divisor in this codebase is either a constant or an
explicitly stopped gradient, and keeping division out of the tape makes
that decision structural rather than conventional.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.special import expit
from scipy.special import logsumexp as _np_logsumexp

from .errors import ArgumentError, NumericalError

__all__ = [
    "Tensor",
    "ParamBlock",
    "ParamSet",
    "AdamState",
    "FiniteDifferenceReport",
    "concat",
    "take_rows",
    "repeat_rows",
    "tile_rows",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softplus",
    "logsumexp",
    "stop_gradient",
    "value_and_grad",
    "loss_value",
    "finite_difference_check",
    "adam_init",
    "adam_step",
]


def _unbroadcast(grad, shape):
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node of the computation tape wrapping a float64 ndarray."""

    __slots__ = ("value", "grad", "_parents", "_vjps")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            value = a.value + b.value
            return Tensor(
                value,
                (a, b),
                (
                    lambda g: _unbroadcast(g, a.value.shape),
                    lambda g: _unbroadcast(g, b.value.shape),
                ),
            )
        return Tensor(
            self.value + other,
            (self,),
            (lambda g: _unbroadcast(g, self.value.shape),),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.value, (self,), (lambda g: -g,))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            return Tensor(
                a.value * b.value,
                (a, b),
                (
                    lambda g: _unbroadcast(g * b.value, a.value.shape),
                    lambda g: _unbroadcast(g * a.value, b.value.shape),
                ),
            )
        other = np.asarray(other, dtype=np.float64)
        return Tensor(
            self.value * other,
            (self,),
            (lambda g: _unbroadcast(g * other, self.value.shape),),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ArgumentError(
                "tensor/tensor division is not on the tape; wrap the divisor "
                "in stop_gradient() and divide by its ndarray value"
            )
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ArgumentError("matmul expects 2-D operands")
        return Tensor(
            a.value @ b.value,
            (a, b),
            (lambda g: g @ b.value.T, lambda g: a.value.T @ g),
        )

    # -- structural ops ----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.value.shape
        return Tensor(
            self.value.reshape(shape), (self,), (lambda g: g.reshape(old),)
        )

    def transpose(self):
        return Tensor(self.value.T, (self,), (lambda g: g.T,))

    @property
    def T(self):
        return self.transpose()

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None):
        if axis is None:
            shape = self.value.shape
            return Tensor(
                np.sum(self.value),
                (self,),
                (lambda g: np.broadcast_to(g, shape),),
            )
        return Tensor(
            np.sum(self.value, axis=axis),
            (self,),
            (
                lambda g: np.broadcast_to(
                    np.expand_dims(g, axis), self.value.shape
                ),
            ),
        )

    def mean(self, axis=None):
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    def square(self):
        return Tensor(
            self.value * self.value, (self,), (lambda g: 2.0 * self.value * g,)
        )

    # -- backward pass -------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this (scalar) tensor into the tape leaves."""
        if self.value.shape != ():
            raise ArgumentError("backward() requires a scalar root")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            if node.grad is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                # grad buffers are never mutated in place, so holding a
                # view returned by a vjp is safe and saves large copies
                contribution = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = contribution
                else:
                    parent.grad = parent.grad + contribution


def concat(tensors, axis=0):
    tensors = list(tensors)
    values = [t.value for t in tensors]
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return Tensor(
        np.concatenate(values, axis=axis),
        tuple(tensors),
        tuple(make_vjp(i) for i in range(len(tensors))),
    )


def take_rows(table, indices):
    """Gather along the first axis; backward scatter-adds duplicate rows."""
    indices = np.asarray(indices)

    def vjp(g):
        out = np.zeros_like(table.value)
        np.add.at(out, indices, g)
        return out

    return Tensor(table.value[indices], (table,), (vjp,))


def repeat_rows(t, repeats):
    """Each row of a 2-D tensor repeated `repeats` times, contiguously.

    The backward pass is a reshape-sum, which is why user-item grids are
    built from this instead of gathering B*M rows and scatter-adding
    them back.
    """
    n, k = t.value.shape

    def vjp(g):
        return g.reshape(n, repeats, k).sum(axis=1)

    return Tensor(np.repeat(t.value, repeats, axis=0), (t,), (vjp,))


def tile_rows(t, reps):
    """The whole 2-D tensor stacked `reps` times; backward is a reshape-sum."""
    n, k = t.value.shape

    def vjp(g):
        return g.reshape(reps, n, k).sum(axis=0)

    return Tensor(np.tile(t.value, (reps, 1)), (t,), (vjp,))


def sigmoid(t):
    value = expit(t.value)
    return Tensor(value, (t,), (lambda g: g * value * (1.0 - value),))


def tanh(t):
    value = np.tanh(t.value)
    return Tensor(value, (t,), (lambda g: g * (1.0 - value * value),))


def exp(t):
    value = np.exp(t.value)
    return Tensor(value, (t,), (lambda g: g * value,))


def log(t):
    return Tensor(np.log(t.value), (t,), (lambda g: g / t.value,))


def softplus(t):
    """log(1 + e^x), evaluated without overflow for large |x|."""
    return Tensor(
        np.logaddexp(0.0, t.value), (t,), (lambda g: g * expit(t.value),)
    )


def logsumexp(t, axis):
    """Max-subtracted log-sum-exp along `axis`; gradient is the softmax."""
    value = _np_logsumexp(t.value, axis=axis)

    def vjp(g):
        soft = np.exp(t.value - np.expand_dims(value, axis))
        return np.expand_dims(g, axis) * soft

    return Tensor(value, (t,), (vjp,))


def stop_gradient(t):
    """Detach: same value, no gradient path into `t`."""
    return Tensor(t.value)


# -- parameters --------------------------------------------------------------


@dataclasses.dataclass
class ParamBlock:
    """A named dense parameter array with a fixed shape.

    `decay=False` exempts a block from weight decay; bias-like blocks
    need this because Adam turns even a tiny decay gradient into
    full-size steps once the data gradient vanishes, which drifts any
    bias initialized away from zero.
    """

    name: str
    values: np.ndarray
    trainable: bool = True
    decay: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NumericalError(f"parameter block {self.name!r} is non-finite")


class ParamSet:
    """Ordered collection of named parameter blocks."""

    def __init__(self, blocks=()):
        self._blocks = {}
        for block in blocks:
            self.add(block)

    def add(self, block):
        if block.name in self._blocks:
            raise ArgumentError(f"duplicate parameter block {block.name!r}")
        self._blocks[block.name] = block

    def __getitem__(self, name):
        return self._blocks[name]

    def __contains__(self, name):
        return name in self._blocks

    def __iter__(self):
        return iter(self._blocks.values())

    def names(self):
        return list(self._blocks)

    def trainable(self):
        return [b for b in self._blocks.values() if b.trainable]

    def leaves(self):
        """Fresh tape leaves for every block, keyed by name."""
        return {name: Tensor(block.values) for name, block in self._blocks.items()}

    def copy(self):
        return ParamSet(
            ParamBlock(b.name, b.values.copy(), b.trainable, b.decay)
            for b in self
        )

    def randomize(self, rng, std=0.7):
        """Overwrite every block with Gaussian noise, shapes unchanged.

        Gradient verification wants a generic, well-conditioned point:
        structured initializations (exact-copy heads, zero biases) sit on
        symmetry manifolds where true gradients cancel to the roundoff
        floor and central differences turn into noise quotients.
        """
        for block in self:
            block.values[...] = std * rng.standard_normal(block.values.shape)


# -- loss evaluation -----------------------------------------------------------


def loss_value(loss_fn, params):
    """Forward-only evaluation of `loss_fn(leaves) -> Tensor` as a float."""
    out = loss_fn(params.leaves())
    return float(out.value)


def value_and_grad(loss_fn, params):
    """Evaluate a scalar loss and its exact gradients.

    `loss_fn` receives a dict of leaf tensors keyed by block name and
    must return a scalar tensor. The gradient map covers every trainable
    block; blocks the loss never touches get zero arrays.
    """
    leaves = params.leaves()
    out = loss_fn(leaves)
    loss = float(out.value)
    if not math.isfinite(loss):
        raise NumericalError(f"loss evaluated to a non-finite value ({loss})")
    out.backward()
    grads = {}
    for block in params.trainable():
        g = leaves[block.name].grad
        if g is None:
            g = np.zeros_like(block.values)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"gradient for block {block.name!r} is non-finite")
        grads[block.name] = g
    return loss, grads


@dataclasses.dataclass
class FiniteDifferenceReport:
    """Per-block worst relative errors from a central-difference sweep."""

    step: float
    rel_tol: float
    per_block: dict
    max_rel_error: float
    passed: bool

    def worst_block(self):
        return max(self.per_block, key=self.per_block.get)

    def lines(self):
        out = []
        for name, err in sorted(self.per_block.items()):
            mark = "ok" if err <= self.rel_tol else "FAIL"
            out.append(f"{name:24s} max_rel_error={err:.3e}  [{mark}]")
        return out


def finite_difference_check(loss_fn, params, step=1e-5, rel_tol=1e-4,
                            grad_transform=None):
    """Compare analytic gradients against central differences.

    Every scalar coordinate of every trainable block is perturbed by
    ±step; the relative error uses max(|analytic|, |numeric|, 1e-8) as
    denominator. Non-trainable blocks are never perturbed.
    `grad_transform` corrupts the analytic gradients before comparison;
    it exists to verify that the checker catches wrong gradients.
    """
    if step <= 0:
        raise ArgumentError("finite-difference step must be positive")
    _, grads = value_and_grad(loss_fn, params)
    if grad_transform is not None:
        grads = grad_transform(grads)
    per_block = {}
    for block in params.trainable():
        analytic = grads[block.name].ravel()
        flat = block.values.ravel()
        worst = 0.0
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + step
            plus = loss_value(loss_fn, params)
            flat[j] = saved - step
            minus = loss_value(loss_fn, params)
            flat[j] = saved
            numeric = (plus - minus) / (2.0 * step)
            denom = max(abs(analytic[j]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[j] - numeric) / denom)
        per_block[block.name] = worst
    max_err = max(per_block.values()) if per_block else 0.0
    return FiniteDifferenceReport(
        step=step,
        rel_tol=rel_tol,
        per_block=per_block,
        max_rel_error=max_err,
        passed=max_err <= rel_tol,
    )


# -- Adam ---------------------------------------------------------------------


@dataclasses.dataclass
class AdamState:
    """Adam moments and hyperparameters for one ParamSet."""

    learning_rate: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    step_count: int
    m: dict
    v: dict


def adam_init(params, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0):
    return AdamState(
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
        step_count=0,
        m={b.name: np.zeros_like(b.values) for b in params.trainable()},
        v={b.name: np.zeros_like(b.values) for b in params.trainable()},
    )


def adam_step(state, params, grads):
    """One bias-corrected Adam update, in place.

    Weight decay is added to the gradient (coupled L2 form). Blocks with
    trainable=False are untouched; they are not even present in the
    moment maps.
    """
    state.step_count += 1
    t = state.step_count
    for block in params.trainable():
        g = grads[block.name]
        if g.shape != block.values.shape:
            raise NumericalError(
                f"gradient shape {g.shape} does not match block "
                f"{block.name!r} shape {block.values.shape}"
            )
        if state.weight_decay and block.decay:
            g = g + state.weight_decay * block.values
        m = state.m[block.name]
        v = state.v[block.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        block.values -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
