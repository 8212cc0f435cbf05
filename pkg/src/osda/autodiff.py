"""Reverse-mode automatic differentiation on dense float64 arrays.

A `Tensor` wraps a numpy array plus the bookkeeping needed to replay the
chain rule: the tensors it was computed from and a closure that pushes an
upstream gradient into them.  `backward` walks the recorded graph once in
reverse topological order, so every node's closure runs exactly once and
gradient accumulation order is a pure function of graph construction
order.  That last property is what makes whole training runs reproducible
bit-for-bit from a seed.

Everything is float64.  The op set is exactly what the adaptation
networks and losses need; this is not a general-purpose framework.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import ContractError, DimensionError

Array = np.ndarray

# Clamp applied to leaky-softmax logits before exponentiation. A bare exp
# overflows float64 near 710; +/-30 keeps every probability strictly
# inside (0, 1) while leaving a huge usable logit range.
LEAKY_LOGIT_CLAMP = 30.0

# Default floor/ceiling used by safe_log throughout the losses.
DEFAULT_EPS = 1e-7


class Tensor:
    """A node in the computation graph: value, parents, backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data: Array,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[Array], None] | None = None,
    ):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no graph: gradients never flow through this point."""
        return Tensor(self.data, op="detach")

    def accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # Operator sugar. Scalars are accepted; tensor-tensor ops require
    # identical shapes (broadcasting stays inside `affine`).
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_coerce(other)))

    def __rsub__(self, other) -> "Tensor":
        return add(neg(self), other)

    def __neg__(self) -> "Tensor":
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor, validating dtype and finiteness."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError("tensor data must be finite (no NaN/Inf)")
    return Tensor(arr, requires_grad=requires_grad)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# Forward kernels. The no-graph evaluation paths (prediction, metrics,
# weight traces) call these directly, so tape and tape-free forwards are
# bitwise identical by construction.
# ---------------------------------------------------------------------------


def affine_forward(x: Array, w: Array, b: Array) -> Array:
    return x @ w + b


def relu_forward(x: Array) -> Array:
    return np.maximum(x, 0.0)


def softmax_forward(z: Array) -> Array:
    shifted = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def leaky_softmax_forward(l: Array) -> Array:
    k = l.shape[1]
    e = np.exp(np.clip(l, -LEAKY_LOGIT_CLAMP, LEAKY_LOGIT_CLAMP))
    return e / (k + np.sum(e, axis=1, keepdims=True))


def batch_norm_forward(
    x: Array, gain: Array, bias: Array, eps: float
) -> tuple[Array, Array, Array]:
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    xhat = (x - mean) / np.sqrt(var + eps)
    return gain * xhat + bias, xhat, var


# ---------------------------------------------------------------------------
# Differentiable operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b)
    if a.data.shape != b.data.shape and a.data.ndim and b.data.ndim:
        _same_shape(a, b, "add")
    out_rg = a.requires_grad or b.requires_grad
    out = Tensor(a.data + b.data, out_rg, "add", (a, b))
    if out_rg:

        def backward_fn(g: Array) -> None:
            if a.requires_grad:
                a.accumulate(g if g.shape == a.data.shape else np.sum(g) * np.ones_like(a.data))
            if b.requires_grad:
                b.accumulate(g if g.shape == b.data.shape else np.sum(g) * np.ones_like(b.data))

        out._backward = backward_fn
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b)
    if b.data.ndim and a.data.ndim:
        _same_shape(a, b, "mul")
    out_rg = a.requires_grad or b.requires_grad
    out = Tensor(a.data * b.data, out_rg, "mul", (a, b))
    if out_rg:

        def backward_fn(g: Array) -> None:
            if a.requires_grad:
                ga = g * b.data
                a.accumulate(ga if ga.shape == a.data.shape else np.sum(ga) * np.ones_like(a.data))
            if b.requires_grad:
                gb = g * a.data
                b.accumulate(gb if gb.shape == b.data.shape else np.sum(gb) * np.ones_like(b.data))

        out._backward = backward_fn
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, a.requires_grad, "neg", (a,))
    if a.requires_grad:

        def backward_fn(g: Array) -> None:
            a.accumulate(-g)

        out._backward = backward_fn
    return out


def one_minus(a: Tensor) -> Tensor:
    """1 - a, elementwise."""
    out = Tensor(1.0 - a.data, a.requires_grad, "one_minus", (a,))
    if a.requires_grad:

        def backward_fn(g: Array) -> None:
            a.accumulate(-g)

        out._backward = backward_fn
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with a row-broadcast bias; the layer primitive."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(
            f"affine: expected x[BxI], w[IxO], b[O], got x{x.data.shape} "
            f"w{w.data.shape} b{b.data.shape}"
        )
    if x.data.shape[1] != w.data.shape[0] or b.data.shape[0] != w.data.shape[1]:
        raise DimensionError(
            f"affine: x{x.data.shape} @ w{w.data.shape} + b{b.data.shape} does not conform"
        )
    out_rg = x.requires_grad or w.requires_grad or b.requires_grad
    out = Tensor(affine_forward(x.data, w.data, b.data), out_rg, "affine", (x, w, b))
    if out_rg:

        def backward_fn(g: Array) -> None:
            if x.requires_grad:
                x.accumulate(g @ w.data.T)
            if w.requires_grad:
                w.accumulate(x.data.T @ g)
            if b.requires_grad:
                b.accumulate(g.sum(axis=0))

        out._backward = backward_fn
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(relu_forward(x.data), x.requires_grad, "relu", (x,))
    if x.requires_grad:
        mask = x.data > 0.0

        def backward_fn(g: Array) -> None:
            x.accumulate(g * mask)

        out._backward = backward_fn
    return out


def softmax_stable(z: Tensor) -> Tensor:
    """Row softmax with max subtraction; rows sum to 1 within 1e-12."""
    if z.data.ndim != 2 or z.data.shape[1] < 1:
        raise DimensionError(f"softmax_stable: expected [BxM], M>=1, got {z.data.shape}")
    p = softmax_forward(z.data)
    out = Tensor(p, z.requires_grad, "softmax_stable", (z,))
    if z.requires_grad:

        def backward_fn(g: Array) -> None:
            # dz_j = p_j * (g_j - sum_c g_c p_c)
            inner = np.sum(g * p, axis=1, keepdims=True)
            z.accumulate(p * (g - inner))

        out._backward = backward_fn
    return out


def leaky_softmax(l: Tensor) -> Tensor:
    """exp(l_c) / (K + sum_j exp(l_j)) rowwise; rows sum to strictly < 1.

    Logits are clamped to +/-30 before exp so the output stays inside
    (0, 1) for any finite input.
    """
    if l.data.ndim != 2 or l.data.shape[1] < 1:
        raise DimensionError(f"leaky_softmax: expected [BxK], K>=1, got {l.data.shape}")
    p = leaky_softmax_forward(l.data)
    out = Tensor(p, l.requires_grad, "leaky_softmax", (l,))
    if l.requires_grad:

        def backward_fn(g: Array) -> None:
            # Same Jacobian shape as softmax: dl_j = p_j * (g_j - sum_c g_c p_c).
            # The logit clamp passes gradients straight through; a zero
            # there would make saturation unrecoverable for the scorer.
            inner = np.sum(g * p, axis=1, keepdims=True)
            l.accumulate(p * (g - inner))

        out._backward = backward_fn
    return out


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    if lam < 0:
        raise ContractError(f"grad_reverse: lambda must be >= 0, got {lam}")
    out = Tensor(x.data, x.requires_grad, "grad_reverse", (x,))
    if x.requires_grad:

        def backward_fn(g: Array) -> None:
            x.accumulate(-lam * g)

        out._backward = backward_fn
    return out


def safe_log(p: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """log(clamp(p, eps, 1-eps)); the guard every loss routes its logs through.

    The gradient is 1/clamp(p, eps, 1-eps) everywhere, so it stays
    bounded by 1/eps but never goes to zero: a probability driven onto
    the clamp floor by the adversarial game can still be pulled back.
    """
    if not 0.0 < eps < 0.5:
        raise ContractError(f"safe_log: eps must lie in (0, 0.5), got {eps}")
    clamped = np.clip(p.data, eps, 1.0 - eps)
    out = Tensor(np.log(clamped), p.requires_grad, "safe_log", (p,))
    if p.requires_grad:

        def backward_fn(g: Array) -> None:
            p.accumulate(g / clamped)

        out._backward = backward_fn
    return out


def take_per_row(t: Tensor, indices: Array) -> Tensor:
    """out[i] = t[i, indices[i]]; used to pick true-class probabilities."""
    idx = np.asarray(indices)
    if t.data.ndim != 2 or idx.shape != (t.data.shape[0],):
        raise DimensionError(
            f"take_per_row: t{t.data.shape} with indices{idx.shape} does not conform"
        )
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= t.data.shape[1]):
        raise ContractError(
            f"take_per_row: index out of range for {t.data.shape[1]} columns"
        )
    rows = np.arange(t.data.shape[0])
    out = Tensor(t.data[rows, idx], t.requires_grad, "take_per_row", (t,))
    if t.requires_grad:

        def backward_fn(g: Array) -> None:
            full = np.zeros_like(t.data)
            np.add.at(full, (rows, idx), g)
            t.accumulate(full)

        out._backward = backward_fn
    return out


def column(t: Tensor, j: int) -> Tensor:
    """out[i] = t[i, j]; e.g. the unknown-class probability column."""
    if t.data.ndim != 2 or not 0 <= j < t.data.shape[1]:
        raise DimensionError(f"column: index {j} invalid for shape {t.data.shape}")
    out = Tensor(t.data[:, j].copy(), t.requires_grad, "column", (t,))
    if t.requires_grad:

        def backward_fn(g: Array) -> None:
            full = np.zeros_like(t.data)
            full[:, j] = g
            t.accumulate(full)

        out._backward = backward_fn
    return out


def row_sum(t: Tensor) -> Tensor:
    """out[i] = sum_j t[i, j]."""
    if t.data.ndim != 2:
        raise DimensionError(f"row_sum: expected a matrix, got shape {t.data.shape}")
    out = Tensor(t.data.sum(axis=1), t.requires_grad, "row_sum", (t,))
    if t.requires_grad:

        def backward_fn(g: Array) -> None:
            t.accumulate(np.repeat(g[:, None], t.data.shape[1], axis=1))

        out._backward = backward_fn
    return out


def mean_all(t: Tensor) -> Tensor:
    """Scalar mean over all entries; the batch-mean reduction of every loss."""
    n = t.data.size
    out = Tensor(np.asarray(t.data.mean()), t.requires_grad, "mean_all", (t,))
    if t.requires_grad:

        def backward_fn(g: Array) -> None:
            t.accumulate(np.full_like(t.data, float(g) / n))

        out._backward = backward_fn
    return out


def batch_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-feature standardization over the batch with learnable gain/bias.

    Uses the statistics of the current batch in both training and
    evaluation, so outputs depend on batch composition; off by default in
    the generator for exactly that reason.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"batch_norm: expected [BxD], got {x.data.shape}")
    y, xhat, var = batch_norm_forward(x.data, gain.data, bias.data, eps)
    out_rg = x.requires_grad or gain.requires_grad or bias.requires_grad
    out = Tensor(y, out_rg, "batch_norm", (x, gain, bias))
    if out_rg:
        inv_std = 1.0 / np.sqrt(var + eps)
        n = x.data.shape[0]

        def backward_fn(g: Array) -> None:
            if gain.requires_grad:
                gain.accumulate(np.sum(g * xhat, axis=0))
            if bias.requires_grad:
                bias.accumulate(np.sum(g, axis=0))
            if x.requires_grad:
                gx_hat = g * gain.data
                # Standard batch-norm backward with batch statistics.
                term = gx_hat - gx_hat.mean(axis=0) - xhat * np.mean(gx_hat * xhat, axis=0)
                x.accumulate(term * inv_std)

        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def topo_order(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from `loss`, inputs before outputs, each exactly once."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        # Reversed push preserves the parents' left-to-right order in the
        # postorder, which pins gradient accumulation order.
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) to every reachable tensor's .grad slot."""
    if loss.data.size != 1:
        raise ContractError(
            f"backward: loss must be scalar, got shape {loss.data.shape}"
        )
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Parameters and the optimizer
# ---------------------------------------------------------------------------


@dataclass
class Param:
    value: Tensor
    momentum: Array
    group: str


class ParamStore:
    """Named parameters partitioned into group tags, each with momentum state."""

    def __init__(self) -> None:
        self._params: dict[str, Param] = {}

    def register(self, name: str, data: Array, group: str) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered")
        value = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, op="param")
        self._params[name] = Param(value, np.zeros_like(value.data), group)
        return value

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self, groups: Iterable[str] | None = None) -> list[str]:
        if groups is None:
            return list(self._params)
        wanted = set(groups)
        return [n for n, p in self._params.items() if p.group in wanted]

    def items(self) -> Iterator[tuple[str, Param]]:
        return iter(self._params.items())

    @property
    def groups(self) -> set[str]:
        return {p.group for p in self._params.values()}

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.value.grad = None

    def grads(self, groups: Iterable[str] | None = None) -> dict[str, Array | None]:
        return {n: self._params[n].value.grad for n in self.names(groups)}

    def snapshot(self, groups: Iterable[str] | None = None) -> dict[str, Array]:
        """Copies of the current values, for trajectory comparisons."""
        return {n: self._params[n].value.data.copy() for n in self.names(groups)}

    def load(self, values: dict[str, Array]) -> None:
        for name, data in values.items():
            p = self._params[name]
            if p.value.data.shape != data.shape:
                raise DimensionError(
                    f"load: parameter {name!r} has shape {p.value.data.shape}, "
                    f"file has {data.shape}"
                )
            p.value.data = np.asarray(data, dtype=np.float64).copy()
            p.momentum = np.zeros_like(p.value.data)


def sgd_step(
    store: ParamStore,
    grads: dict[str, Array | None],
    lr: float,
    momentum: float,
    groups: Iterable[str],
) -> None:
    """Heavy-ball update v <- mu*v + g; theta <- theta - lr*v on the groups.

    Every parameter in a selected group must have a gradient; anything
    else in `grads` is ignored.
    """
    for name in store.names(groups):
        g = grads.get(name)
        if g is None:
            raise ContractError(f"sgd_step: missing gradient for parameter {name!r}")
        p = store[name]
        p.momentum = momentum * p.momentum + g
        p.value.data = p.value.data - lr * p.momentum


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Array:
    """Uniform init in +/-sqrt(6/(fan_in+fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
