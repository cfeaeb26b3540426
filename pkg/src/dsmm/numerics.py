"""Dense float64 tensors with reverse-mode autodiff, parameter containers,
update rules, a finite-difference oracle, and deterministic named RNG streams.

Everything here has pure-value semantics: operations never mutate their
inputs, so parameter updates can be replayed or run speculatively (the
trainer's virtual step relies on this).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import numpy as np

LOG_CLAMP = 1e-12


class NumericError(RuntimeError):
    """A primitive produced a non-finite value."""


class ContractError(ValueError):
    """An operation was called outside its contract."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _require_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value in primitive '{op}'")


class Tensor:
    """Node in a reverse-mode computation graph over float64 arrays.

    Graphs are built eagerly by the primitives below; ``backward`` walks the
    graph once in reverse topological order and accumulates ``grad`` arrays
    on every node that contributed to the output. Nodes optionally carry a
    forward-mode tangent (``tan``) so one pass can also evaluate a
    Jacobian-vector product; see ``jvp``.
    """

    __slots__ = ("data", "grad", "tan", "_parents", "_backprop")

    # defer mixed numpy/Tensor arithmetic to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, _parents=(), _backprop=None, _op="leaf", tan=None):
        self.data = _as_array(data)
        _require_finite(self.data, _op)
        self.grad: np.ndarray | None = None
        self.tan: np.ndarray | None = tan
        self._parents = _parents
        self._backprop = _backprop

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of this node w.r.t. every ancestor.

        ``seed`` defaults to ones (the usual scalar-loss case).
        """
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data) if seed is None else _as_array(seed)
        for node in reversed(topo):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = _unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _tan_or_zero(t: Tensor) -> np.ndarray:
    return t.tan if t.tan is not None else np.zeros_like(t.data)


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backprop(g):
        _accumulate(a, g)
        _accumulate(b, g)

    tan = None
    if a.tan is not None or b.tan is not None:
        tan = _tan_or_zero(a) + _tan_or_zero(b)
    return Tensor(data, (a, b), backprop, "add", tan)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backprop(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    tan = None
    if a.tan is not None or b.tan is not None:
        tan = _tan_or_zero(a) * b.data + a.data * _tan_or_zero(b)
    return Tensor(data, (a, b), backprop, "mul", tan)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError(
            f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def backprop(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    tan = None
    if a.tan is not None or b.tan is not None:
        tan = _tan_or_zero(a) @ b.data + a.data @ _tan_or_zero(b)
    return Tensor(data, (a, b), backprop, "matmul", tan)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    local = out * (1.0 - out)

    def backprop(g):
        _accumulate(a, g * local)

    tan = None if a.tan is None else a.tan * local
    return Tensor(out, (a,), backprop, "sigmoid", tan)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def backprop(g):
        _accumulate(a, g * mask)

    tan = None if a.tan is None else a.tan * mask
    return Tensor(data, (a,), backprop, "relu", tan)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    local = 1.0 - data * data

    def backprop(g):
        _accumulate(a, g * local)

    tan = None if a.tan is None else a.tan * local
    return Tensor(data, (a,), backprop, "tanh", tan)


def logc(a: Tensor, clamp: float = LOG_CLAMP) -> Tensor:
    """Natural log of max(x, clamp); below the clamp the derivative is zero."""
    clamped = np.maximum(a.data, clamp)
    data = np.log(clamped)
    local = np.where(a.data >= clamp, 1.0 / clamped, 0.0)

    def backprop(g):
        _accumulate(a, g * local)

    tan = None if a.tan is None else a.tan * local
    return Tensor(data, (a,), backprop, "log", tan)


def powc(a: Tensor, exponent: float) -> Tensor:
    """x ** exponent for a constant exponent and non-negative base."""
    if np.any(a.data < 0.0):
        raise ContractError("powc requires a non-negative base")
    if exponent == 0.0:
        tan = None if a.tan is None else np.zeros_like(a.data)
        return Tensor(np.ones_like(a.data), (a,), None, "pow", tan)
    data = a.data ** exponent
    base = a.data
    if exponent >= 1.0:
        local = exponent * np.where(base > 0.0, base ** (exponent - 1.0), 0.0)
    else:
        local = exponent * base ** (exponent - 1.0)
    _require_finite(local, "pow")

    def backprop(g):
        _accumulate(a, g * local)

    tan = None if a.tan is None else a.tan * local
    return Tensor(data, (a,), backprop, "pow", tan)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backprop(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(part, g[tuple(index)])

    tan = None
    if any(p.tan is not None for p in parts):
        tan = np.concatenate([_tan_or_zero(p) for p in parts], axis=axis)
    return Tensor(data, tuple(parts), backprop, "concat", tan)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def backprop(g):
        _accumulate(a, g.reshape(a.data.shape))

    tan = None if a.tan is None else a.tan.reshape(shape)
    return Tensor(data, (a,), backprop, "reshape", tan)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=axis is not None)

    def backprop(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    tan = None if a.tan is None else a.tan.sum(axis=axis, keepdims=axis is not None)
    return Tensor(data, (a,), backprop, "sum", tan)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=axis is not None)

    def backprop(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape) / count)

    tan = None if a.tan is None else a.tan.mean(axis=axis, keepdims=axis is not None)
    return Tensor(data, (a,), backprop, "mean", tan)


class ParamSet:
    """Ordered name -> float64 array map; used for both parameters and
    gradients (a GradSet is a ParamSet shaped like its parameters)."""

    __slots__ = ("_items",)

    def __init__(self, items: Mapping[str, np.ndarray]):
        self._items: dict[str, np.ndarray] = {}
        for name, arr in items.items():
            if name in self._items:
                raise ContractError(f"duplicate parameter name '{name}'")
            arr = _as_array(arr)
            _require_finite(arr, f"param '{name}'")
            self._items[name] = arr

    def names(self) -> list[str]:
        return list(self._items)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._items.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    @property
    def size(self) -> int:
        return sum(arr.size for arr in self._items.values())

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._items.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self._items.items()})

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self._items.items()})

    def combine(self, other: "ParamSet", fn) -> "ParamSet":
        self.require_congruent(other)
        return ParamSet({k: fn(v, other[k]) for k, v in self._items.items()})

    def dot(self, other: "ParamSet") -> float:
        self.require_congruent(other)
        return float(
            sum(np.vdot(v, other[k]) for k, v in self._items.items())
        )

    def max_abs(self) -> float:
        return max(
            (float(np.max(np.abs(v))) for v in self._items.values() if v.size),
            default=0.0,
        )

    def require_congruent(self, other: "ParamSet") -> None:
        if self.names() != other.names():
            raise ContractError(
                f"parameter names differ: {self.names()} vs {other.names()}"
            )
        for k, v in self._items.items():
            if v.shape != other[k].shape:
                raise ContractError(
                    f"shape mismatch for '{k}': {v.shape} vs {other[k].shape}"
                )

    def allclose(self, other: "ParamSet", atol: float = 0.0) -> bool:
        self.require_congruent(other)
        return all(
            np.allclose(v, other[k], rtol=0.0, atol=atol)
            for k, v in self._items.items()
        )

    def equal(self, other: "ParamSet") -> bool:
        self.require_congruent(other)
        return all(np.array_equal(v, other[k]) for k, v in self._items.items())


GradSet = ParamSet

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def value_and_grad(loss_fn: LossFn, params: ParamSet) -> tuple[float, GradSet]:
    """Evaluate a scalar loss and its exact reverse-mode gradient.

    ``loss_fn`` receives a mapping of fresh leaf Tensors (sharing the
    parameter arrays) and must return a scalar Tensor built from the
    supported primitives.
    """
    leaves = {name: Tensor(arr) for name, arr in params.items()}
    out = loss_fn(leaves)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("loss_fn must return a scalar Tensor")
    out.backward()
    grads = {}
    for name, leaf in leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        _require_finite(g, f"grad '{name}'")
        grads[name] = g
    return float(out.data), ParamSet(grads)


def jvp(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParamSet,
    direction: ParamSet,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-mode Jacobian-vector product of an array-valued computation.

    Returns (output values, directional derivatives); one tangent-augmented
    forward pass, so the per-component derivative of a vector output along
    ``direction`` comes at the cost of roughly two plain evaluations. Exact,
    first-order only.
    """
    params.require_congruent(direction)
    leaves = {
        name: Tensor(arr, tan=direction[name]) for name, arr in params.items()
    }
    out = fn(leaves)
    if not isinstance(out, Tensor):
        raise ContractError("jvp target must return a Tensor")
    tan = out.tan if out.tan is not None else np.zeros_like(out.data)
    _require_finite(tan, "jvp")
    return out.data.copy(), tan


def loss_value(loss_fn: LossFn, params: ParamSet) -> float:
    """Evaluate ``loss_fn`` without touching gradients."""
    out = loss_fn({name: Tensor(arr) for name, arr in params.items()})
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("loss_fn must return a scalar Tensor")
    return float(out.data)


def finite_diff_grad(loss_fn: LossFn, params: ParamSet, step: float) -> GradSet:
    """Central-difference gradient, perturbing one scalar at a time."""
    if step <= 0.0:
        raise ContractError("finite-difference step must be positive")
    arrays = {name: arr.copy() for name, arr in params.items()}

    def evaluate() -> float:
        return loss_value(loss_fn, ParamSet(arrays))

    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            hi = evaluate()
            flat[i] = original - step
            lo = evaluate()
            flat[i] = original
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return ParamSet(grads)


def max_rel_error(a: ParamSet, b: ParamSet, floor: float) -> float:
    """Largest per-component |a-b| / max(|a|, |b|, floor).

    With floor f and threshold t this encodes "relative error t with
    absolute floor t*f".
    """
    a.require_congruent(b)
    worst = 0.0
    for name, va in a.items():
        vb = b[name]
        denom = np.maximum(np.maximum(np.abs(va), np.abs(vb)), floor)
        if va.size:
            worst = max(worst, float(np.max(np.abs(va - vb) / denom)))
    return worst


def grad_gap(a: ParamSet, b: ParamSet) -> float:
    """Infinity-norm gap ||a-b|| / max(||b||, tiny); the gradcheck metric."""
    a.require_congruent(b)
    diff = max(
        (float(np.max(np.abs(va - b[name]))) for name, va in a.items() if va.size),
        default=0.0,
    )
    scale = max(b.max_abs(), 1e-12)
    return diff / scale


def sgd_step(params: ParamSet, grads: GradSet, lr: float) -> ParamSet:
    """Plain gradient-descent update p - lr*g; inputs are not mutated."""
    if lr < 0.0:
        raise ContractError("learning rate must be non-negative")
    params.require_congruent(grads)
    return ParamSet({k: v - lr * grads[k] for k, v in params.items()})


@dataclass
class AdamState:
    """First and second moment accumulators, congruent with their params."""

    m: ParamSet
    v: ParamSet

    @staticmethod
    def zeros(params: ParamSet) -> "AdamState":
        return AdamState(params.zeros_like(), params.zeros_like())


def adam_step(
    params: ParamSet,
    grads: GradSet,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> tuple[ParamSet, AdamState]:
    """Standard bias-corrected Adam update; returns (new params, new state)."""
    if t < 1:
        raise ContractError("Adam step index t must be >= 1")
    if lr < 0.0:
        raise ContractError("learning rate must be non-negative")
    params.require_congruent(grads)
    state.m.require_congruent(params)
    state.v.require_congruent(params)
    new_m, new_v, new_p = {}, {}, {}
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        new_m[name] = m
        new_v[name] = v
        new_p[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return ParamSet(new_p), AdamState(ParamSet(new_m), ParamSet(new_v))


class Rng:
    """Counter-based (Philox) generator keyed by seed and stream path.

    The same (seed, path) and call sequence gives bit-identical output on
    every platform; ``split`` derives independent named child streams.
    """

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: str = "root"):
        if not 0 <= int(seed) < 2**64:
            raise ContractError("seed must fit in 64 bits")
        self.seed = int(seed)
        self.path = path
        digest = hashlib.sha256(f"{self.seed}|{path}".encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.path}/{name}")

    def normal(self, shape: tuple[int, ...] | int) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray | float:
        out = self._gen.uniform(low, high, size=shape)
        return out if shape is not None else float(out)

    def integer(self, n: int) -> int:
        return int(self._gen.integers(n))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        if k > n:
            raise ContractError(f"cannot draw {k} of {n} without replacement")
        return self._gen.choice(n, size=k, replace=False)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def is_close(a: float, b: float, tol: float = 1e-12) -> bool:
    return math.isclose(a, b, rel_tol=tol, abs_tol=tol)
