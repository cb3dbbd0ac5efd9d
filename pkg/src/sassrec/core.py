"""Differentiable building blocks with hand-written backward passes.

Everything runs in float64. Layers cache what they need during ``forward``
and accumulate parameter gradients into ``self.grads`` during ``backward``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

ACTIVATIONS = ("identity", "sigmoid", "tanh", "relu")


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def sigmoid(x):
    # tanh form is overflow-free and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "identity":
        return x
    if name == "sigmoid":
        return sigmoid(x)
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the activation, given pre- and post-activation."""
    if name == "identity":
        return np.ones_like(pre)
    if name == "sigmoid":
        return out * (1.0 - out)
    if name == "tanh":
        return 1.0 - out * out
    if name == "relu":
        return (pre > 0).astype(np.float64)
    raise ValueError(f"unknown activation {name!r}")


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def check_dim(what: str, got: int, expected: int) -> None:
    if got != expected:
        raise ShapeError(f"{what}: got dimension {got}, expected {expected}")


class Module:
    """Parameter container. Subclasses fill ``params`` and list children."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def children(self) -> dict[str, Module]:
        return {}

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, child in self.children().items():
            yield from child.named_modules(f"{prefix}{name}.")

    def named_parameters(self) -> Iterator[tuple[str, Module, str]]:
        """Yield ``(full_name, owner, key)`` for every parameter in the tree."""
        for prefix, mod in self.named_modules():
            for key in mod.params:
                yield f"{prefix}{key}", mod, key

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: mod.params[key] for name, mod, key in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = {name: (mod, key) for name, mod, key in self.named_parameters()}
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, (mod, key) in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != mod.params[key].shape:
                raise ShapeError(f"{name}: shape {value.shape} != {mod.params[key].shape}")
            mod.params[key][...] = value

    def zero_grad(self) -> None:
        for _, mod in self.named_modules():
            mod.grads = {}
            if hasattr(mod, "sparse_grads"):
                mod.sparse_grads = {}

    def num_parameters(self) -> int:
        return sum(mod.params[key].size for _, mod, key in self.named_parameters())

    def _accumulate(self, key: str, grad: np.ndarray) -> None:
        if key in self.grads:
            self.grads[key] += grad
        else:
            self.grads[key] = grad.copy()


class DenseLayer(Module):
    """``y = activation(W x + b)`` for ``x`` of shape ``(in,)`` or ``(batch, in)``."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        activation: str = "identity",
        rng: np.random.Generator | None = None,
        bias: bool = True,
    ) -> None:
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.activation = activation
        self.params["weight"] = uniform_init(rng, (out_dim, in_dim), in_dim)
        if bias:
            self.params["bias"] = uniform_init(rng, (out_dim,), in_dim)
        self._cache: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    @property
    def in_dim(self) -> int:
        return self.params["weight"].shape[1]

    @property
    def out_dim(self) -> int:
        return self.params["weight"].shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        check_dim("dense input", x.shape[-1], self.in_dim)
        pre = x @ self.params["weight"].T
        if "bias" in self.params:
            pre = pre + self.params["bias"]
        out = activate(self.activation, pre)
        self._cache = (x, pre, out)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("DenseLayer.backward called before forward")
        x, pre, out = self._cache
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != out.shape:
            raise ShapeError(f"upstream gradient shape {grad_out.shape} != output shape {out.shape}")
        dpre = grad_out * activation_grad(self.activation, pre, out)
        x2 = x.reshape(-1, x.shape[-1])
        d2 = dpre.reshape(-1, dpre.shape[-1])
        self._accumulate("weight", d2.T @ x2)
        if "bias" in self.params:
            self._accumulate("bias", d2.sum(axis=0))
        return dpre @ self.params["weight"]


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def dense_backward(layer: DenseLayer, upstream_grad: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Return ``(param_grads, input_grad)`` for a single backward call."""
    layer.grads = {}
    dx = layer.backward(upstream_grad)
    return dict(layer.grads), dx


class MLP(Module):
    def __init__(self, dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> None:
        super().__init__()
        if len(dims) - 1 != len(activations):
            raise ValueError("need one activation per layer")
        self.layers = [DenseLayer(dims[i], dims[i + 1], activations[i], rng) for i in range(len(activations))]

    def children(self) -> dict[str, Module]:
        return {f"layer{i}": layer for i, layer in enumerate(self.layers)}

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class Adagrad:
    """Adagrad over a module tree.

    Dense gradients live in ``module.grads``; row-sparse gradients (embedding
    tables) in ``module.sparse_grads[key] = [(rows, values), ...]`` and only
    touch the listed rows.
    """

    def __init__(self, learning_rate: float = 0.001, epsilon: float = 1e-8, initial_accumulator: float = 0.0) -> None:
        if not learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.learning_rate = float(learning_rate)
        self.epsilon = float(epsilon)
        self.initial_accumulator = float(initial_accumulator)
        self.accumulators: dict[str, np.ndarray] = {}

    def _acc(self, name: str, like: np.ndarray) -> np.ndarray:
        if name not in self.accumulators:
            self.accumulators[name] = np.full_like(like, self.initial_accumulator)
        return self.accumulators[name]

    def step(self, model: Module) -> None:
        for name, mod, key in model.named_parameters():
            param = mod.params[key]
            sparse = getattr(mod, "sparse_grads", {}).get(key)
            if sparse:
                rows = np.concatenate([r.ravel() for r, _ in sparse])
                vals = np.concatenate([v.reshape(-1, param.shape[1]) for _, v in sparse])
                uniq, inv = np.unique(rows, return_inverse=True)
                g = np.zeros((len(uniq), param.shape[1]))
                np.add.at(g, inv, vals)
                acc = self._acc(name, param)
                acc[uniq] += g * g
                param[uniq] -= self.learning_rate * g / (np.sqrt(acc[uniq]) + self.epsilon)
            grad = mod.grads.get(key)
            if grad is not None:
                adagrad_update(param, grad, self._acc(name, param), self.learning_rate, self.epsilon)

    def state_dict(self) -> dict[str, np.ndarray]:
        return dict(self.accumulators)


def adagrad_update(param: np.ndarray, grad: np.ndarray, accumulator: np.ndarray, lr: float, eps: float) -> None:
    """In-place ``acc += g**2; p -= lr * g / (sqrt(acc) + eps)``."""
    if param.shape != grad.shape or param.shape != accumulator.shape:
        raise ShapeError(f"param {param.shape}, grad {grad.shape}, accumulator {accumulator.shape} must match")
    accumulator += grad * grad
    param -= lr * grad / (np.sqrt(accumulator) + eps)


@dataclass
class OptimizerState:
    learning_rate: float
    epsilon: float = 1e-8
    accumulator: list[np.ndarray] = field(default_factory=list)


def adagrad_step(state: OptimizerState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Functional Adagrad: returns updated copies and advances ``state.accumulator``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.accumulator:
        state.accumulator = [np.zeros_like(np.asarray(p, dtype=np.float64)) for p in params]
    out = []
    for p, g, acc in zip(params, grads, state.accumulator):
        p = np.array(p, dtype=np.float64)
        adagrad_update(p, np.asarray(g, dtype=np.float64), acc, state.learning_rate, state.epsilon)
        out.append(p)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst: tuple[int, tuple[int, ...]] | None
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    # floor keeps near-zero gradients from turning roundoff into huge ratios
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    fn: Callable[[], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    tol: float = 1e-4,
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``fn`` evaluates the loss at the current values of ``params`` (perturbed
    in place) and returns ``(loss, grads)`` with one gradient per param.
    ``max_coords`` limits the number of coordinates probed per parameter.
    """
    loss, grads = fn()
    if not np.isfinite(loss):
        raise NonFiniteError(f"loss is not finite: {loss}")
    grads = [np.array(g, dtype=np.float64) for g in grads]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst, worst_err, checked = None, 0.0, 0
    for pi, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"param {pi}: gradient shape {g.shape} != {p.shape}")
        coords = list(np.ndindex(p.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for idx in coords:
            orig = p[idx]
            p[idx] = orig + step
            fp, _ = fn()
            p[idx] = orig - step
            fm, _ = fn()
            p[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"loss not finite when perturbing param {pi} at {idx}")
            numeric = (fp - fm) / (2 * step)
            err = relative_error(float(g[idx]), float(numeric))
            checked += 1
            if err > worst_err or worst is None:
                worst_err, worst = err, (pi, idx)
    return GradCheckReport(max_rel_error=worst_err, tol=tol, worst=worst, checked=checked)
