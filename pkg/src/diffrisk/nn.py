"""Small feed-forward networks in numpy: forward pass, reverse-mode
gradients, Adam, and a central-difference gradient checker.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch of inputs
``x`` of shape ``(N, fan_in)`` maps to ``x @ W + b``. Every hidden layer
uses the same activation; the output layer is linear.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArchitectureError, ShapeError

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "tanh")


@dataclass
class ModelParams:
    layer_sizes: tuple[int, ...]
    activation: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if self.activation not in ACTIVATIONS:
            raise InvalidArchitectureError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("number of weight/bias arrays does not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expect}")

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def arrays(self) -> list[np.ndarray]:
        """Parameters in the canonical order ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        arrays = list(arrays)
        return replace(self, weights=arrays[0::2], biases=arrays[1::2])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        return self.with_arrays(unflatten(vec, [a.shape for a in self.arrays()]))

    def copy(self) -> "ModelParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        sizes = d["layer_sizes"]
        weights = [np.asarray(w, dtype=np.float64).reshape(sizes[i], sizes[i + 1])
                   for i, w in enumerate(d["weights"])]
        biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in d["biases"]]
        return cls(tuple(sizes), d["activation"], weights, biases)


def count_params(layer_sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def unflatten(vec: np.ndarray, shapes: Sequence[tuple[int, ...]]) -> list[np.ndarray]:
    vec = np.asarray(vec, dtype=np.float64)
    total = sum(int(np.prod(s)) for s in shapes)
    if vec.shape != (total,):
        raise ShapeError(f"flat vector has shape {vec.shape}, expected ({total},)")
    out, i = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(vec[i:i + n].reshape(s).copy())
        i += n
    return out


def mlp_init(layer_sizes: Sequence[int], activation: str = "relu", seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise InvalidArchitectureError(f"need at least 2 layer sizes, got {sizes}")
    if any(int(n) != n or n <= 0 for n in sizes):
        raise InvalidArchitectureError(f"layer sizes must be positive integers, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(tuple(sizes), activation, weights, biases)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _as_batch(params: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_size:
        raise ShapeError(f"input shape {x.shape} does not match input size {params.input_size}")
    return x, single


def forward_with_cache(params: ModelParams, x) -> tuple[np.ndarray, tuple]:
    """Forward pass that also returns what :func:`backward` needs."""
    x, single = _as_batch(params, x)
    hs = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = z if i == last else _act(params.activation, z)
        hs.append(h)
    out = h[0] if single else h
    return out, (hs, single)


def mlp_forward(params: ModelParams, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    return forward_with_cache(params, x)[0]


def backward(params: ModelParams, cache: tuple, upstream) -> tuple[ModelParams, np.ndarray]:
    """Reverse pass. Parameter gradients are summed over the batch."""
    hs, single = cache
    g = np.asarray(upstream, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != hs[-1].shape:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match output {hs[-1].shape}")
    n_layers = len(params.weights)
    dws, dbs = [None] * n_layers, [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            h = hs[i + 1]
            g = g * (h > 0) if params.activation == "relu" else g * (1.0 - h * h)
        dws[i] = hs[i].T @ g
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    dx = g[0] if single else g
    return replace(params, weights=dws, biases=dbs), dx


def mlp_gradients(params: ModelParams, x, upstream_gradient) -> tuple[ModelParams, np.ndarray]:
    """Gradients of ``sum(upstream * f(x))`` w.r.t. parameters and input."""
    _, cache = forward_with_cache(params, x)
    return backward(params, cache, upstream_gradient)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, **hyper) -> "AdamState":
        arrays = arrays.arrays() if isinstance(arrays, ModelParams) else list(arrays)
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)

    def to_dict(self) -> dict:
        return {"t": self.t, "learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "epsilon": self.epsilon}


def adam_step(params, gradients, state: AdamState, max_grad_norm: float | None = None):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not mutated.

    ``params`` and ``gradients`` are either :class:`ModelParams` or
    congruent lists of arrays. With ``max_grad_norm`` the gradient is
    rescaled to that global L2 norm first.
    """
    is_model = isinstance(params, ModelParams)
    ps = params.arrays() if is_model else list(params)
    gs = gradients.arrays() if isinstance(gradients, ModelParams) else list(gradients)
    if len(ps) != len(gs) or len(ps) != len(state.m):
        raise ShapeError("params, gradients and optimizer state have different lengths")
    for p, g, m in zip(ps, gs, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {np.shape(g)}, moment {m.shape}")
    if max_grad_norm is not None:
        norm = np.sqrt(sum(float(np.sum(np.square(g))) for g in gs))
        if norm > max_grad_norm:
            gs = [g * (max_grad_norm / norm) for g in gs]
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m = [b1 * m + (1 - b1) * g for m, g in zip(state.m, gs)]
    new_v = [b2 * v + (1 - b2) * np.square(g) for v, g in zip(state.v, gs)]
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new_p = [p - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
             for p, m, v in zip(ps, new_m, new_v)]
    new_state = replace(state, m=new_m, v=new_v, t=t)
    return (params.with_arrays(new_p) if is_model else new_p), new_state


def grad_check(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
               params, step: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` takes a flat parameter vector and returns ``(loss, grad)``
    where ``grad`` has the same shape as the vector.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.array(params, dtype=np.float64).ravel()
    _, analytic = loss_fn(p.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    worst = 0.0
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + step
        hi = float(loss_fn(p.copy())[0])
        p[i] = orig - step
        lo = float(loss_fn(p.copy())[0])
        p[i] = orig
        numeric = (hi - lo) / (2 * step)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(numeric))
        worst = max(worst, err)
    return worst


def save_params(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict()))


def load_params(path) -> ModelParams:
    return ModelParams.from_dict(json.loads(Path(path).read_text()))
