"""Dense numerical kernel: seeded RNG streams, feed-forward nets with
reverse-mode gradients, AdamW, and column standardization.

Everything here is plain numpy. Networks operate on a single vector or on
a batch of row vectors; weights follow the ``y = W x + b`` convention, so a
layer mapping ``size[i] -> size[i+1]`` stores ``W`` with shape
``(size[i+1], size[i])``.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    """Input dimensions do not match the model."""


class UsageError(RuntimeError):
    """An operation was called out of order (e.g. backward without forward)."""


class TrainingError(RuntimeError):
    """Optimization produced non-finite values."""


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def _label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Seeded random stream with reproducible labeled children.

    ``Rng(seed).child("perturb:17")`` always yields the same stream no matter
    how many other children were drawn before it, which keeps per-subject
    work independent of processing order.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self._path + (_label_key(label),))

    def __getattr__(self, name):
        # delegate draws (normal, uniform, integers, ...) to the generator
        if name.startswith("_") or name == "generator":
            raise AttributeError(name)
        return getattr(self.generator, name)


# ---------------------------------------------------------------------------
# Feed-forward networks
# ---------------------------------------------------------------------------


def _activate(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "tanh":
        return np.tanh(a)
    return a


def _activation_grad(kind: str, a: np.ndarray, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return g * (a > 0)
    if kind == "tanh":
        return g * (1.0 - h * h)
    return g


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def params(self) -> list[np.ndarray]:
        """Flat list in the same order as :meth:`MlpModel.params`."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


class MlpModel:
    """Fully connected network with per-layer activations.

    Parameters
    ----------
    layer_sizes : sequence of int
        ``[input, hidden..., output]``.
    activations : sequence of str
        One entry per layer (``len(layer_sizes) - 1``), each in
        ``{"relu", "tanh", "identity"}``.
    rng : Rng, optional
        Used for initialization; He-uniform for relu layers, Xavier-uniform
        otherwise. Without an rng all parameters start at zero.
    """

    def __init__(self, layer_sizes: Sequence[int], activations: Sequence[str], rng: Rng | None = None):
        layer_sizes = [int(s) for s in layer_sizes]
        activations = list(activations)
        if len(layer_sizes) < 2:
            raise ShapeError("need at least an input and an output size")
        if len(activations) != len(layer_sizes) - 1:
            raise ShapeError(
                f"{len(activations)} activations for {len(layer_sizes) - 1} layers"
            )
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.layer_sizes = layer_sizes
        self.activations = activations
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            if rng is None:
                w = np.zeros((fan_out, fan_in))
            else:
                if activations[i] == "relu":
                    limit = np.sqrt(6.0 / fan_in)
                else:
                    limit = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))
        self._cache = None

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names.extend((f"layer{i}.weight", f"layer{i}.bias"))
        return names

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the network and cache intermediates for :meth:`backward`."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        if batch.ndim != 2 or batch.shape[1] != self.n_in:
            raise ShapeError(f"expected input width {self.n_in}, got shape {x.shape}")
        pre, post = [], [batch]
        h = batch
        for w, b, act in zip(self.weights, self.biases, self.activations):
            a = h @ w.T + b
            h = _activate(act, a)
            pre.append(a)
            post.append(h)
        self._cache = (x, single, pre, post)
        return h[0] if single else h

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass without touching the gradient cache."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.ndim != 2 or h.shape[1] != self.n_in:
            raise ShapeError(f"expected input width {self.n_in}, got shape {x.shape}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = _activate(act, h @ w.T + b)
        return h[0] if single else h

    def backward(self, x: np.ndarray, output_grad: np.ndarray) -> Gradients:
        """Gradients of ``sum(output_grad * forward(x))`` w.r.t. every parameter and the input."""
        if self._cache is None:
            raise UsageError("backward called before forward")
        cached_x, single, pre, post = self._cache
        if x is not cached_x and not np.array_equal(np.asarray(x, dtype=float), cached_x):
            raise UsageError("backward input differs from the cached forward input")
        g = np.asarray(output_grad, dtype=float)
        g = g[None, :] if single else g
        if g.shape != post[-1].shape:
            raise ShapeError(f"output_grad shape {g.shape} != output shape {post[-1].shape}")
        n_layers = len(self.weights)
        gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        for i in reversed(range(n_layers)):
            g = _activation_grad(self.activations[i], pre[i], post[i + 1], g)
            gw[i] = g.T @ post[i]
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i]
        return Gradients(gw, gb, g[0] if single else g)

    def copy(self) -> "MlpModel":
        other = MlpModel(self.layer_sizes, self.activations)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activations": list(self.activations),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        model = cls(d["layer_sizes"], d["activations"])
        model.weights = [np.array(w, dtype=float).reshape(model.layer_sizes[i + 1], model.layer_sizes[i])
                         for i, w in enumerate(d["weights"])]
        model.biases = [np.array(b, dtype=float) for b in d["biases"]]
        return model


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    return model.forward(x)


def backward(model: MlpModel, x: np.ndarray, output_grad: np.ndarray) -> Gradients:
    return model.backward(x, output_grad)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        for name in ("learning_rate", "beta1", "beta2", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def adamw_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamWState,
    names: Sequence[str] | None = None,
) -> None:
    """One decoupled-weight-decay Adam update, applied to ``params`` in place.

    ``param <- param - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * param)``
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != np.shape(g):
            raise ShapeError(f"param {i}: shape {p.shape} vs grad {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names is not None else f"param {i}"
            raise TrainingError(f"non-finite gradient in {label} (index {i})")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr, wd, eps = state.learning_rate, state.weight_decay, state.epsilon
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if wd:
            update = update + wd * p
        p -= lr * update


class AdamW:
    """Convenience wrapper binding a parameter list to its optimizer state."""

    def __init__(self, params: list[np.ndarray], names: Sequence[str] | None = None, **hyper):
        self.params = params
        self.names = list(names) if names is not None else None
        self.state = AdamWState(**hyper)

    def step(self, grads: list[np.ndarray]) -> None:
        adamw_step(self.params, grads, self.state, self.names)


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


@dataclass
class Scaler:
    """Per-column affine scaler using the population sd (ddof=0)."""

    mean: np.ndarray
    sd: np.ndarray
    clamped: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.sd

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.sd + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist(), "clamped": self.clamped.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.array(d["mean"], dtype=float), np.array(d["sd"], dtype=float),
                   np.array(d["clamped"], dtype=bool))

    @classmethod
    def identity(cls, width: int) -> "Scaler":
        return cls(np.zeros(width), np.ones(width), np.zeros(width, dtype=bool))


def standardize(x: np.ndarray) -> tuple[Scaler, np.ndarray]:
    """Fit a :class:`Scaler` to the columns of ``x`` and return the transformed data.

    Constant columns get sd clamped to 1 (and flagged) so they map to zero.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    clamped = ~(sd > 0)
    if clamped.any():
        warnings.warn(f"constant column(s) {np.flatnonzero(clamped).tolist()}: sd clamped to 1",
                      RuntimeWarning, stacklevel=2)
        sd = np.where(clamped, 1.0, sd)
    scaler = Scaler(mean, sd, clamped)
    z = scaler.transform(x)
    if squeeze:
        return Scaler(mean[0:1], sd[0:1], clamped[0:1]), z[:, 0]
    return scaler, z


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def model_to_json(model: MlpModel, scaler: Scaler | None = None, **extra) -> str:
    d = model.to_dict()
    d["scaler"] = scaler.to_dict() if scaler is not None else None
    d.update(extra)
    # float repr is the shortest round-tripping form (<= 17 significant digits)
    return json.dumps(d)


def model_from_json(text: str) -> tuple[MlpModel, Scaler | None, dict]:
    d = json.loads(text)
    model = MlpModel.from_dict(d)
    scaler = Scaler.from_dict(d["scaler"]) if d.get("scaler") else None
    extra = {k: v for k, v in d.items()
             if k not in ("layer_sizes", "activations", "weights", "biases", "scaler")}
    return model, scaler, extra


def minibatches(n: int, batch_size: int, rng: Rng):
    """Yield index arrays of a fresh random permutation split into batches."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def r_squared(y: np.ndarray, y_hat: np.ndarray) -> float:
    y = np.asarray(y, dtype=float)
    ss_res = float(np.sum((y - y_hat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot
