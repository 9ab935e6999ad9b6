"""Flat-vector linear algebra and a small MLP feature extractor with a hand-written backward pass.

Parameters live in a single float64 vector (``ModelParams.theta``); layers are
views into it.  Everything downstream (training, prototypes, adaptation) only
ever sees the flat vector plus ``forward``/``backward``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigError, DimensionError, StateError

AFFINE = "affine"
SCALE = "scale"  # elementwise gain + shift, the affine part of a normalisation layer
TANH = "tanh"
RELU = "relu"

LAYER_KINDS = (AFFINE, SCALE, TANH, RELU)
ACTIVATIONS = (TANH, RELU)


# ---------------------------------------------------------------------------
# vector helpers


def _as_vector(x, name="x") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def _same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def axpy(a: float, x, y) -> np.ndarray:
    """Return ``a * x + y``."""
    x, y = _as_vector(x, "x"), _as_vector(y, "y")
    _same_length(x, y)
    return a * x + y


def dot(a, b) -> float:
    a, b = _as_vector(a, "a"), _as_vector(b, "b")
    _same_length(a, b)
    return float(np.dot(a, b))


def norm(a) -> float:
    a = _as_vector(a, "a")
    return float(np.sqrt(np.dot(a, a)))


def scale(v, s: float) -> np.ndarray:
    return float(s) * _as_vector(v, "v")


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind != AFFINE and self.in_dim != self.out_dim:
            raise ConfigError(f"{self.kind} layer must preserve width")

    @property
    def n_params(self) -> int:
        if self.kind == AFFINE:
            return self.out_dim * self.in_dim + self.out_dim
        if self.kind == SCALE:
            return 2 * self.out_dim
        return 0


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector plus the layer layout it is cut into.

    ``theta`` is made read-only on construction; updates go through
    :meth:`with_theta`, which returns a new object.
    """

    theta: np.ndarray
    layers: tuple[LayerSpec, ...]
    offsets: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64, copy=True).reshape(-1)
        layers = tuple(self.layers)
        if not layers:
            raise ConfigError("a model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ConfigError(f"layer widths do not chain: {prev} -> {nxt}")
        offsets = [0]
        for layer in layers:
            offsets.append(offsets[-1] + layer.n_params)
        if theta.size != offsets[-1]:
            raise DimensionError(f"theta has {theta.size} entries, layout needs {offsets[-1]}")
        if not np.all(np.isfinite(theta)):
            raise ArgumentError("theta contains non-finite entries")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "offsets", tuple(offsets))

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def size(self) -> int:
        return self.theta.size

    def with_theta(self, theta) -> "ModelParams":
        return ModelParams(theta, self.layers)

    def unflatten(self) -> list[tuple[np.ndarray, ...]]:
        """Per-layer parameter arrays: ``(W, b)`` for affine, ``(gain, shift)`` for scale, ``()`` otherwise."""
        out = []
        for layer, start in zip(self.layers, self.offsets):
            chunk = self.theta[start:start + layer.n_params]
            if layer.kind == AFFINE:
                n_w = layer.out_dim * layer.in_dim
                out.append((chunk[:n_w].reshape(layer.out_dim, layer.in_dim), chunk[n_w:]))
            elif layer.kind == SCALE:
                out.append((chunk[:layer.out_dim], chunk[layer.out_dim:]))
            else:
                out.append(())
        return out

    @classmethod
    def flatten(cls, layers, arrays) -> "ModelParams":
        """Inverse of :meth:`unflatten`."""
        layers = tuple(layers)
        if len(arrays) != len(layers):
            raise DimensionError("one array tuple per layer expected")
        parts = []
        for layer, arrs in zip(layers, arrays):
            if layer.kind == AFFINE:
                w, b = arrs
                if np.shape(w) != (layer.out_dim, layer.in_dim) or np.shape(b) != (layer.out_dim,):
                    raise DimensionError(f"bad affine shapes for {layer}")
                parts += [np.ravel(w), np.ravel(b)]
            elif layer.kind == SCALE:
                g, s = arrs
                if np.shape(g) != (layer.out_dim,) or np.shape(s) != (layer.out_dim,):
                    raise DimensionError(f"bad scale shapes for {layer}")
                parts += [np.ravel(g), np.ravel(s)]
            elif len(arrs):
                raise DimensionError(f"{layer.kind} layer takes no parameters")
        theta = np.concatenate(parts) if parts else np.zeros(0)
        return cls(theta, layers)

    def snapshot(self) -> np.ndarray:
        return self.theta.copy()

    def restore(self, snapshot) -> "ModelParams":
        return self.with_theta(snapshot)


def build_layers(input_dim: int, hidden=(64, 64), activation: str = TANH,
                 norm_layers: bool = True) -> tuple[LayerSpec, ...]:
    if activation not in ACTIVATIONS:
        raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
    if input_dim < 1 or not hidden or min(hidden) < 1:
        raise ConfigError("dimensions must be positive")
    layers = []
    width = input_dim
    for h in hidden:
        layers.append(LayerSpec(AFFINE, width, h))
        if norm_layers:
            layers.append(LayerSpec(SCALE, h, h))
        layers.append(LayerSpec(activation, h, h))
        width = h
    return tuple(layers)


def init_mlp(input_dim: int, hidden=(64, 64), activation: str = TANH,
             norm_layers: bool = True, seed: int = 0) -> ModelParams:
    """Gaussian fan-in init for affine weights, zero biases, unit gains."""
    layers = build_layers(input_dim, hidden, activation, norm_layers)
    rng = np.random.default_rng(seed)
    arrays = []
    for layer in layers:
        if layer.kind == AFFINE:
            w = rng.standard_normal((layer.out_dim, layer.in_dim)) / np.sqrt(layer.in_dim)
            arrays.append((w, np.zeros(layer.out_dim)))
        elif layer.kind == SCALE:
            arrays.append((np.ones(layer.out_dim), np.zeros(layer.out_dim)))
        else:
            arrays.append(())
    return ModelParams.flatten(layers, arrays)


def subset_mask(params: ModelParams, selector: str = "all") -> np.ndarray:
    """Boolean mask over theta selecting the adaptable parameters.

    ``"all"`` selects everything, ``"norm"`` only the scale layers.
    """
    if selector == "all":
        return np.ones(params.size, dtype=bool)
    if selector != "norm":
        raise ConfigError(f"unknown parameter subset {selector!r}")
    mask = np.zeros(params.size, dtype=bool)
    for layer, start in zip(params.layers, params.offsets):
        if layer.kind == SCALE:
            mask[start:start + layer.n_params] = True
    if not mask.any():
        raise ConfigError("model has no scale layers for the 'norm' subset")
    return mask


# ---------------------------------------------------------------------------
# forward / backward


class GradientTape:
    """Activations cached by :func:`forward`; good for exactly one :func:`backward`."""

    def __init__(self, params: ModelParams, inputs: list[np.ndarray], output_shape):
        self.params = params
        self.inputs = inputs
        self.output_shape = output_shape
        self.consumed = False


def forward(params: ModelParams, batch_inputs) -> tuple[np.ndarray, GradientTape]:
    x = np.asarray(batch_inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(f"expected inputs with {params.input_dim} columns, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ArgumentError("inputs contain non-finite entries")
    cache = []
    for layer, arrs in zip(params.layers, params.unflatten()):
        cache.append(x)
        if layer.kind == AFFINE:
            w, b = arrs
            x = x @ w.T + b
        elif layer.kind == SCALE:
            g, s = arrs
            x = x * g + s
        elif layer.kind == TANH:
            x = np.tanh(x)
        else:
            x = np.maximum(x, 0.0)
    return x, GradientTape(params, cache, x.shape)


def backward(tape: GradientTape, loss_grad_wrt_features, return_input_grad: bool = False):
    """Back-propagate ``dL/dfeatures`` to a flat ``dL/dtheta``.

    With ``return_input_grad`` also returns ``dL/dinputs``.
    """
    if tape.consumed:
        raise StateError("gradient tape already consumed")
    g = np.asarray(loss_grad_wrt_features, dtype=np.float64)
    if g.shape != tape.output_shape:
        raise DimensionError(f"upstream gradient shape {g.shape} != features shape {tape.output_shape}")
    tape.consumed = True
    params = tape.params
    grad = np.zeros(params.size)
    arrays = params.unflatten()
    for i in range(len(params.layers) - 1, -1, -1):
        layer, x, start = params.layers[i], tape.inputs[i], params.offsets[i]
        if layer.kind == AFFINE:
            w, _ = arrays[i]
            n_w = layer.out_dim * layer.in_dim
            grad[start:start + n_w] = (g.T @ x).ravel()
            grad[start + n_w:start + layer.n_params] = g.sum(axis=0)
            g = g @ w
        elif layer.kind == SCALE:
            gain, _ = arrays[i]
            grad[start:start + layer.out_dim] = (g * x).sum(axis=0)
            grad[start + layer.out_dim:start + layer.n_params] = g.sum(axis=0)
            g = g * gain
        elif layer.kind == TANH:
            t = np.tanh(x)
            g = g * (1.0 - t * t)
        else:
            g = g * (x > 0.0)
    if return_input_grad:
        return grad, g
    return grad


def features(params: ModelParams, batch_inputs) -> np.ndarray:
    return forward(params, batch_inputs)[0]


# ---------------------------------------------------------------------------
# softmax family


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))
