"""Small multilayer perceptrons with exact backpropagation on flat parameter vectors.

Parameters live in a single 1-D float64 array. Layer ``l`` contributes its
weight matrix of shape ``(widths[l], widths[l+1])`` in row-major order,
followed by its bias of length ``widths[l+1]``.

Losses are per-example means:

* ``sigmoid-binary`` output: binary cross-entropy on ``sigmoid(z)``, with the
  probability clamped to ``[1e-12, 1 - 1e-12]`` before the log.
* ``linear`` output: half squared error ``0.5 * (z - y)**2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError, NumericError

PROB_CLAMP = 1e-12
HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUTS = ("sigmoid-binary", "linear")


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "tanh"
    output: str = "sigmoid-binary"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise InputError("layer_widths needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise InputError(f"layer widths must be >= 1, got {widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise InputError(f"hidden_activation must be one of {HIDDEN_ACTIVATIONS}")
        if self.output not in OUTPUTS:
            raise InputError(f"output must be one of {OUTPUTS}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split a flat vector into ``(W, b)`` views, one pair per layer."""
        params = check_params(self, params)
        layers = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            W = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = params[offset : offset + fan_out]
            offset += fan_out
            layers.append((W, b))
        return layers

    def init_params(self, seed: int) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        chunks = []
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)


@dataclass(frozen=True)
class Batch:
    """Features, binary labels and (optionally) opaque group tags.

    Training code only ever sees batches passed through :meth:`strip_groups`.
    """

    features: np.ndarray
    labels: np.ndarray
    group_tags: np.ndarray | None = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if X.ndim != 2:
            raise InputError("features must be a 2-D array")
        if X.shape[0] != y.shape[0]:
            raise InputError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if self.group_tags is not None:
            g = np.asarray(self.group_tags, dtype=np.int64).reshape(-1)
            if g.shape[0] != y.shape[0]:
                raise InputError("group_tags length must match labels")
            object.__setattr__(self, "group_tags", g)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        tags = None if self.group_tags is None else self.group_tags[idx]
        return Batch(self.features[idx], self.labels[idx], tags)

    def strip_groups(self) -> "Batch":
        return Batch(self.features, self.labels, None)

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        batches = list(batches)
        tags = None
        if all(b.group_tags is not None for b in batches):
            tags = np.concatenate([b.group_tags for b in batches])
        return Batch(
            np.concatenate([b.features for b in batches]),
            np.concatenate([b.labels for b in batches]),
            tags,
        )


def check_params(spec: MlpSpec, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise InputError(f"expected a parameter vector of length {spec.n_params}, got shape {params.shape}")
    return params


def _check_features(spec: MlpSpec, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None] if spec.n_inputs == 1 else X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.n_inputs:
        raise InputError(f"features must have shape (n, {spec.n_inputs}), got {X.shape}")
    if X.shape[0] < 1:
        raise InputError("need at least one example")
    return X


def _check_batch(spec: MlpSpec, batch: Batch) -> None:
    _check_features(spec, batch.features)
    if spec.layer_widths[-1] != 1:
        raise InputError("losses are defined for single-output networks only")
    if spec.output == "sigmoid-binary" and not np.all((batch.labels == 0) | (batch.labels == 1)):
        raise InputError("labels must be 0 or 1")


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_slope(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_cache(spec: MlpSpec, params, features):
    """Return ``(activations, pre_activations)``; ``activations[0]`` is the input."""
    X = _check_features(spec, features)
    acts = [X]
    pres = []
    layers = spec.unpack(params)
    for idx, (W, b) in enumerate(layers):
        with np.errstate(over="ignore", invalid="ignore"):
            z = acts[-1] @ W + b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite pre-activation in layer {idx}", layer=idx)
        pres.append(z)
        if idx < len(layers) - 1:
            acts.append(_activate(spec.hidden_activation, z))
    return acts, pres


def raw_output(spec: MlpSpec, params, features) -> np.ndarray:
    """Final-layer pre-activations; shape ``(n,)`` for single-output nets."""
    _, pres = _forward_cache(spec, params, features)
    z = pres[-1]
    return z[:, 0] if z.shape[1] == 1 else z


def forward(spec: MlpSpec, params, features) -> np.ndarray:
    """Probabilities (sigmoid-binary) or raw outputs (linear)."""
    z = raw_output(spec, params, features)
    if spec.output == "sigmoid-binary":
        return sigmoid(z)
    return z


def per_sample_losses(spec: MlpSpec, params, batch: Batch) -> np.ndarray:
    _check_batch(spec, batch)
    z = raw_output(spec, params, batch.features)
    y = batch.labels
    if spec.output == "sigmoid-binary":
        p = np.clip(sigmoid(z), PROB_CLAMP, 1.0 - PROB_CLAMP)
        return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return 0.5 * (z - y) ** 2


def loss(spec: MlpSpec, params, batch: Batch) -> float:
    return float(np.mean(per_sample_losses(spec, params, batch)))


def output_delta(spec: MlpSpec, z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Derivative of each example's loss with respect to its output pre-activation.

    For cross-entropy this is ``sigmoid(z) - y``; the clamp only matters when
    ``|z| > 27`` and is ignored here.
    """
    if spec.output == "sigmoid-binary":
        return sigmoid(z) - labels
    return z - labels


def _backward(spec, params, acts, pres, delta, weights=None, per_sample=False):
    layers = spec.unpack(params)
    delta = delta.reshape(-1, 1).astype(np.float64)
    n = delta.shape[0]
    pieces = []
    for idx in range(len(layers) - 1, -1, -1):
        W, _ = layers[idx]
        a_prev = acts[idx]
        if per_sample:
            gW = (a_prev[:, :, None] * delta[:, None, :]).reshape(n, -1)
            pieces.append(np.concatenate([gW, delta], axis=1))
        else:
            wd = delta * weights[:, None]
            pieces.append(np.concatenate([(a_prev.T @ wd).reshape(-1), wd.sum(axis=0)]))
        if idx > 0:
            delta = (delta @ W.T) * _activation_slope(spec.hidden_activation, pres[idx - 1], acts[idx])
            if not np.all(np.isfinite(delta)):
                raise NumericError(f"non-finite backpropagated signal at layer {idx - 1}", layer=idx - 1)
    pieces.reverse()
    return np.concatenate(pieces, axis=1 if per_sample else 0)


def grad_from_output_delta(spec: MlpSpec, params, features, delta, weights=None) -> np.ndarray:
    """Backpropagate an arbitrary per-example output signal.

    Returns ``sum_i weights[i] * d(out_i)/d(theta) * delta[i]``; ``weights``
    defaults to ``1/n`` (a mean).
    """
    acts, pres = _forward_cache(spec, params, features)
    n = acts[0].shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    g = _backward(spec, params, acts, pres, np.asarray(delta, dtype=np.float64), weights=w)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    return g


def weighted_grad(spec: MlpSpec, params, batch: Batch, weights) -> np.ndarray:
    """``sum_i weights[i] * grad(loss_i)``."""
    _check_batch(spec, batch)
    acts, pres = _forward_cache(spec, params, batch.features)
    delta = output_delta(spec, pres[-1][:, 0], batch.labels)
    g = _backward(spec, params, acts, pres, delta, weights=np.asarray(weights, dtype=np.float64))
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    return g


def grad(spec: MlpSpec, params, batch: Batch) -> np.ndarray:
    """Gradient of the mean loss."""
    n = len(batch)
    return weighted_grad(spec, params, batch, np.full(n, 1.0 / n))


def per_sample_grads(spec: MlpSpec, params, batch: Batch) -> np.ndarray:
    """Per-example loss gradients as the rows of an ``(n, P)`` array."""
    _check_batch(spec, batch)
    acts, pres = _forward_cache(spec, params, batch.features)
    delta = output_delta(spec, pres[-1][:, 0], batch.labels)
    G = _backward(spec, params, acts, pres, delta, per_sample=True)
    if not np.all(np.isfinite(G)):
        raise NumericError("non-finite per-sample gradient")
    return G


def classify(spec: MlpSpec, params, batch: Batch, threshold: float = 0.5):
    """Return ``(predictions, correct_mask)`` as int arrays.

    An output at or above ``threshold`` predicts class 1.
    """
    if not 0.0 < threshold < 1.0:
        raise InputError("threshold must lie in (0, 1)")
    out = forward(spec, params, batch.features)
    pred = (out >= threshold).astype(np.int64)
    correct = (pred == batch.labels.astype(np.int64)).astype(np.int64)
    return pred, correct
