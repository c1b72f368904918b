"""LIF simulation over T timesteps and surrogate-gradient BPTT.

Every layer but the last is a LIF population:

    v[t] = alpha * v[t-1] + W s[t] - theta * o[t-1]
    o[t] = 1 if v[t] >= theta else 0

The last layer is a leaky integrator without firing or reset; its
potential averaged over T is the readout fed to softmax cross-entropy.
In the backward pass the Heaviside derivative is replaced by
``1 / (1 + pi^2 (v - theta)^2)`` and the reset term is treated as a
constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DimensionError, StateError
from .sparse import MaskedLayer
from .tensor import as_tensor, conv2d_backward, conv2d_batch


@dataclass(frozen=True)
class LifParams:
    alpha: float = 0.5
    theta: float = 1.0
    timesteps: int = 5

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.theta <= 0:
            raise ConfigError(f"theta must be positive, got {self.theta}")
        if self.timesteps < 1:
            raise ConfigError(f"timesteps must be >= 1, got {self.timesteps}")


@dataclass
class LifLayerState:
    v: np.ndarray
    o_prev: np.ndarray

    @classmethod
    def zeros(cls, batch: int, neurons: int, dtype=np.float32) -> "LifLayerState":
        return cls(np.zeros((batch, neurons), dtype), np.zeros((batch, neurons), dtype))


@dataclass
class SpikeRecord:
    """Per-layer trajectory kept for the backward pass.

    ``inputs`` is what the layer consumed (``[T, batch, in_features]``);
    ``spikes`` is None for the non-firing readout layer.
    """

    inputs: np.ndarray
    potentials: np.ndarray
    spikes: np.ndarray | None


@dataclass
class BpttBuffers:
    delta: np.ndarray
    eps: np.ndarray
    phi: np.ndarray | None


@dataclass
class SpikingNetwork:
    layers: list[MaskedLayer]
    params: LifParams = field(default_factory=LifParams)

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1], self.layers[i]
            if prev.out_features != cur.in_features:
                raise ConfigError(
                    f"layer {i}: expects {cur.in_features} inputs but layer {i - 1} "
                    f"produces {prev.out_features}"
                )

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def classes(self) -> int:
        return self.layers[-1].out_features

    @property
    def hidden_neurons(self) -> int:
        return sum(layer.out_features for layer in self.layers[:-1])

    @property
    def total_weights(self) -> int:
        return sum(layer.size for layer in self.layers)

    @property
    def active_weights(self) -> int:
        return sum(layer.active_count for layer in self.layers)

    @property
    def sparsity(self) -> float:
        return 1.0 - self.active_weights / self.total_weights


def lif_step(
    state: LifLayerState, weighted_input: np.ndarray, params: LifParams
) -> tuple[LifLayerState, np.ndarray]:
    if not (state.v.shape == state.o_prev.shape == weighted_input.shape):
        raise DimensionError(
            f"state {state.v.shape}/{state.o_prev.shape} and input {weighted_input.shape} differ"
        )
    v = params.alpha * state.v + weighted_input - params.theta * state.o_prev
    spikes = (v >= params.theta).astype(v.dtype)
    return LifLayerState(v, spikes), spikes


def surrogate_grad(x) -> np.ndarray:
    x = np.asarray(x)
    return 1.0 / (1.0 + (math.pi**2) * x * x)


def _layer_input(layer: MaskedLayer, s: np.ndarray) -> np.ndarray:
    """Synaptic current ``W s`` for every (t, batch) row at once."""
    T, B = s.shape[:2]
    w = layer.effective()
    if layer.kind == "linear":
        return (s.reshape(T * B, -1) @ w.T).reshape(T, B, -1)
    x = s.reshape((T * B,) + layer.in_shape)
    return conv2d_batch(x, w, layer.stride, layer.padding).reshape(T, B, -1)


def _layer_input_grad(layer: MaskedLayer, s: np.ndarray, eps: np.ndarray):
    """Return (dL/dW dense, dL/ds) given ``eps = dL/d(W s)``."""
    T, B = s.shape[:2]
    w = layer.effective()
    if layer.kind == "linear":
        e2 = eps.reshape(T * B, -1)
        s2 = s.reshape(T * B, -1)
        return e2.T @ s2, (e2 @ w).reshape(s.shape)
    x = s.reshape((T * B,) + layer.in_shape)
    g = eps.reshape((T * B,) + layer.out_shape)
    grad_x, grad_w = conv2d_backward(x, w, g, layer.stride, layer.padding)
    return grad_w, grad_x.reshape(s.shape)


def forward_pass(net: SpikingNetwork, input_spikes: np.ndarray) -> tuple[list[SpikeRecord], np.ndarray]:
    p = net.params
    s = as_tensor(input_spikes, dtype=net.layers[0].weights.dtype)
    if s.ndim != 3 or s.shape[2] != net.in_features:
        raise ConfigError(
            f"layer 0: input of shape {s.shape} does not match [T, batch, {net.in_features}]"
        )
    T, B = s.shape[:2]
    records = []
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        current = _layer_input(layer, s)
        n = current.shape[2]
        potentials = np.empty_like(current)
        if i < last:
            spikes = np.empty_like(current)
            state = LifLayerState.zeros(B, n, current.dtype)
            for t in range(T):
                state, spikes[t] = lif_step(state, current[t], p)
                potentials[t] = state.v
        else:
            spikes = None
            v = np.zeros((B, n), current.dtype)
            for t in range(T):
                v = p.alpha * v + current[t]
                potentials[t] = v
        records.append(SpikeRecord(s, potentials, spikes))
        s = spikes
    readout = records[-1].potentials.mean(axis=0)
    return records, readout


def bptt_backward(
    records: list[SpikeRecord],
    readout_grad: np.ndarray,
    net: SpikingNetwork,
    buffers: list | None = None,
) -> list[np.ndarray]:
    """Dense weight gradients, one per layer, from a matching ``forward_pass``.

    If ``buffers`` is a list it is filled with one ``BpttBuffers`` per layer.
    """
    if len(records) != len(net.layers):
        raise StateError(f"{len(records)} records for a {len(net.layers)}-layer network")
    p = net.params
    T = records[-1].potentials.shape[0]
    readout_grad = np.asarray(readout_grad, dtype=records[-1].potentials.dtype)
    if readout_grad.shape != records[-1].potentials.shape[1:]:
        raise StateError(
            f"readout gradient {readout_grad.shape} does not match {records[-1].potentials.shape[1:]}"
        )
    grads: list[np.ndarray] = [None] * len(net.layers)
    collected = []
    # dL/d(readout) spreads evenly over the T potentials being averaged
    delta = np.broadcast_to(readout_grad / T, records[-1].potentials.shape)
    for i in range(len(net.layers) - 1, -1, -1):
        rec, layer = records[i], net.layers[i]
        if rec.potentials.shape[2] != layer.out_features:
            raise StateError(f"record {i} has {rec.potentials.shape[2]} neurons, layer has {layer.out_features}")
        phi = None if rec.spikes is None else surrogate_grad(rec.potentials - p.theta)
        upstream = delta
        local = delta if phi is None else delta * phi
        eps = np.empty_like(rec.potentials)
        carry = np.zeros_like(eps[0])
        for t in range(T - 1, -1, -1):
            carry = local[t] + p.alpha * carry
            eps[t] = carry
        grad_w, delta = _layer_input_grad(layer, rec.inputs, eps)
        if buffers is not None:
            collected.append(BpttBuffers(np.array(upstream), eps, phi))
        grads[i] = grad_w.reshape(layer.weights.shape)
    if buffers is not None:
        buffers.extend(reversed(collected))
    return grads


def cross_entropy_with_grad(readout: np.ndarray, labels) -> tuple[float, np.ndarray]:
    z = np.asarray(readout, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = z.shape
    if labels.shape != (B,):
        raise DataError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"labels must lie in [0, {C})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    loss = float(-log_p[np.arange(B), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(B), labels] -= 1.0
    grad /= B
    return loss, grad.astype(np.asarray(readout).dtype)
