"""Forward-mode sensitivity oracle for the BPTT gradients.

Every weight gets a tangent direction; tangents are pushed through the
same LIF recursion as the primal values, with the Heaviside derivative
replaced by the surrogate and the reset term carrying no tangent. The
directional derivative of the loss along each unit direction is the
gradient component. This shares no code with ``bptt_backward``; the
convolution here is an explicit im2col contraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sparse import MaskedLayer, conv_layer, linear_layer
from .snn import LifParams, SpikingNetwork, bptt_backward, cross_entropy_with_grad, forward_pass

REL_TOL = 1e-5
ABS_FLOOR = 1e-7


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """``[N, C, H, W]`` -> ``[N, C*k*k, OH*OW]`` with (c, ki, kj) row order."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for oi in range(oh):
        for oj in range(ow):
            r, q = oi * stride, oj * stride
            cols[:, :, :, :, oi, oj] = xp[:, :, r : r + k, q : q + k]
    return cols.reshape(n, c * k * k, oh * ow)


def _apply(layer: MaskedLayer, w: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``W s`` for ``s`` of shape ``[..., in_features]``."""
    lead = s.shape[:-1]
    flat = s.reshape(-1, s.shape[-1])
    if layer.kind == "linear":
        out = flat @ w.T
    else:
        f, c, k, _ = w.shape
        cols = _im2col(flat.reshape((-1,) + layer.in_shape), k, layer.stride, layer.padding)
        out = np.einsum("fr,nrp->nfp", w.reshape(f, -1), cols)
    return out.reshape(lead + (-1,))


def _own_tangent(layer: MaskedLayer, s: np.ndarray) -> np.ndarray:
    """Tangent of ``W s`` along each unit weight direction: ``[P, T, B, out]``."""
    T, B, _ = s.shape
    P = layer.size
    if layer.kind == "linear":
        n_out, n_in = layer.weights.shape
        d = np.zeros((n_out, n_in, T, B, n_out), dtype=s.dtype)
        for o in range(n_out):
            d[o, :, :, :, o] = np.moveaxis(s, 2, 0)
        return d.reshape(P, T, B, n_out)
    f, c, k, _ = layer.weights.shape
    cols = _im2col(s.reshape((T * B,) + layer.in_shape), k, layer.stride, layer.padding)
    npos = cols.shape[2]
    d = np.zeros((f, c * k * k, T * B, f, npos), dtype=s.dtype)
    for o in range(f):
        d[o, :, :, o, :] = np.moveaxis(cols, 1, 0)
    return d.reshape(P, T, B, f * npos)


def forward_mode_gradients(net: SpikingNetwork, inputs: np.ndarray, readout_grad: np.ndarray) -> list[np.ndarray]:
    """dL/dW for every layer, given dL/d(readout)."""
    p = net.params
    s = np.asarray(inputs, dtype=net.layers[0].weights.dtype)
    T, B, _ = s.shape
    sizes = [layer.size for layer in net.layers]
    total = sum(sizes)
    offsets = np.cumsum([0] + sizes)
    ds = np.zeros((total, T, B, s.shape[2]), dtype=s.dtype)
    last = len(net.layers) - 1
    for li, layer in enumerate(net.layers):
        w = layer.weights * layer.mask
        current = _apply(layer, w, s)
        dcurrent = _apply(layer, w, ds)
        dcurrent[offsets[li] : offsets[li + 1]] += _own_tangent(layer, s)
        n = current.shape[2]
        v = np.zeros((B, n), s.dtype)
        o = np.zeros((B, n), s.dtype)
        dv = np.zeros((total, B, n), s.dtype)
        spikes = np.zeros((T, B, n), s.dtype)
        dspikes = np.zeros((total, T, B, n), s.dtype)
        acc = np.zeros((B, n), s.dtype)
        dacc = np.zeros((total, B, n), s.dtype)
        for t in range(T):
            if li < last:
                v = p.alpha * v + current[t] - p.theta * o
                dv = p.alpha * dv + dcurrent[:, t]
                o = np.where(v >= p.theta, 1.0, 0.0).astype(s.dtype)
                phi = 1.0 / (1.0 + math.pi**2 * (v - p.theta) ** 2)
                spikes[t] = o
                dspikes[:, t] = phi * dv
            else:
                v = p.alpha * v + current[t]
                dv = p.alpha * dv + dcurrent[:, t]
                acc += v
                dacc += dv
        s, ds = spikes, dspikes
    dreadout = dacc / T
    dloss = np.einsum("pbc,bc->p", dreadout, np.asarray(readout_grad, dtype=s.dtype))
    return [dloss[offsets[i] : offsets[i + 1]].reshape(layer.weights.shape) for i, layer in enumerate(net.layers)]


def relative_errors(a: np.ndarray, b: np.ndarray, floor: float = ABS_FLOOR) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradcheckResult:
    params: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= REL_TOL


def random_network(rng: np.random.Generator, max_params: int = 200, dtype=np.float64) -> SpikingNetwork:
    """A small random net (optionally conv-first) with at most ``max_params`` weights."""
    params = LifParams(alpha=float(rng.uniform(0.3, 1.0)), theta=float(rng.uniform(0.5, 1.5)),
                       timesteps=int(rng.integers(1, 6)))
    while True:
        layers = []
        if rng.random() < 0.3:
            c, hw, k = int(rng.integers(1, 3)), int(rng.integers(3, 5)), int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            layers.append(conv_layer((c, hw, hw), int(rng.integers(1, 3)), k, 1, pad, rng=rng))
            width = layers[-1].out_features
        else:
            width = int(rng.integers(2, 9))
        for _ in range(int(rng.integers(0, 3))):
            out = int(rng.integers(2, 9))
            layers.append(linear_layer(width, out, rng=rng))
            width = out
        layers.append(linear_layer(width, int(rng.integers(2, 5)), rng=rng))
        if sum(layer.size for layer in layers) <= max_params:
            break
    for layer in layers:
        layer.weights = layer.weights.astype(dtype) * 1.5
        # knock out some weights so masked positions are exercised too
        if rng.random() < 0.5:
            layer.mask[...] = rng.random(layer.mask.shape) < 0.7
            layer.apply_mask()
    return SpikingNetwork(layers, params)


def check_network(net: SpikingNetwork, rng: np.random.Generator, batch: int | None = None) -> GradcheckResult:
    T = net.params.timesteps
    batch = batch or int(rng.integers(1, 5))
    dtype = net.layers[0].weights.dtype
    if rng.random() < 0.5:
        inputs = (rng.random((T, batch, net.in_features)) < 0.5).astype(dtype)
    else:
        inputs = rng.uniform(0.0, 1.0, (T, batch, net.in_features)).astype(dtype)
    labels = rng.integers(0, net.classes, batch)
    records, readout = forward_pass(net, inputs)
    _, readout_grad = cross_entropy_with_grad(readout, labels)
    got = bptt_backward(records, readout_grad, net)
    want = forward_mode_gradients(net, inputs, readout_grad)
    err = max(float(relative_errors(g, w).max()) for g, w in zip(got, want))
    return GradcheckResult(net.total_weights, err)


def run_gradcheck(networks: int = 50, seed: int = 0, max_params: int = 200) -> list[GradcheckResult]:
    rng = np.random.default_rng(seed)
    return [check_network(random_network(rng, max_params), rng) for _ in range(networks)]
