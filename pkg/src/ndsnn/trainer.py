"""Training loop: masked SGD with periodic drop-and-grow mask updates."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset, encode, iter_batches, load_idx, synth_patterns, train_val_split
from .errors import ConfigError, DivergenceError
from .schedule import (
    NDSNN,
    RIGL,
    SET,
    ChangeReport,
    DeathRateSchedule,
    GrowthPolicy,
    SparsitySchedule,
    apply_update,
    plan_update,
)
from .snn import LifParams, SpikingNetwork, bptt_backward, cross_entropy_with_grad, forward_pass
from .sparse import (
    MaskedLayer,
    conv_layer,
    erk_allocate,
    from_csr,
    init_weights,
    linear_layer,
    random_masks,
    read_csr,
    to_csr,
    write_csr,
)

log = logging.getLogger(__name__)

CSV_FIELDS = ["epoch", "iter", "loss", "train_acc", "val_acc", "sparsity", "spike_rate", "rel_cost"]

# independent RNG streams; adding a consumer never shifts the others
STREAMS = {"data": 1, "split": 2, "weights": 3, "masks": 4, "shuffle": 5, "encode": 6, "growth": 7}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name]])


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: list = field(default_factory=list)

    @classmethod
    def for_network(cls, net: SpikingNetwork, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
        return cls(lr, momentum, weight_decay, [np.zeros_like(l.weights) for l in net.layers])


def masked_sgd_step(layer: MaskedLayer, grad: np.ndarray, buf: np.ndarray, opt: OptimizerState, lr=None) -> None:
    """SGD with momentum and weight decay applied to active weights only."""
    if grad.shape != layer.weights.shape or buf.shape != layer.weights.shape:
        raise ConfigError(f"gradient {grad.shape} / buffer {buf.shape} do not match {layer.weights.shape}")
    lr = opt.lr if lr is None else lr
    g = (grad + opt.weight_decay * layer.weights) * layer.mask
    buf *= opt.momentum
    buf += g
    layer.weights -= (lr * buf).astype(layer.weights.dtype)
    layer.apply_mask()


def relative_training_cost(rate_sparse: float, sparsity: float, rate_dense: float) -> float:
    """Spike rate times density, relative to the dense model's spike rate."""
    if rate_dense <= 0:
        raise ConfigError("dense spike rate must be positive")
    return rate_sparse * (1.0 - sparsity) / rate_dense


def spike_rate(records) -> tuple[float, int]:
    """(total hidden spikes, neuron-timestep count) for one forward pass."""
    hidden = [r.spikes for r in records if r.spikes is not None]
    if not hidden:
        return 0.0, 0
    return float(sum(s.sum(dtype=np.float64) for s in hidden)), sum(s.size for s in hidden)


def evaluate(
    net: SpikingNetwork,
    ds: Dataset,
    encoding: str = "direct",
    batch_size: int = 256,
    rng: np.random.Generator | None = None,
) -> float:
    if len(ds) == 0:
        return float("nan")
    correct = 0
    for images, labels in iter_batches(ds, batch_size):
        x = encode(images, encoding, net.params.timesteps, rng)
        _, readout = forward_pass(net, x)
        correct += int((readout.argmax(axis=1) == labels).sum())
    return correct / len(ds)


@dataclass
class EpochMetrics:
    epoch: int
    iter: int
    loss: float
    train_acc: float
    val_acc: float
    sparsity: float
    spike_rate: float
    rel_cost: float


@dataclass
class TrainResult:
    history: list[EpochMetrics]
    net: SpikingNetwork
    reports: list[ChangeReport]
    val: Dataset | None = None

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for m in self.history:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(m, f) for f in CSV_FIELDS)])
        return buf.getvalue()


# --------------------------------------------------------------------------
# setup
# --------------------------------------------------------------------------


def load_dataset(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.kind == "synthetic":
        ds = synth_patterns(d.classes, d.features, d.samples_per_class, d.noise, seed=int(rng_stream(cfg.seed, "data").integers(2**31)))
    else:
        ds = load_idx(d.train_images, d.train_labels)
    return train_val_split(ds, rng_stream(cfg.seed, "split"), d.val_fraction)


def build_layers(cfg: RunConfig, image_shape: tuple, classes: int) -> list[MaskedLayer]:
    layers = []
    shape = tuple(image_shape)
    for i, spec in enumerate(cfg.model.layers):
        n_in = int(np.prod(shape))
        if "in" in spec and spec["in"] != n_in:
            raise ConfigError(f"model.layers[{i}].in: is {spec['in']} but the previous layer produces {n_in}")
        if spec["kind"] == "linear":
            layer = linear_layer(n_in, spec["out"])
        else:
            if len(shape) != 3:
                raise ConfigError(f"model.layers[{i}]: conv layer needs a [C, H, W] input, got {shape}")
            layer = conv_layer(shape, spec["filters"], spec["kernel"], spec["stride"], spec["padding"])
        layers.append(layer)
        shape = layer.out_shape
    if layers[-1].out_features != classes:
        raise ConfigError(f"model.layers[{len(layers) - 1}]: output width {layers[-1].out_features} != {classes} classes")
    return layers


def _policy(name: str) -> GrowthPolicy | None:
    return {"ndsnn": NDSNN, "rigl": RIGL, "set": SET}.get(name)


def build_schedules(cfg: RunConfig, layers: list[MaskedLayer], total_iters: int):
    """ERK allocations at the start and end, plus both schedules (or None)."""
    s = cfg.sparsity
    dims = [l.dims for l in layers]
    if s.policy == "dense":
        return None, None, None
    start = s.theta_i if s.policy == "ndsnn" else s.theta_f
    alloc_i = erk_allocate(dims, start)
    alloc_f = erk_allocate(dims, s.theta_f)
    if s.policy == "static":
        return alloc_i, None, None
    n = max(0, math.floor((s.stop_fraction * total_iters - s.t0) / s.delta_t))
    sched = SparsitySchedule(
        start, s.theta_f, s.t0, s.delta_t, n,
        alloc_i.per_layer_sparsity, alloc_f.per_layer_sparsity if s.policy == "ndsnn" else alloc_i.per_layer_sparsity,
    )
    death = DeathRateSchedule(s.d0, s.d_min, s.t0, s.delta_t, n)
    return alloc_i, sched, death


def build_network(cfg: RunConfig, image_shape: tuple, classes: int, total_iters: int):
    layers = build_layers(cfg, image_shape, classes)
    alloc, sched, death = build_schedules(cfg, layers, total_iters)
    if alloc is not None:
        masks = random_masks(alloc, [l.weights.shape for l in layers], rng_stream(cfg.seed, "masks"))
        for layer, mask in zip(layers, masks):
            layer.mask = mask
    wrng = rng_stream(cfg.seed, "weights")
    for layer in layers:
        init_weights(layer, wrng)
    params = LifParams(cfg.model.alpha, cfg.model.theta, cfg.model.timesteps)
    return SpikingNetwork(layers, params), sched, death


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


def train(
    cfg: RunConfig,
    reference_rates: list[float] | None = None,
    data: tuple[Dataset, Dataset] | None = None,
) -> TrainResult:
    """Run one training job.

    ``reference_rates`` are the dense run's per-epoch spike rates used for
    the relative cost; without them the run's own rate stands in, so the
    cost reduces to the density.
    """
    train_ds, val_ds = data if data is not None else load_dataset(cfg)
    o = cfg.optimizer
    iters_per_epoch = math.ceil(len(train_ds) / o.batch_size)
    total_iters = iters_per_epoch * o.epochs
    net, sched, death = build_network(cfg, train_ds.image_shape, train_ds.class_count, total_iters)
    policy = _policy(cfg.sparsity.policy)
    opt = OptimizerState.for_network(net, o.lr, o.momentum, o.weight_decay)
    shuffle_rng = rng_stream(cfg.seed, "shuffle")
    encode_rng = rng_stream(cfg.seed, "encode")
    growth_rng = rng_stream(cfg.seed, "growth")
    T = net.params.timesteps

    history: list[EpochMetrics] = []
    reports: list[ChangeReport] = []
    t = 0
    for epoch in range(o.epochs):
        loss_sum = 0.0
        correct = 0
        seen = 0
        spikes = 0.0
        slots = 0
        for images, labels in iter_batches(train_ds, o.batch_size, shuffle_rng):
            x = encode(images, cfg.data.encoding, T, encode_rng)
            records, readout = forward_pass(net, x)
            loss, readout_grad = cross_entropy_with_grad(readout, labels)
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch}, iteration {t}")
            grads = bptt_backward(records, readout_grad, net)
            loss_sum += loss * len(labels)
            correct += int((readout.argmax(axis=1) == labels).sum())
            seen += len(labels)
            s, n = spike_rate(records)
            spikes += s
            slots += n

            if sched is not None and sched.is_update(t):
                plan = plan_update(net.layers, sched, death, t)
                for layer, row, grad, buf in zip(net.layers, plan.rows, grads, opt.buffers):
                    reports.append(apply_update(layer, row, grad, policy, growth_rng))
                    buf *= layer.mask
            else:
                lr = o.lr
                if o.lr_schedule == "cosine" and total_iters:
                    lr = o.lr * 0.5 * (1.0 + math.cos(math.pi * t / total_iters))
                for layer, grad, buf in zip(net.layers, grads, opt.buffers):
                    masked_sgd_step(layer, grad, buf, opt, lr)
            t += 1

        rate = spikes / slots if slots else 0.0
        sparsity = net.sparsity
        if reference_rates is not None:
            cost = relative_training_cost(rate, sparsity, reference_rates[epoch])
        elif rate > 0:
            cost = relative_training_cost(rate, sparsity, rate)
        else:
            cost = 1.0 - sparsity
        val_acc = evaluate(net, val_ds, cfg.data.encoding, rng=encode_rng) if len(val_ds) else float("nan")
        m = EpochMetrics(epoch, t, loss_sum / seen, correct / seen, val_acc, sparsity, rate, cost)
        history.append(m)
        log.info("epoch %d loss %.4f val %.4f sparsity %.4f rate %.4f", epoch, m.loss, val_acc, sparsity, rate)
    return TrainResult(history, net, reports, val_ds)


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------


def save_checkpoint(net: SpikingNetwork, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, layer in enumerate(net.layers):
        name = f"layer_{i}.csr"
        write_csr(directory / name, to_csr(layer))
        entries.append(
            {
                "file": name,
                "kind": layer.kind,
                "shape": list(layer.weights.shape),
                "in_shape": list(layer.in_shape),
                "stride": layer.stride,
                "padding": layer.padding,
                "active": layer.active_count,
            }
        )
    manifest = {"params": asdict(net.params), "layers": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_checkpoint(directory) -> SpikingNetwork:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    layers = []
    for e in manifest["layers"]:
        kwargs = {}
        if e["kind"] == "conv":
            kwargs = {"in_shape": tuple(e["in_shape"]), "stride": e["stride"], "padding": e["padding"]}
        layers.append(from_csr(read_csr(directory / e["file"]), e["shape"], e["kind"], **kwargs))
    return SpikingNetwork(layers, LifParams(**manifest["params"]))


def write_outputs(result: TrainResult, cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.toml").write_text(cfg.to_toml())
    (out / "metrics.csv").write_text(result.csv_text())
    (out / "updates.jsonl").write_text("".join(r.to_json() + "\n" for r in result.reports))
    final = result.history[-1] if result.history else None
    summary = {
        "policy": cfg.sparsity.policy,
        "seed": cfg.seed,
        "epochs": len(result.history),
        "final": asdict(final) if final else None,
        "mean_rel_cost": float(np.mean([m.rel_cost for m in result.history])) if final else None,
        "total_weights": result.net.total_weights,
        "active_weights": result.net.active_weights,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    save_checkpoint(result.net, out / "checkpoint")
    return out
