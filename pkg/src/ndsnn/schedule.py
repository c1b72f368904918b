"""Drop-and-grow scheduling: sparsity and death-rate schedules, per-round
drop/grow counts, and the mask mutation itself.

Three growth policies are provided:

* ``NDSNN``  - gradient top-k growth, sparsity rising on a cubic schedule
* ``RIGL``   - gradient top-k growth, constant sparsity
* ``SET``    - uniform random growth, constant sparsity
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, CountError, ScheduleError
from .sparse import MaskedLayer, round_half_up, target_active
from .tensor import bottom_k_abs, top_k_abs


@dataclass(frozen=True)
class GrowthPolicy:
    variant: str = "gradient-topk"
    density_mode: str = "decaying"

    def __post_init__(self):
        if self.variant not in ("gradient-topk", "uniform-random"):
            raise ConfigError(f"unknown growth variant {self.variant!r}")
        if self.density_mode not in ("decaying", "constant"):
            raise ConfigError(f"unknown density mode {self.density_mode!r}")


NDSNN = GrowthPolicy("gradient-topk", "decaying")
RIGL = GrowthPolicy("gradient-topk", "constant")
SET = GrowthPolicy("uniform-random", "constant")


@dataclass
class SparsitySchedule:
    theta_i: float
    theta_f: float
    t0: int
    delta_t: int
    n: int
    per_layer_i: list[float] = field(default_factory=list)
    per_layer_f: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.theta_i <= self.theta_f < 1.0:
            raise ConfigError(
                f"need 0 <= theta_i <= theta_f < 1, got theta_i={self.theta_i}, theta_f={self.theta_f}"
            )
        if self.delta_t < 1 or self.n < 0 or self.t0 < 0:
            raise ConfigError(f"need delta_t >= 1, n >= 0, t0 >= 0; got {self.delta_t}, {self.n}, {self.t0}")
        if len(self.per_layer_i) != len(self.per_layer_f):
            raise ConfigError("per-layer initial and final sparsities differ in length")
        for l, (a, b) in enumerate(zip(self.per_layer_i, self.per_layer_f)):
            if a > b + 1e-12:
                raise ConfigError(f"layer {l}: initial sparsity {a} exceeds final sparsity {b}")

    @property
    def end(self) -> int:
        return self.t0 + self.n * self.delta_t

    def round_of(self, t: int) -> int:
        q, rem = divmod(t - self.t0, self.delta_t)
        if rem or not 0 <= q <= self.n:
            raise ScheduleError(
                f"iteration {t} is not on the update grid t0={self.t0} + q*{self.delta_t}, q in [0, {self.n}]"
            )
        return q

    def is_update(self, t: int) -> bool:
        """True at the mask-update iterations t0 + q*delta_t, q = 1..n."""
        if t <= self.t0 or t > self.end:
            return False
        return (t - self.t0) % self.delta_t == 0


def _progress(t: int, t0: int, delta_t: int, n: int) -> float:
    return (t - t0) / (n * delta_t)


def sparsity_at(sched: SparsitySchedule, layer: int, t: int) -> float:
    q = sched.round_of(t)
    lo, hi = sched.per_layer_i[layer], sched.per_layer_f[layer]
    if q == 0:
        return lo
    if q == sched.n:
        return hi
    return hi + (lo - hi) * (1.0 - _progress(t, sched.t0, sched.delta_t, sched.n)) ** 3


@dataclass
class DeathRateSchedule:
    d0: float
    d_min: float
    t0: int
    delta_t: int
    n: int

    def __post_init__(self):
        if not 0.0 <= self.d_min <= self.d0 <= 1.0:
            raise ConfigError(f"need 0 <= d_min <= d0 <= 1, got d_min={self.d_min}, d0={self.d0}")


def death_rate_at(sched: DeathRateSchedule, t: int) -> float:
    q, rem = divmod(t - sched.t0, sched.delta_t)
    if rem or not 0 <= q <= sched.n:
        raise ScheduleError(f"iteration {t} is not on the death-rate grid")
    if q == 0:
        return sched.d0
    if q == sched.n:
        return sched.d_min
    x = _progress(t, sched.t0, sched.delta_t, sched.n)
    return sched.d_min + 0.5 * (sched.d0 - sched.d_min) * (1.0 + math.cos(math.pi * x))


@dataclass(frozen=True)
class PlanRow:
    layer: int
    round: int
    size: int
    n_pre: int
    d_count: int
    n_post: int
    g_count: int

    @property
    def n_final(self) -> int:
        return self.n_post + self.g_count


@dataclass
class UpdatePlan:
    round: int
    iteration: int
    death_rate: float
    rows: list[PlanRow]


def plan_row(layer: int, q: int, size: int, n_pre: int, death_rate: float, sparsity: float) -> PlanRow:
    """Drop/grow counts for one layer.

    The drop count is the annealed death quota, raised if needed so the
    round can reach its target density and lowered if the inactive pool
    could not absorb the regrowth.
    """
    target = target_active(size, sparsity)
    d = round_half_up(death_rate * n_pre)
    d = max(d, n_pre - target)
    d = min(d, size - target, n_pre)
    n_post = n_pre - d
    return PlanRow(layer, q, size, n_pre, d, n_post, target - n_post)


def plan_update(
    layers: Sequence[MaskedLayer],
    sched: SparsitySchedule,
    death_sched: DeathRateSchedule,
    t: int,
) -> UpdatePlan:
    if not sched.is_update(t):
        raise ScheduleError(f"iteration {t} is not an update iteration")
    q = sched.round_of(t)
    d_t = death_rate_at(death_sched, t)
    rows = [
        plan_row(l, q, layer.size, layer.active_count, d_t, sparsity_at(sched, l, t))
        for l, layer in enumerate(layers)
    ]
    return UpdatePlan(q, t, d_t, rows)


@dataclass
class ChangeReport:
    round: int
    layer: int
    dropped: np.ndarray
    grown: np.ndarray
    density: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "round": self.round,
                "layer": self.layer,
                "dropped": int(self.dropped.size),
                "grown": int(self.grown.size),
                "density": self.density,
            }
        )


def apply_update(
    layer: MaskedLayer,
    row: PlanRow,
    dense_grad: np.ndarray,
    policy: GrowthPolicy,
    rng: np.random.Generator | None = None,
) -> ChangeReport:
    """Drop the ``row.d_count`` smallest active weights, then grow ``row.g_count``.

    Grown weights start at exactly zero. Positions dropped in this round
    are not eligible to regrow in it.
    """
    if dense_grad.shape != layer.weights.shape:
        raise CountError(f"gradient {dense_grad.shape} does not match weights {layer.weights.shape}")
    if layer.active_count != row.n_pre:
        raise CountError(f"layer {row.layer} has {layer.active_count} active weights, plan expects {row.n_pre}")
    mask = layer.mask.reshape(-1)
    weights = layer.weights.reshape(-1)
    active = np.flatnonzero(mask)
    inactive = np.flatnonzero(mask == 0)
    dropped = bottom_k_abs(weights, row.d_count, among=active)
    if row.g_count > inactive.size:
        raise CountError(f"cannot grow {row.g_count} of {inactive.size} inactive positions")
    if policy.variant == "gradient-topk":
        grown = top_k_abs(dense_grad, row.g_count, among=inactive)
    else:
        if rng is None:
            raise ConfigError("random growth needs an rng")
        grown = np.sort(rng.choice(inactive, size=row.g_count, replace=False)) if row.g_count else inactive[:0]
    mask[dropped] = 0
    weights[dropped] = 0.0
    mask[grown] = 1
    weights[grown] = 0.0
    return ChangeReport(row.round, row.layer, dropped, grown, layer.density)


def report_lines(reports: Sequence[ChangeReport]) -> str:
    return "".join(r.to_json() + "\n" for r in reports)
