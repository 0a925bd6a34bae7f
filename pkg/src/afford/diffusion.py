"""Network-agnostic DDPM machinery over pose-centred affordance latents.

Latents have two independent components, each with its own variance
schedule: ``loc`` (contact point normalised to [-1, 1]) and ``rot``
(flattened 6-D rotation). All arrays may carry leading batch dimensions.
Step indices are 1-based: step ``i`` uses ``betas[i - 1]``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BadParams, StepOutOfRange
from .geometry import PixelPoint, PoseCenteredAffordance, Quaternion, quats_to_rot6d, rot6d_to_quats

LOC_DIM = 2
ROT_DIM = 6


class ScheduleKind(str, enum.Enum):
    SCALED_LINEAR = "scaled_linear"
    SQUARED_COSINE = "squared_cosine"


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    kind: ScheduleKind
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def check_step(self, i):
        arr = np.asarray(i)
        if np.any(arr < 1) or np.any(arr > self.n_steps):
            raise StepOutOfRange(f"step {i} outside [1, {self.n_steps}]")

    def alpha_bar(self, i):
        """Cumulative product up to step ``i``; ``alpha_bar(0) == 1``."""
        ext = np.concatenate([[1.0], self.alpha_bars])
        return ext[np.asarray(i)]


def build_schedule(kind, n_steps: int = 100, beta_start: float = 8.5e-4,
                   beta_end: float = 0.012, s: float = 0.008) -> DiffusionSchedule:
    kind = ScheduleKind(kind)
    if not isinstance(n_steps, (int, np.integer)) or n_steps < 1:
        raise BadParams(f"n_steps must be a positive integer, got {n_steps!r}")
    if kind is ScheduleKind.SCALED_LINEAR:
        if not (0 < beta_start < beta_end < 1):
            raise BadParams(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
        frac = np.arange(n_steps) / max(n_steps - 1, 1)
        betas = (math.sqrt(beta_start) + frac * (math.sqrt(beta_end) - math.sqrt(beta_start))) ** 2
        betas[0] = beta_start  # exact endpoints, free of sqrt round-off
        if n_steps > 1:
            betas[-1] = beta_end
    else:
        if not (0 < s <= 0.1):
            raise BadParams(f"cosine offset must lie in (0, 0.1], got {s}")

        def f(t):
            return np.cos(((t / n_steps + s) / (1 + s)) * math.pi / 2) ** 2

        t = np.arange(n_steps + 1, dtype=float)
        abar = f(t) / f(0.0)
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-12, 0.999)
    betas = np.asarray(betas, dtype=float)
    alphas = 1.0 - betas
    return DiffusionSchedule(kind, betas, alphas, np.cumprod(alphas))


# ---------------------------------------------------------------------------
# latents


@dataclass(frozen=True, eq=False)
class AffordanceLatent:
    loc: np.ndarray  # (..., 2)
    rot: np.ndarray  # (..., 6)

    @property
    def batch_shape(self):
        return np.shape(self.loc)[:-1]


@dataclass(frozen=True, eq=False)
class NoisePair:
    eps_loc: np.ndarray
    eps_rot: np.ndarray

    @classmethod
    def zeros(cls, batch_shape=()):
        return cls(np.zeros(tuple(batch_shape) + (LOC_DIM,)), np.zeros(tuple(batch_shape) + (ROT_DIM,)))

    @classmethod
    def standard_normal(cls, rng: np.random.Generator, batch_shape=()):
        shape = tuple(batch_shape)
        return cls(rng.standard_normal(shape + (LOC_DIM,)), rng.standard_normal(shape + (ROT_DIM,)))


@dataclass(frozen=True)
class LossWeights:
    w_loc: float = 1.0
    w_rot: float = 1.0

    def __post_init__(self):
        if self.w_loc < 0 or self.w_rot < 0 or (self.w_loc == 0 and self.w_rot == 0):
            raise BadParams("loss weights must be non-negative and not both zero")


def normalize_loc(uv, width: int, height: int) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    size = np.array([width, height], dtype=float)
    return 2.0 * (uv + 0.5) / size - 1.0


def denormalize_loc(loc, width: int, height: int) -> np.ndarray:
    loc = np.asarray(loc, dtype=float)
    size = np.array([width, height], dtype=float)
    return (loc + 1.0) * size / 2.0 - 0.5


def _coef(values, i, trailing_dims: int):
    c = np.asarray(values)[np.asarray(i) - 1]
    return np.reshape(c, np.shape(c) + (1,) * trailing_dims)


def forward_noise(a0: AffordanceLatent, i, sched_loc: DiffusionSchedule,
                  sched_rot: DiffusionSchedule, eps: NoisePair) -> AffordanceLatent:
    """Closed-form ``q(a_i | a_0)``; ``i`` may be a scalar or one step per batch element."""
    sched_loc.check_step(i)
    sched_rot.check_step(i)
    ab_l = _coef(sched_loc.alpha_bars, i, 1)
    ab_r = _coef(sched_rot.alpha_bars, i, 1)
    loc = np.sqrt(ab_l) * a0.loc + np.sqrt(1.0 - ab_l) * eps.eps_loc
    rot = np.sqrt(ab_r) * a0.rot + np.sqrt(1.0 - ab_r) * eps.eps_rot
    return AffordanceLatent(loc, rot)


def noise_loss(pred: NoisePair, target: NoisePair, w: LossWeights = LossWeights()):
    """Weighted L1 noise loss, means over the vector dimensions.

    Works on numpy arrays and torch tensors alike; batched inputs give one
    loss per batch element.
    """
    l_loc = abs(pred.eps_loc - target.eps_loc).mean(-1)
    l_rot = abs(pred.eps_rot - target.eps_rot).mean(-1)
    return w.w_loc * l_loc + w.w_rot * l_rot


def _reverse(x, i: int, pred, z, sched: DiffusionSchedule):
    beta = sched.betas[i - 1]
    alpha = sched.alphas[i - 1]
    abar = sched.alpha_bars[i - 1]
    mean = (x - beta / math.sqrt(1.0 - abar) * pred) / math.sqrt(alpha)
    if i == 1:
        return mean
    var = (1.0 - sched.alpha_bars[i - 2]) / (1.0 - abar) * beta
    return mean + math.sqrt(var) * z


def ddpm_step(a_i: AffordanceLatent, i: int, pred: NoisePair, sched_loc: DiffusionSchedule,
              sched_rot: DiffusionSchedule, z: NoisePair | None = None) -> AffordanceLatent:
    """One ancestral step ``a_i -> a_{i-1}`` (posterior variance; no noise at ``i == 1``)."""
    sched_loc.check_step(i)
    sched_rot.check_step(i)
    if z is None:
        z = NoisePair.zeros(a_i.batch_shape)
    return AffordanceLatent(
        _reverse(np.asarray(a_i.loc, dtype=float), i, np.asarray(pred.eps_loc), np.asarray(z.eps_loc), sched_loc),
        _reverse(np.asarray(a_i.rot, dtype=float), i, np.asarray(pred.eps_rot), np.asarray(z.eps_rot), sched_rot),
    )


NoisePredictor = Callable[[AffordanceLatent, int, object], NoisePair]


def sample_latents(model: NoisePredictor, cond, sched_loc: DiffusionSchedule,
                   sched_rot: DiffusionSchedule, seed: int, n: int = 1,
                   rng: np.random.Generator | None = None) -> AffordanceLatent:
    """Run the full reverse chain for ``n`` parallel samples, returning clean latents (n, .)."""
    if sched_loc.n_steps != sched_rot.n_steps:
        raise BadParams("location and rotation schedules must share the step count")
    rng = np.random.default_rng(seed) if rng is None else rng
    a = AffordanceLatent(*_draw(rng, n))
    for i in range(sched_loc.n_steps, 0, -1):
        pred = model(a, i, cond)
        z = NoisePair(*_draw(rng, n)) if i > 1 else None
        a = ddpm_step(a, i, pred, sched_loc, sched_rot, z)
    return a


def _draw(rng, n):
    return rng.standard_normal((n, LOC_DIM)), rng.standard_normal((n, ROT_DIM))


def latent_to_affordance(loc, rot, width: int, height: int) -> PoseCenteredAffordance:
    uv = denormalize_loc(loc, width, height)
    uv = np.clip(uv, [0.0, 0.0], [width - 1.0, height - 1.0])
    q = rot6d_to_quats(np.asarray(rot, dtype=float))  # raises DegenerateRotation
    return PoseCenteredAffordance(PixelPoint(float(uv[0]), float(uv[1])), Quaternion(*(float(c) for c in q)))


def affordance_to_latent(a: PoseCenteredAffordance, width: int, height: int) -> AffordanceLatent:
    return AffordanceLatent(normalize_loc(a.contact_point, width, height), quats_to_rot6d(a.orientation.as_array()))


def sample(model: NoisePredictor, cond, sched_loc: DiffusionSchedule, sched_rot: DiffusionSchedule,
           seed: int, width: int, height: int, n: int = 1) -> list[PoseCenteredAffordance]:
    """Draw ``n`` affordances for one conditioning bundle; deterministic given ``seed``."""
    lat = sample_latents(model, cond, sched_loc, sched_rot, seed, n)
    return [latent_to_affordance(lat.loc[j], lat.rot[j], width, height) for j in range(n)]
