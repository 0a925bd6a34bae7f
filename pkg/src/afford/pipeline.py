"""Glue between data generation, curation, training, sampling and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionSchedule, latent_to_affordance, sample_latents
from .denoiser import BatchedPredictor, Denoiser, TrainConfig, build_model, records_to_tensors, train
from .errors import CurationFailed, DimensionMismatch
from .evalkit import NSS_SIGMA, EvalResult, evaluate
from .synth.curation import CurationConfig, curate_affordance, curation_errors
from .synth.generator import generate_records
from .synth.records import Provenance


def generate(n: int, seed: int, width: int = 64, archetypes=None, clutter_max: int = 3, twin: bool = False,
             sigma_track: float = 0.0, sigma_hand: float = 0.0, provenance: str = "synthetic", id_prefix: str = "s"):
    return generate_records(n, seed, width=width, archetypes=archetypes, clutter_max=clutter_max, twin=twin,
                            sigma_track=sigma_track, sigma_hand=sigma_hand, provenance=Provenance(provenance),
                            id_prefix=id_prefix)


@dataclass
class CurationSummary:
    records: list = field(default_factory=list)
    curated: int = 0
    skipped: int = 0
    failed: list = field(default_factory=list)
    px_errors: list = field(default_factory=list)
    rot_errors: list = field(default_factory=list)

    @property
    def eligible(self) -> int:
        return self.curated + len(self.failed)

    @property
    def success_fraction(self) -> float:
        return self.curated / self.eligible if self.eligible else 1.0


def curate_records(records, cfg: CurationConfig = CurationConfig()) -> CurationSummary:
    """Attach curated labels to every record carrying intermediates; others are skipped."""
    out = CurationSummary()
    for r in records:
        if r.intermediates is None:
            out.skipped += 1
            out.records.append(r)
            continue
        try:
            r = r.with_curated(curate_affordance(r, cfg))
        except CurationFailed as exc:
            out.failed.append(exc.record_id)
            out.records.append(r)
            continue
        out.curated += 1
        px, rad = curation_errors(r)
        out.px_errors.append(px)
        out.rot_errors.append(rad)
        out.records.append(r)
    return out


def split_holdout(records, fraction: float, seed: int):
    """Deterministic (train, held-out) split."""
    records = list(records)
    n_hold = int(round(fraction * len(records)))
    if n_hold == 0:
        return records, []
    order = np.random.default_rng([seed, 23]).permutation(len(records))
    hold = set(order[:n_hold].tolist())
    return [r for j, r in enumerate(records) if j not in hold], [r for j, r in enumerate(records) if j in hold]


def train_model(records, cfg: TrainConfig, sched_loc: DiffusionSchedule, sched_rot: DiffusionSchedule,
                callback=None) -> tuple[Denoiser, list[float]]:
    model = build_model(cfg)
    data = records_to_tensors(records, cfg.max_depth)
    curve = train(model, data, sched_loc, sched_rot, callback=callback)
    return model, curve


def predict(model: Denoiser, records, sched_loc: DiffusionSchedule, sched_rot: DiffusionSchedule,
            n_per_scene: int = 1, seed: int = 0, batch: int = 256) -> list[list]:
    """Sample ``n_per_scene`` affordances per record; deterministic given ``seed``."""
    records = list(records)
    if not records:
        return []
    w, h = records[0].width, records[0].height
    p = model.cfg.patch_size
    if w % p or h % p:
        raise DimensionMismatch(f"image size {w}x{h} not divisible by patch size {p}")
    out = []
    for start in range(0, len(records), batch):
        chunk = records[start:start + batch]
        data = records_to_tensors(chunk, model.cfg.max_depth, labels=False)
        pred = BatchedPredictor(model, data.frames, data.masks, data.instr.tolist(), n_per_scene)
        lat = sample_latents(pred, None, sched_loc, sched_rot, seed=0, n=len(chunk) * n_per_scene,
                             rng=np.random.default_rng([seed, start]))
        for j in range(len(chunk)):
            rows = range(j * n_per_scene, (j + 1) * n_per_scene)
            out.append([latent_to_affordance(lat.loc[k], lat.rot[k], w, h) for k in rows])
    return out


def oracle_predictions(records, n_per_scene: int = 1) -> list[list]:
    """Ground-truth passthrough; exercises the evaluation harness independently of a model."""
    return [[r.gt] * n_per_scene for r in records]


def evaluate_model(model: Denoiser, records, sched_loc, sched_rot, n_per_scene: int = 1, seed: int = 0,
                   sigma_h: float = NSS_SIGMA) -> EvalResult:
    preds = predict(model, records, sched_loc, sched_rot, n_per_scene, seed)
    return evaluate(records, preds, sigma_h)
