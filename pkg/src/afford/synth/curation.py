"""Label extraction from a record's demonstration intermediates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..contact_extract import default_k, fit_gmm, contact_point, region_membership
from ..errors import AffordError, CurationFailed
from ..geometry import PoseCenteredAffordance, geodesic_angle
from ..grip_mapping import GripConfig, hand_to_gripper
from .records import SampleRecord


@dataclass(frozen=True)
class CurationConfig:
    k_max: int = 2
    gmm_seed: int = 0
    grip: GripConfig = GripConfig()


def curate_affordance(record: SampleRecord, cfg: CurationConfig = CurationConfig()) -> PoseCenteredAffordance:
    """Contact pose from the hand skeleton, contact point from the in-region tracks."""
    inter = record.intermediates
    if inter is None:
        raise CurationFailed(record.id, "record carries no curation intermediates")
    try:
        q, _, _ = hand_to_gripper(inter.hand, inter.object_points, cfg.grip)
        t = inter.tracks
        keep = region_membership(t.pos_contact, t.visible, inter.region)
        pts = t.pos_pre[keep]
        gmm = fit_gmm(pts, default_k(len(pts), cfg.k_max) if len(pts) else 1, cfg.gmm_seed)
        c = contact_point(gmm)
    except AffordError as exc:
        raise CurationFailed(record.id, exc) from exc
    return PoseCenteredAffordance(c, q)


def curate(record: SampleRecord, cfg: CurationConfig = CurationConfig()) -> SampleRecord:
    """Return a copy of ``record`` with the extracted affordance attached as its label."""
    return record.with_curated(curate_affordance(record, cfg))


def curation_errors(record: SampleRecord) -> tuple[float, float]:
    """(pixel error, geodesic error in radians) of the curated label against ground truth."""
    a, g = record.curated, record.gt
    if a is None:
        raise ValueError(f"record {record.id} has no curated label")
    d = float(np.hypot(a.contact_point.u - g.contact_point.u, a.contact_point.v - g.contact_point.v))
    return d, geodesic_angle(a.orientation.as_array(), g.orientation.as_array())
