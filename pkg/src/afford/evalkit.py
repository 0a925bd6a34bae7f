"""Metrics for predicted affordances and report writers.

* success rate: the nearest pixel of the prediction lies on the object mask
* NSS: predictions rendered as a sum of isotropic Gaussians, z-scored over the
  image, averaged over mask pixels
* DTM: distance to the nearest mask pixel over the image diagonal
* rotation error: geodesic angle between orientations
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMask
from .geometry import geodesic_angle

NSS_SIGMA = 8.0


def _mask(mask) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if not m.any():
        raise EmptyMask("ground-truth mask has no pixels")
    return m


def _pixel(pred):
    u, v = float(pred[0]), float(pred[1])
    if not (math.isfinite(u) and math.isfinite(v)):
        raise ValueError("prediction must be finite")
    return u, v


def success_rate(pred, gt_mask) -> int:
    """1 if the nearest integer pixel of ``pred`` is a mask pixel, else 0."""
    m = _mask(gt_mask)
    u, v = _pixel(pred)
    iu, iv = math.floor(u + 0.5), math.floor(v + 0.5)
    h, w = m.shape
    return int(0 <= iu < w and 0 <= iv < h and bool(m[iv, iu]))


def saliency_map(points, shape, sigma_h: float = NSS_SIGMA) -> np.ndarray:
    """Sum of isotropic Gaussians centred on ``points`` evaluated at pixel centres."""
    h, w = shape
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    gu = np.exp(-((np.arange(w)[None, :] - pts[:, :1]) ** 2) / (2 * sigma_h ** 2))  # (n, w)
    gv = np.exp(-((np.arange(h)[None, :] - pts[:, 1:]) ** 2) / (2 * sigma_h ** 2))  # (n, h)
    return gv.T @ gu  # separable: sum_k gv_k(v) gu_k(u)


def nss_from_map(sal: np.ndarray, gt_mask) -> float:
    m = _mask(gt_mask)
    sd = sal.std()
    if sd < 1e-12:
        return 0.0
    return float(((sal - sal.mean()) / sd)[m].mean())


def nss(pred_points, gt_mask, sigma_h: float = NSS_SIGMA) -> float:
    m = _mask(gt_mask)
    pts = np.asarray(pred_points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("need at least one predicted point")
    if not np.all(np.isfinite(pts)):
        raise ValueError("predictions must be finite")
    return nss_from_map(saliency_map(pts, m.shape, sigma_h), m)


def dtm(pred, gt_mask) -> float:
    """Distance from ``pred`` to the nearest mask pixel centre over the image diagonal."""
    m = _mask(gt_mask)
    if success_rate(pred, m):
        return 0.0
    u, v = _pixel(pred)
    vs, us = np.nonzero(m)
    d = np.sqrt((us - u) ** 2 + (vs - v) ** 2).min()
    h, w = m.shape
    return float(d / math.hypot(w, h))


def rotation_error(pred, gt) -> float:
    """Geodesic angle in radians between two unit quaternions (sign-invariant)."""
    a = pred.as_array() if hasattr(pred, "as_array") else np.asarray(pred, dtype=float)
    b = gt.as_array() if hasattr(gt, "as_array") else np.asarray(gt, dtype=float)
    return geodesic_angle(a, b)


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class EvalRow:
    sample_id: str
    sr: int
    nss: float
    dtm: float
    rot_err: float


METRICS = ("sr", "nss", "dtm", "rot_err")


@dataclass
class EvalResult:
    rows: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def mean(self, metric: str) -> float:
        if not self.rows:
            return float("nan")
        return float(np.mean([getattr(r, metric) for r in self.rows]))

    def median(self, metric: str) -> float:
        return float(np.median([getattr(r, metric) for r in self.rows])) if self.rows else float("nan")

    @property
    def aggregates(self) -> dict:
        out = {m: self.mean(m) for m in METRICS}
        out["rot_err_median"] = self.median("rot_err")
        out["n"] = len(self.rows)
        return out


def evaluate_sample(sample_id: str, preds, mask, gt_orientation, sigma_h: float = NSS_SIGMA) -> EvalRow:
    """Score one scene; the first prediction counts for SR, DTM and rotation, all of them for NSS."""
    preds = list(preds)
    if not preds:
        raise ValueError("need at least one prediction")
    first = preds[0]
    pts = np.array([[p.contact_point.u, p.contact_point.v] for p in preds])
    return EvalRow(
        sample_id=sample_id,
        sr=success_rate(first.contact_point, mask),
        nss=nss(pts, mask, sigma_h),
        dtm=dtm(first.contact_point, mask),
        rot_err=rotation_error(first.orientation, gt_orientation),
    )


def evaluate(records, predictions, sigma_h: float = NSS_SIGMA) -> EvalResult:
    """``predictions[j]`` is the list of sampled affordances for ``records[j]``."""
    res = EvalResult()
    for r, preds in zip(records, predictions):
        res.rows.append(evaluate_sample(r.id, preds, r.mask, r.gt.orientation, sigma_h))
    res.extra["chance_sr"] = float(np.mean([np.asarray(r.mask, dtype=bool).mean() for r in records]))
    return res


# ---------------------------------------------------------------------------
# reports


def report_json(res: EvalResult, **info) -> str:
    body = {"aggregates": res.aggregates, **res.extra, **info}
    return json.dumps(body, indent=2, sort_keys=True)


def report_text(res: EvalResult, title: str = "evaluation") -> str:
    agg = res.aggregates
    lines = [title, "-" * len(title)]
    lines.append(f"{'samples':<16}{agg['n']:>12d}")
    for key in ("sr", "nss", "dtm", "rot_err", "rot_err_median"):
        lines.append(f"{key:<16}{agg[key]:>12.4f}")
    for key, val in sorted(res.extra.items()):
        if isinstance(val, float):
            lines.append(f"{key:<16}{val:>12.4f}")
    return "\n".join(lines) + "\n"


def report_csv(res: EvalResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", *METRICS])
    for r in res.rows:
        w.writerow([r.sample_id, r.sr, repr(r.nss), repr(r.dtm), repr(r.rot_err)])
    return buf.getvalue()
