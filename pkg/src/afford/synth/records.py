"""Sample records shared by the generator, the dataset format and training."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..contact_extract import FingerRegion, TrackedPoint
from ..geometry import CameraIntrinsics, DepthMap, PixelPoint, PoseCenteredAffordance, nearest_pixel
from ..grip_mapping import HandKeypoints


class Provenance(str, enum.Enum):
    SYNTHETIC = "synthetic"
    HUMAN_CURATED = "human_curated"
    ROBOT = "robot"


@dataclass(frozen=True, eq=False)
class RgbdFrame:
    """Colour stored as ``uint8`` (H, W, 3); :meth:`rgb_float` gives the [0, 1] view."""

    rgb: np.ndarray
    depth: DepthMap

    def __post_init__(self):
        rgb = np.asarray(self.rgb)
        if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"rgb must be uint8 (H, W, 3), got {rgb.dtype} {rgb.shape}")
        if rgb.shape[:2] != self.depth.values.shape:
            raise ValueError("rgb and depth sizes differ")

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    def rgb_float(self) -> np.ndarray:
        return self.rgb.astype(np.float32) / 255.0


@dataclass(frozen=True, eq=False)
class TrackSet:
    """Column form of a list of :class:`TrackedPoint`."""

    ids: np.ndarray  # (n,) int64
    pos_pre: np.ndarray  # (n, 2)
    pos_contact: np.ndarray  # (n, 2)
    visible: np.ndarray  # (n,) bool

    def __post_init__(self):
        n = len(self.ids)
        if len(np.unique(self.ids)) != n:
            raise ValueError("track ids must be unique")
        if self.pos_pre.shape != (n, 2) or self.pos_contact.shape != (n, 2) or self.visible.shape != (n,):
            raise ValueError("inconsistent track array shapes")

    def __len__(self):
        return len(self.ids)

    def to_points(self) -> list[TrackedPoint]:
        return [
            TrackedPoint(int(i), PixelPoint(*map(float, p)), PixelPoint(*map(float, c)), bool(v))
            for i, p, c, v in zip(self.ids, self.pos_pre, self.pos_contact, self.visible)
        ]

    def rows(self) -> np.ndarray:
        """``(n, 6)`` rows ``id, u_pre, v_pre, u_contact, v_contact, visible``."""
        return np.column_stack([self.ids.astype(float), self.pos_pre, self.pos_contact, self.visible.astype(float)])

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "TrackSet":
        rows = np.asarray(rows, dtype=float).reshape(-1, 6)
        return cls(rows[:, 0].astype(np.int64), rows[:, 1:3].copy(), rows[:, 3:5].copy(), rows[:, 5] != 0)


@dataclass(frozen=True, eq=False)
class Intermediates:
    hand: HandKeypoints
    tracks: TrackSet
    region: FingerRegion
    object_points: np.ndarray  # (n, 3) contact-frame object surface points


@dataclass(frozen=True, eq=False)
class SampleRecord:
    id: str
    frame: RgbdFrame
    mask: np.ndarray  # (H, W) uint8, 1 = target object
    instruction_id: int
    gt: PoseCenteredAffordance
    intrinsics: CameraIntrinsics
    provenance: Provenance = Provenance.SYNTHETIC
    intermediates: Optional[Intermediates] = None
    curated: Optional[PoseCenteredAffordance] = None
    meta: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.frame.width

    @property
    def height(self) -> int:
        return self.frame.height

    def label(self) -> PoseCenteredAffordance:
        """Training target: the curated label when present, else ground truth."""
        return self.curated if self.curated is not None else self.gt

    def with_curated(self, a: PoseCenteredAffordance) -> "SampleRecord":
        return replace(self, curated=a)

    def without_intermediates(self, provenance: Provenance | None = None) -> "SampleRecord":
        return replace(self, intermediates=None, provenance=provenance or self.provenance)


def validate_record(r: SampleRecord) -> None:
    """Check the record invariants; raises ValueError naming the first violation."""
    h, w = r.mask.shape
    if (w, h) != (r.width, r.height):
        raise ValueError(f"record {r.id}: mask size {w}x{h} != frame {r.width}x{r.height}")
    if (r.intrinsics.width, r.intrinsics.height) != (w, h):
        raise ValueError(f"record {r.id}: intrinsics size does not match frame")
    for name, a in (("gt", r.gt), ("curated", r.curated)):
        if a is None:
            continue
        if abs(a.orientation.norm() - 1.0) > 1e-6:
            raise ValueError(f"record {r.id}: {name} orientation is not a unit quaternion")
    u, v = r.gt.contact_point
    iu, iv = nearest_pixel(u, v)
    if not (0 <= iu < w and 0 <= iv < h):
        raise ValueError(f"record {r.id}: gt contact point outside the image")
    if not r.mask[iv, iu]:
        raise ValueError(f"record {r.id}: gt contact point outside the object mask")
    if not r.frame.depth.values[iv, iu] > 0:
        raise ValueError(f"record {r.id}: no valid depth at the gt contact point")
