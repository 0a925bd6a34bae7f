"""Hand-skeleton to parallel-gripper orientation mapping.

The gripper frame is built from two hand cues: the vector between the
fingertips of the force-applying finger pair (closing axis ``x_g``) and the
palm normal (its negation, orthogonalised against ``x_g``, is ``z_g``).

Joint ordering of :class:`HandKeypoints` (21 joints)::

    0        wrist
    1..4     thumb  CMC, MCP, IP, TIP
    5..8     index  MCP, PIP, DIP, TIP
    9..12    middle MCP, PIP, DIP, TIP
    13..16   ring   MCP, PIP, DIP, TIP
    17..20   pinky  MCP, PIP, DIP, TIP
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AmbiguousOrientation,
    DegeneratePalm,
    DegenerateVfp,
    NoObjectPoints,
    ParallelAxes,
)
from .geometry import Point3, Quaternion, matrix_to_quat

WRIST = 0
THUMB_TIP = 4
INDEX_MCP, INDEX_TIP = 5, 8
MIDDLE_MCP, MIDDLE_TIP = 9, 12
RING_MCP = 13
PINKY_MCP = 17
PALM_JOINTS = (WRIST, INDEX_MCP, MIDDLE_MCP, RING_MCP, PINKY_MCP)

JOINT_NAMES = (
    "wrist",
    "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
)

MAX_HAND_SPAN = 0.5
MIN_AXIS_ANGLE = math.radians(5.0)


@dataclass(frozen=True)
class GripConfig:
    sigma_d: float = 0.05
    contact_radius: float = 0.03
    prox_weight: float = 1.0


class PairId(enum.Enum):
    THUMB_INDEX = "thumb_index"
    THUMB_MIDDLE = "thumb_middle"


@dataclass(frozen=True, eq=False)
class HandKeypoints:
    joints: np.ndarray  # (21, 3), camera frame, metres

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=float)
        if j.shape != (21, 3):
            raise ValueError(f"expected 21x3 joints, got {j.shape}")
        if not np.all(np.isfinite(j)):
            raise ValueError("hand joints must be finite")
        span = np.linalg.norm(j[:, None, :] - j[None, :, :], axis=-1).max()
        if span >= MAX_HAND_SPAN:
            raise ValueError(f"implausible hand span {span:.3f} m")
        object.__setattr__(self, "joints", j)

    def __getitem__(self, idx) -> np.ndarray:
        return self.joints[idx]

    def __eq__(self, other):
        return isinstance(other, HandKeypoints) and np.array_equal(self.joints, other.joints)


@dataclass(frozen=True)
class FingerPair:
    pair_id: PairId
    tip_a: Point3  # always the thumb tip
    tip_b: Point3
    score: float


@dataclass(frozen=True)
class PalmFrame:
    normal: np.ndarray
    centroid: Point3
    rms_fit_error: float = field(default=0.0)


def fit_palm_plane(h: HandKeypoints, object_centroid) -> PalmFrame:
    """Least-squares plane through wrist + four MCPs, normal facing the object."""
    pts = h.joints[list(PALM_JOINTS)]
    centroid = pts.mean(axis=0)
    centred = pts - centroid
    _, s, vt = np.linalg.svd(centred)
    # collinear points: second singular value vanishes
    if s[1] < 1e-6:
        raise DegeneratePalm("palm points are (near) collinear")
    normal = vt[2]
    facing = float(np.dot(normal, np.asarray(object_centroid, dtype=float) - centroid))
    if abs(facing) < 1e-9:
        raise AmbiguousOrientation("object centroid lies in the palm plane")
    if facing < 0:
        normal = -normal
    rms = float(np.sqrt(np.mean((centred @ normal) ** 2)))
    return PalmFrame(normal / np.linalg.norm(normal), Point3(*centroid), rms)


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def pair_score(tip_a, tip_b, object_points: np.ndarray, cfg: GripConfig = GripConfig()) -> float:
    tip_a = np.asarray(tip_a, dtype=float)
    tip_b = np.asarray(tip_b, dtype=float)
    d_tip = float(np.linalg.norm(tip_b - tip_a))
    prox = float(np.mean(_segment_distances(object_points, tip_a, tip_b) <= cfg.contact_radius))
    return math.exp(-d_tip / cfg.sigma_d) + cfg.prox_weight * prox


def select_finger_pair(h: HandKeypoints, object_points, cfg: GripConfig = GripConfig()) -> FingerPair:
    pts = np.asarray(object_points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise NoObjectPoints("no object points to score finger pairs against")
    thumb = h[THUMB_TIP]
    s_index = pair_score(thumb, h[INDEX_TIP], pts, cfg)
    s_middle = pair_score(thumb, h[MIDDLE_TIP], pts, cfg)
    if s_middle > s_index + 1e-9:
        return FingerPair(PairId.THUMB_MIDDLE, Point3(*thumb), Point3(*h[MIDDLE_TIP]), s_middle)
    return FingerPair(PairId.THUMB_INDEX, Point3(*thumb), Point3(*h[INDEX_TIP]), s_index)


def gripper_matrix(v_fp, n_palm) -> np.ndarray:
    """Columns ``[x_g, y_g, z_g]`` of the gripper frame from the two hand cues."""
    v = np.asarray(v_fp, dtype=float)
    n = np.asarray(n_palm, dtype=float)
    nv = np.linalg.norm(v)
    if nv <= 1e-6:
        raise DegenerateVfp("fingertips coincide")
    nn = np.linalg.norm(n)
    if nn <= 1e-12:
        raise ParallelAxes("palm normal is zero")
    x = v / nv
    approach = -n / nn
    cos_angle = abs(float(np.dot(x, approach)))
    if math.acos(min(cos_angle, 1.0)) <= MIN_AXIS_ANGLE:
        raise ParallelAxes("finger-pair vector within 5 degrees of the palm normal")
    z = approach - np.dot(approach, x) * x
    z /= np.linalg.norm(z)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def recover_contact_pose(pair: FingerPair, palm: PalmFrame) -> Quaternion:
    v_fp = np.asarray(pair.tip_b, dtype=float) - np.asarray(pair.tip_a, dtype=float)
    q = matrix_to_quat(gripper_matrix(v_fp, palm.normal))
    return Quaternion(*(float(c) for c in q))


def hand_to_gripper(h: HandKeypoints, object_points, cfg: GripConfig = GripConfig()):
    """Full mapping: palm fit, pair selection, orientation. Returns (quaternion, pair, palm)."""
    pts = np.asarray(object_points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise NoObjectPoints("no object points")
    palm = fit_palm_plane(h, pts.mean(axis=0))
    pair = select_finger_pair(h, pts, cfg)
    return recover_contact_pose(pair, palm), pair, palm
