"""Pinhole camera model, depth unprojection and rotation representations.

Conventions used throughout the package:

* camera frame: +z forward, +x right, +y down (metres);
* pixel coordinates ``(u, v)`` are (column, row); the pixel with integer
  index ``(i, j)`` covers ``[i - 0.5, i + 0.5) x [j - 0.5, j + 0.5)``;
* depth at a non-integer pixel is sampled nearest-neighbour at
  ``floor(u + 0.5), floor(v + 0.5)``;
* quaternions are scalar-first ``(w, x, y, z)`` and canonicalised to
  ``w >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateRotation, InvalidDepth, NonUnitQuaternion, OutOfBounds

MAX_DEPTH = 100.0
UNIT_TOL = 1e-4
DEGENERATE_TOL = 1e-6


class PixelPoint(NamedTuple):
    u: float
    v: float


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def for_image(cls, width: int, height: int, fov_scale: float = 1.2) -> "CameraIntrinsics":
        """Square-pixel camera with focal length ``fov_scale * width``, centred principal point."""
        f = fov_scale * width
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    def as_tuple(self):
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height)


def _canonical_sign(q: np.ndarray) -> np.ndarray:
    """Flip ``q`` so that its first non-zero component is positive (w first)."""
    for c in q:
        if c > 0:
            return q
        if c < 0:
            return -q
    return q


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        arr = np.array([self.w, self.x, self.y, self.z], dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("quaternion components must be finite")
        canon = _canonical_sign(arr)
        if canon is not arr:
            for name, val in zip("wxyz", canon):
                object.__setattr__(self, name, float(val))

    @classmethod
    def from_array(cls, q, normalize: bool = True) -> "Quaternion":
        q = np.asarray(q, dtype=float).reshape(4)
        if normalize:
            n = np.linalg.norm(q)
            if n < DEGENERATE_TOL:
                raise NonUnitQuaternion("cannot normalise a zero quaternion")
            q = q / n
        return cls(*(float(c) for c in q))

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=float)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


@dataclass(frozen=True)
class Rot6D:
    """First two columns ``a1, a2`` of a rotation matrix (not necessarily orthonormal)."""

    a1: tuple
    a2: tuple

    def __post_init__(self):
        a1 = tuple(float(c) for c in self.a1)
        a2 = tuple(float(c) for c in self.a2)
        if len(a1) != 3 or len(a2) != 3:
            raise ValueError("Rot6D columns must be 3-vectors")
        if not all(math.isfinite(c) for c in a1 + a2):
            raise ValueError("Rot6D components must be finite")
        object.__setattr__(self, "a1", a1)
        object.__setattr__(self, "a2", a2)

    @classmethod
    def from_flat(cls, vec) -> "Rot6D":
        vec = np.asarray(vec, dtype=float).reshape(6)
        return cls(tuple(vec[:3]), tuple(vec[3:]))

    def flat(self) -> np.ndarray:
        return np.array(self.a1 + self.a2, dtype=float)


@dataclass(frozen=True)
class Pose6DoF:
    position: Point3
    orientation: Quaternion


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Row-major depth grid in metres; ``values[v, u]``. Non-positive entries are invalid."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {vals.shape}")
        valid = vals > 0
        if np.any(valid & ~(vals < MAX_DEPTH)) or not np.all(np.isfinite(vals)):
            raise ValueError(f"valid depths must lie in (0, {MAX_DEPTH}) m")
        object.__setattr__(self, "values", vals)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0

    def __eq__(self, other):
        if not isinstance(other, DepthMap):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class PoseCenteredAffordance:
    """A 2-D contact point paired with a 3-D contact orientation."""

    contact_point: PixelPoint
    orientation: Quaternion


# ---------------------------------------------------------------------------
# camera model


def nearest_pixel(u: float, v: float) -> tuple[int, int]:
    return int(math.floor(u + 0.5)), int(math.floor(v + 0.5))


def in_bounds(c, width: int, height: int) -> bool:
    u, v = c
    return -0.5 <= u < width - 0.5 and -0.5 <= v < height - 0.5


def unproject(k: CameraIntrinsics, c, depth: DepthMap) -> Point3:
    """Lift pixel ``c`` to a camera-frame point using the depth at its nearest pixel."""
    u, v = float(c[0]), float(c[1])
    if not (math.isfinite(u) and math.isfinite(v)) or not in_bounds((u, v), depth.width, depth.height):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {depth.width}x{depth.height} image")
    iu, iv = nearest_pixel(u, v)
    z = float(depth.values[iv, iu])
    if not z > 0:
        raise InvalidDepth(f"no valid depth at pixel ({iu}, {iv})")
    return Point3((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z)


def project(k: CameraIntrinsics, p) -> PixelPoint:
    x, y, z = (float(c) for c in p)
    if z <= 0:
        raise ValueError("cannot project a point at or behind the camera plane")
    return PixelPoint(k.fx * x / z + k.cx, k.fy * y / z + k.cy)


def project_array(k: CameraIntrinsics, pts: np.ndarray) -> np.ndarray:
    """Vectorised :func:`project` for an ``(n, 3)`` array, returns ``(n, 2)``."""
    pts = np.asarray(pts, dtype=float)
    z = pts[..., 2]
    return np.stack([k.fx * pts[..., 0] / z + k.cx, k.fy * pts[..., 1] / z + k.cy], axis=-1)


def unproject_array(k: CameraIntrinsics, uv: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Lift pixels ``uv`` (n, 2) with explicit depths ``z`` (n,) to camera points."""
    uv = np.asarray(uv, dtype=float)
    z = np.asarray(z, dtype=float)
    return np.stack([(uv[..., 0] - k.cx) * z / k.fx, (uv[..., 1] - k.cy) * z / k.fy, z], axis=-1)


def assemble_pose(k: CameraIntrinsics, a: PoseCenteredAffordance, depth: DepthMap) -> Pose6DoF:
    return Pose6DoF(unproject(k, a.contact_point, depth), a.orientation)


# ---------------------------------------------------------------------------
# rotations (array forms operate on trailing dimensions and broadcast)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to canonical (w >= 0) unit quaternion, Shepperd's method."""
    m = np.asarray(m, dtype=float)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, r in enumerate(flat):
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        diag = (tr, r[0, 0], r[1, 1], r[2, 2])
        i = int(np.argmax(diag))
        if i == 0:
            s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
            q = (0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s)
        elif i == 1:
            s = 2.0 * math.sqrt(max(1.0 + r[0, 0] - r[1, 1] - r[2, 2], 0.0))
            q = ((r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s)
        elif i == 2:
            s = 2.0 * math.sqrt(max(1.0 + r[1, 1] - r[0, 0] - r[2, 2], 0.0))
            q = ((r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s)
        else:
            s = 2.0 * math.sqrt(max(1.0 + r[2, 2] - r[0, 0] - r[1, 1], 0.0))
            q = ((r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s)
        q = np.asarray(q)
        out[n] = _canonical_sign(q / np.linalg.norm(q))
    return out.reshape(m.shape[:-2] + (4,))


def gram_schmidt(flat6: np.ndarray) -> np.ndarray:
    """Orthonormalise 6-D vectors ``(..., 6)`` into rotation matrices ``(..., 3, 3)``.

    Raises DegenerateRotation when either normalisation denominator is below 1e-6.
    """
    flat6 = np.asarray(flat6, dtype=float)
    a1, a2 = flat6[..., :3], flat6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < DEGENERATE_TOL):
        raise DegenerateRotation("first 6-D column is near zero")
    b1 = a1 / n1
    u2 = a2 - np.sum(a2 * b1, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < DEGENERATE_TOL):
        raise DegenerateRotation("6-D columns are (near) parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def quats_to_rot6d(q: np.ndarray) -> np.ndarray:
    """``(..., 4)`` quaternions to flattened ``(..., 6)`` representations (a1 then a2)."""
    m = quat_to_matrix(q)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def rot6d_to_quats(r: np.ndarray) -> np.ndarray:
    return matrix_to_quat(gram_schmidt(r))


def quat_to_rot6d(q: Quaternion) -> Rot6D:
    arr = q.as_array()
    if abs(np.linalg.norm(arr) - 1.0) > UNIT_TOL:
        raise NonUnitQuaternion(f"|q| = {np.linalg.norm(arr):.6g}")
    return Rot6D.from_flat(quats_to_rot6d(arr))


def rot6d_to_quat(r: Rot6D) -> Quaternion:
    q = rot6d_to_quats(r.flat())
    return Quaternion(*(float(c) for c in q))


def geodesic_angle(q1, q2) -> float:
    """Rotation angle between two unit quaternions, in ``[0, pi]``."""
    a = np.asarray(q1, dtype=float)
    b = np.asarray(q2, dtype=float)
    if np.dot(a, b) < 0:
        b = -b
    # atan2 form of 2*acos(|<a, b>|); stays accurate near zero angle
    return 4.0 * math.atan2(float(np.linalg.norm(a - b)), float(np.linalg.norm(a + b)))
