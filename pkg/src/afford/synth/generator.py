"""Procedural tabletop demonstrations with exact ground truth.

A top-down pinhole camera looks at a table plane. Objects are unions of
vertical prisms (rectangles and discs) whose top faces are rasterised
analytically, which yields the RGB image, the depth map and the object mask
of the pre-contact frame. For each scene the generator also emits the
curation inputs a real pipeline would have estimated from the contact frame:
a 21-joint hand skeleton grasping at the ground-truth pose and a set of
tracked object points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..contact_extract import FingerRegion
from ..errors import SpecInfeasible
from ..geometry import (
    CameraIntrinsics,
    DepthMap,
    PixelPoint,
    PoseCenteredAffordance,
    Quaternion,
    matrix_to_quat,
    project_array,
    unproject_array,
)
from ..grip_mapping import HandKeypoints
from .records import Intermediates, Provenance, RgbdFrame, SampleRecord, TrackSet

MAX_PLACEMENT_TRIES = 20
REFERENCE_WIDTH = 256


@dataclass(frozen=True)
class Part:
    kind: str  # "rect" or "disc"
    center: tuple
    size: tuple  # (half_x, half_y) for rects, (radius,) for discs
    height: float
    shade: float = 1.0


@dataclass(frozen=True)
class Archetype:
    name: str
    parts: tuple
    color: tuple


@dataclass(frozen=True)
class Task:
    instruction_id: int
    text: str
    archetype: str
    contact: tuple  # object-local (x, y), metres
    part: int  # index of the part carrying the contact
    closing_angle: float  # closing axis direction relative to the object's local x
    half_width: float  # fingertip half separation along the closing axis, metres
    tilt: float  # approach tilt about the closing axis, radians
    pair: str  # "thumb_index" or "thumb_middle"


ARCHETYPES = {
    a.name: a
    for a in (
        Archetype("box_with_handle", (
            Part("rect", (0.0, 0.0), (0.07, 0.05), 0.08, 0.9),
            Part("rect", (0.0, 0.0), (0.035, 0.008), 0.115, 1.15),
        ), (0.55, 0.36, 0.20)),
        Archetype("mug", (
            Part("rect", (0.0625, 0.0), (0.0225, 0.008), 0.085, 0.85),
            Part("disc", (0.0, 0.0), (0.045,), 0.10, 1.0),
        ), (0.20, 0.42, 0.80)),
        Archetype("drawer_front", (
            Part("rect", (0.0, 0.0), (0.10, 0.055), 0.03, 0.9),
            Part("rect", (0.0, 0.0), (0.045, 0.008), 0.06, 1.2),
        ), (0.85, 0.70, 0.40)),
        Archetype("block", (
            Part("rect", (0.0, 0.0), (0.045, 0.025), 0.05, 1.0),
        ), (0.80, 0.22, 0.20)),
    )
}

HALF_PI = math.pi / 2
TASKS = (
    Task(0, "grasp the box handle", "box_with_handle", (0.0, 0.0), 1, HALF_PI, 0.014, 0.0, "thumb_index"),
    Task(1, "push the box", "box_with_handle", (-0.05, 0.0), 0, HALF_PI, 0.012, math.radians(35), "thumb_index"),
    Task(2, "grasp the mug handle", "mug", (0.0665, 0.0), 0, HALF_PI, 0.014, 0.0, "thumb_index"),
    Task(3, "pick up the mug by the rim", "mug", (-0.033, 0.0), 1, HALF_PI, 0.010, math.radians(20), "thumb_index"),
    Task(4, "open the drawer", "drawer_front", (0.0, 0.0), 1, HALF_PI, 0.014, math.radians(30), "thumb_index"),
    Task(5, "push the drawer closed", "drawer_front", (0.068, 0.0), 0, HALF_PI, 0.012, 0.0, "thumb_index"),
    Task(6, "pick up the block", "block", (0.0, 0.0), 0, HALF_PI, 0.031, 0.0, "thumb_middle"),
    Task(7, "push the block", "block", (-0.03, 0.0), 0, HALF_PI, 0.012, math.radians(35), "thumb_index"),
)
INSTRUCTIONS = tuple(t.text for t in TASKS)
N_INSTRUCTIONS = len(TASKS)


def tasks_for(archetype: str) -> list[Task]:
    return [t for t in TASKS if t.archetype == archetype]


@dataclass(frozen=True)
class ObjectPlacement:
    archetype: str
    x: float  # metres, camera frame, object centre
    y: float
    yaw: float
    scale: float
    color: tuple


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    width: int
    height: int
    archetype: str
    instruction_id: int
    placement: ObjectPlacement
    intrinsics: CameraIntrinsics
    table_depth: float
    clutter: int = 0
    twin: bool = False
    sigma_track: float = 0.0
    sigma_hand: float = 0.0
    occlusion_rate: float = 0.1

    @classmethod
    def from_seed(cls, seed: int, width: int = REFERENCE_WIDTH, height: int | None = None,
                  archetypes=None, clutter_max: int = 3, twin: bool = False,
                  sigma_track: float = 0.0, sigma_hand: float = 0.0,
                  yaw_range: float = math.radians(60)) -> "SceneSpec":
        height = width if height is None else height
        names = sorted(archetypes or ARCHETYPES)
        rng = np.random.default_rng([seed, 0])
        arch = names[int(rng.integers(len(names)))]
        tasks = tasks_for(arch)
        task = tasks[int(rng.integers(len(tasks)))]
        k = CameraIntrinsics.for_image(width, height)
        table = float(rng.uniform(0.66, 0.74))
        yaw = float(rng.uniform(-yaw_range, yaw_range))
        scale = float(rng.uniform(0.9, 1.1))
        jitter = rng.uniform(-0.05, 0.05, size=3)
        color = tuple(float(np.clip(c + j, 0, 1)) for c, j in zip(ARCHETYPES[arch].color, jitter))
        margin = 8.0
        for _ in range(50):
            u0 = rng.uniform(0, width)
            v0 = rng.uniform(0, height)
            place = ObjectPlacement(arch, (u0 - k.cx) * table / k.fx, (v0 - k.cy) * table / k.fy, yaw, scale, color)
            lo, hi = pixel_bounds(place, k, table)
            if lo[0] >= margin and lo[1] >= margin and hi[0] <= width - 1 - margin and hi[1] <= height - 1 - margin:
                break
        else:
            raise SpecInfeasible(f"seed {seed}: {arch} does not fit a {width}x{height} frame")
        n_clutter = int(rng.integers(0, clutter_max + 1)) if clutter_max > 0 else 0
        return cls(seed, width, height, arch, task.instruction_id, place, k, table,
                   n_clutter, twin, sigma_track, sigma_hand)


# ---------------------------------------------------------------------------
# analytic rasterisation


def _rot2(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def _part_world(place: ObjectPlacement, part: Part):
    """Part centre (world XY), rotation, scaled size and top-face depth offset."""
    r = _rot2(place.yaw)
    centre = np.array([place.x, place.y]) + place.scale * (r @ np.asarray(part.center))
    size = tuple(place.scale * s for s in part.size)
    return centre, size, place.scale * part.height


def _part_footprint(place: ObjectPlacement, part: Part, k: CameraIntrinsics, table: float,
                    uu: np.ndarray, vv: np.ndarray):
    centre, size, height = _part_world(place, part)
    z = table - height
    X = (uu - k.cx) * z / k.fx - centre[0]
    Y = (vv - k.cy) * z / k.fy - centre[1]
    if part.kind == "disc":
        inside = X * X + Y * Y <= size[0] ** 2
    else:
        c, s = math.cos(place.yaw), math.sin(place.yaw)
        lx = c * X + s * Y
        ly = -s * X + c * Y
        inside = (np.abs(lx) <= size[0]) & (np.abs(ly) <= size[1])
    return inside, z


def pixel_bounds(place: ObjectPlacement, k: CameraIntrinsics, table: float):
    """Pixel bounding box of an object's rasterised top faces."""
    pts = []
    r = _rot2(place.yaw)
    for part in ARCHETYPES[place.archetype].parts:
        centre, size, height = _part_world(place, part)
        z = table - height
        if part.kind == "disc":
            ang = np.linspace(0, 2 * np.pi, 64, endpoint=False)
            local = np.stack([np.cos(ang), np.sin(ang)], 1) * size[0]
        else:
            local = (r @ (np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * np.asarray(size)).T).T
        xy = centre + local
        pts.append(project_array(k, np.column_stack([xy, np.full(len(xy), z)])))
    pts = np.concatenate(pts)
    return pts.min(axis=0), pts.max(axis=0)


@dataclass
class Canvas:
    depth: np.ndarray
    rgb: np.ndarray
    owner: np.ndarray  # object index per pixel, -1 = table
    part: np.ndarray  # part index within the owner


def render(objects, k: CameraIntrinsics, table: float, table_color, width: int, height: int) -> Canvas:
    vv, uu = np.mgrid[0:height, 0:width].astype(float)
    depth = np.full((height, width), table)
    rgb = np.broadcast_to(np.asarray(table_color, dtype=float), (height, width, 3)).copy()
    owner = np.full((height, width), -1, dtype=np.int64)
    part_idx = np.full((height, width), -1, dtype=np.int64)
    for oi, (place, parts) in enumerate(objects):
        for pi, part in enumerate(parts):
            inside, z = _part_footprint(place, part, k, table, uu, vv)
            hit = inside & (z < depth)
            depth[hit] = z
            owner[hit] = oi
            part_idx[hit] = pi
            rgb[hit] = np.clip(np.asarray(place.color) * part.shade, 0.0, 1.0)
    return Canvas(depth, rgb, owner, part_idx)


def _clutter_placement(rng, k: CameraIntrinsics, table: float, width: int, height: int):
    arch_parts = (Part("rect" if rng.uniform() < 0.5 else "disc", (0.0, 0.0),
                       tuple(rng.uniform(0.012, 0.03, size=2)), float(rng.uniform(0.02, 0.07))),)
    if arch_parts[0].kind == "disc":
        arch_parts = (replace(arch_parts[0], size=(arch_parts[0].size[0],)),)
    u0, v0 = rng.uniform(0, width), rng.uniform(0, height)
    place = ObjectPlacement("clutter", (u0 - k.cx) * table / k.fx, (v0 - k.cy) * table / k.fy,
                            float(rng.uniform(-np.pi, np.pi)), 1.0, tuple(rng.uniform(0.05, 0.95, size=3)))
    return place, arch_parts


def _footprint(place, parts, k, table, width, height):
    vv, uu = np.mgrid[0:height, 0:width].astype(float)
    fp = np.zeros((height, width), dtype=bool)
    for part in parts:
        inside, _ = _part_footprint(place, part, k, table, uu, vv)
        fp |= inside
    return fp


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    from scipy.ndimage import binary_dilation

    return binary_dilation(mask, iterations=max(r, 1))


# ---------------------------------------------------------------------------
# ground-truth pose and hand skeleton


def task_rotation(task: Task, yaw: float) -> np.ndarray:
    """Gripper frame ``[x_g y_g z_g]`` for a task on an object with the given yaw."""
    psi = yaw + task.closing_angle
    x = np.array([math.cos(psi), math.sin(psi), 0.0])
    z0 = np.array([0.0, 0.0, -1.0])
    y0 = np.cross(z0, x)
    z = math.cos(task.tilt) * z0 + math.sin(task.tilt) * y0
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


PALM_OFFSET = 0.085


def hand_local(a: float, pair: str) -> np.ndarray:
    """21 joints in the gripper frame (x closing, z from the object towards the palm)."""
    d = PALM_OFFSET
    j = np.zeros((21, 3))
    j[0] = (-0.045, -0.025, d)
    # thumb
    j[1] = (-0.035, -0.005, d - 0.005)
    j[2] = (-0.040, 0.0, d - 0.030)
    j[3] = (-a - 0.006, 0.0, 0.028)
    j[4] = (-a, 0.0, 0.0)
    mcp = {5: (0.012, 0.012, d), 9: (0.012, -0.008, d), 13: (0.006, -0.027, d), 17: (-0.002, -0.044, d)}
    # idle finger curled back towards the palm; generate_sample repositions its tip
    idle = 9 if pair == "thumb_index" else 5
    tips = {5: (a, 0.0, 0.0), 9: (a, 0.0, 0.0)}
    tips[idle] = (0.0, 0.0, 0.05)
    tips[13] = (0.020, -0.027, d - 0.045)
    tips[17] = (0.012, -0.044, d - 0.040)
    for base in (5, 9, 13, 17):
        m = np.asarray(mcp[base])
        t = np.asarray(tips[base])
        bend = np.array([0.004, 0.0, 0.0])
        j[base] = m
        j[base + 1] = m + 0.45 * (t - m) + bend
        j[base + 2] = m + 0.78 * (t - m) + bend
        j[base + 3] = t
    return j


# ---------------------------------------------------------------------------


TABLE_COLOR = (0.46, 0.50, 0.45)
IDLE_LIFT = 0.04


def generate_sample(spec: SceneSpec, record_id: str | None = None) -> SampleRecord:
    """Render the scene and emit a record with curation intermediates."""
    rng = np.random.default_rng([spec.seed, 1])
    k = spec.intrinsics
    W, H = spec.width, spec.height
    scale_px = W / REFERENCE_WIDTH
    task = TASKS[spec.instruction_id]
    target = (spec.placement, ARCHETYPES[spec.archetype].parts)
    objects = [target]
    table_color = tuple(float(c) for c in np.clip(np.asarray(TABLE_COLOR) + rng.uniform(-0.04, 0.04, 3), 0, 1))

    occupied = _footprint(*target, k, spec.table_depth, W, H)
    gap = max(int(round(3 * scale_px)), 1)

    if spec.twin:
        for _ in range(MAX_PLACEMENT_TRIES):
            u0, v0 = rng.uniform(0, W), rng.uniform(0, H)
            yaw = float(rng.uniform(-math.radians(60), math.radians(60)))
            place = replace(spec.placement, x=(u0 - k.cx) * spec.table_depth / k.fx,
                            y=(v0 - k.cy) * spec.table_depth / k.fy, yaw=yaw)
            lo, hi = pixel_bounds(place, k, spec.table_depth)
            if lo.min() < 0 or hi[0] > W - 1 or hi[1] > H - 1:
                continue
            fp = _footprint(place, target[1], k, spec.table_depth, W, H)
            if not np.any(fp & _dilate(occupied, gap)):
                objects.append((place, target[1]))
                occupied |= fp
                break
        else:
            raise SpecInfeasible(f"seed {spec.seed}: no room for the twin distractor")

    for _ in range(spec.clutter):
        for _ in range(MAX_PLACEMENT_TRIES):
            place, parts = _clutter_placement(rng, k, spec.table_depth, W, H)
            fp = _footprint(place, parts, k, spec.table_depth, W, H)
            if fp.any() and not np.any(fp & _dilate(occupied, gap)):
                objects.append((place, parts))
                occupied |= fp
                break
        else:
            raise SpecInfeasible(f"seed {spec.seed}: clutter placement would occlude the target")

    canvas = render(objects, k, spec.table_depth, table_color, W, H)
    mask = (canvas.owner == 0).astype(np.uint8)

    # ground-truth contact: the designated point on the contact part's top face
    _, _, part_h = _part_world(spec.placement, target[1][task.part])
    z_c = spec.table_depth - part_h
    local = np.asarray(task.contact) * spec.placement.scale
    xy = np.array([spec.placement.x, spec.placement.y]) + _rot2(spec.placement.yaw) @ local
    c = project_array(k, np.array([xy[0], xy[1], z_c]))
    iu, iv = int(math.floor(c[0] + 0.5)), int(math.floor(c[1] + 0.5))
    if not (0 <= iu < W and 0 <= iv < H) or canvas.owner[iv, iu] != 0 or canvas.part[iv, iu] != task.part:
        raise SpecInfeasible(f"seed {spec.seed}: contact region is not visible")

    R = task_rotation(task, spec.placement.yaw)
    q = Quaternion(*(float(v) for v in matrix_to_quat(R)))
    gt = PoseCenteredAffordance(PixelPoint(float(c[0]), float(c[1])), q)

    # contact frame: the object has shifted slightly by the time the hand closes
    shift = rng.uniform(-2.0, 2.0, size=2) * scale_px
    p_contact = unproject_array(k, c + shift, z_c)
    half = task.half_width * spec.placement.scale
    joints = p_contact + hand_local(half, task.pair) @ R.T
    # the idle tip hovers on the viewing ray just beside the grasp, clear of the object
    idle = 9 if task.pair == "thumb_index" else 5
    t_px = project_array(k, joints[[4, 8 if idle == 9 else 12]])
    axis = t_px[1] - t_px[0]
    perp = np.array([-axis[1], axis[0]]) / max(np.linalg.norm(axis), 1e-9)
    lift = max(IDLE_LIFT, 2.0 * half)
    tip = unproject_array(k, t_px.mean(axis=0) + 0.6 * scale_px * perp, z_c - lift)
    mcp = joints[idle]
    bend = R @ np.array([0.004, 0.0, 0.0])
    joints[idle + 1] = mcp + 0.45 * (tip - mcp) + bend
    joints[idle + 2] = mcp + 0.78 * (tip - mcp) + bend
    joints[idle + 3] = tip
    if spec.sigma_hand > 0:
        joints = joints + rng.normal(0.0, spec.sigma_hand, size=joints.shape)
    hand = HandKeypoints(joints)

    stride = max(1, int(round(1 * scale_px)))
    vs, us = np.nonzero(mask)
    keep = (us % stride == 0) & (vs % stride == 0)
    pre_true = np.column_stack([us[keep], vs[keep]]).astype(float)
    n = len(pre_true)
    depth_pre = canvas.depth[vs[keep], us[keep]]
    noise_pre = rng.normal(0.0, 1.0, size=(n, 2)) * spec.sigma_track
    noise_con = rng.normal(0.0, 1.0, size=(n, 2)) * spec.sigma_track
    visible = rng.uniform(size=n) >= spec.occlusion_rate
    pos_contact = pre_true + shift + noise_con
    tracks = TrackSet(np.arange(n, dtype=np.int64), pre_true + noise_pre, pos_contact, visible)
    object_points = unproject_array(k, pos_contact, depth_pre)

    tips = project_array(k, joints[[4, 8, 12]])
    region = FingerRegion(tuple(map(tuple, tips)), dilation=5.0 * scale_px)

    frame = RgbdFrame(np.round(canvas.rgb * 255).astype(np.uint8), DepthMap(canvas.depth.astype(np.float32)))
    meta = {"seed": int(spec.seed), "archetype": spec.archetype, "yaw": float(spec.placement.yaw),
            "clutter": int(spec.clutter), "twin": bool(spec.twin), "sigma_track": float(spec.sigma_track)}
    return SampleRecord(
        id=record_id or f"s{spec.seed:08d}",
        frame=frame,
        mask=mask,
        instruction_id=task.instruction_id,
        gt=gt,
        intrinsics=k,
        provenance=Provenance.SYNTHETIC,
        intermediates=Intermediates(hand, tracks, region, object_points),
        meta=meta,
    )


@dataclass
class GenerationReport:
    records: list = field(default_factory=list)
    infeasible: list = field(default_factory=list)


def generate_records(n: int, seed: int, width: int = REFERENCE_WIDTH, archetypes=None,
                     clutter_max: int = 3, twin: bool = False, sigma_track: float = 0.0,
                     sigma_hand: float = 0.0, provenance: Provenance = Provenance.SYNTHETIC,
                     id_prefix: str = "s") -> GenerationReport:
    """``n`` feasible records from consecutive derived seeds; infeasible seeds are skipped and logged."""
    rep = GenerationReport()
    j = 0
    while len(rep.records) < n:
        s = seed * 1_000_003 + j
        j += 1
        try:
            spec = SceneSpec.from_seed(s, width, archetypes=archetypes, clutter_max=clutter_max,
                                       twin=twin, sigma_track=sigma_track, sigma_hand=sigma_hand)
            rec = generate_sample(spec, record_id=f"{id_prefix}{len(rep.records):06d}")
        except SpecInfeasible as exc:
            rep.infeasible.append((s, str(exc)))
            if len(rep.infeasible) > 10 * n + 100:
                raise
            continue
        if provenance is Provenance.ROBOT:
            rec = rec.without_intermediates(Provenance.ROBOT)
        rep.records.append(rec)
    return rep
