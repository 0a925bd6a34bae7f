"""Conditional noise predictor over scene tokens, plus its training loop.

The scene is patch-embedded twice with one shared encoder, once as the full
RGB-D frame and once with the frame multiplied by the object mask; the two
per-patch features are concatenated and projected to the model width. The
noisy affordance becomes a single extra token placed at its (de-normalised)
pixel location. Self-attention uses axial 2-D rotary position encoding, so
attention logits depend only on relative token positions. Each block also
cross-attends to a learned instruction embedding.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import (AffordanceLatent, DiffusionSchedule, LossWeights, NoisePair, affordance_to_latent,
                        denormalize_loc, forward_noise, noise_loss)
from .errors import (BadParams, DimensionMismatch, NonFiniteLoss, ParamIoError, ShapeMismatch, StepOutOfRange,
                     UnknownInstruction, VersionMismatch)

STEP_EMB_DIM = 32
PARAM_FORMAT = "afford-params"
PARAM_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    patch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    steps: int = 10000
    w_loc: float = 1.0
    w_rot: float = 1.0
    seed: int = 0
    n_instructions: int = 8
    max_depth: float = 2.0
    rope_base: float = 64.0
    use_mask_branch: bool = True

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "patch_size", "batch_size", "n_instructions"):
            if int(getattr(self, name)) < 1:
                raise BadParams(f"{name} must be positive")
        if self.steps < 0:
            raise BadParams("steps must be non-negative")
        if self.d_model % self.n_heads:
            raise BadParams("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 4:
            raise BadParams("head dimension must be divisible by 4 for axial rotary encoding")
        if not (self.lr > 0 and self.weight_decay >= 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise BadParams("invalid optimizer settings")
        if not (self.max_depth > 0 and self.rope_base > 1):
            raise BadParams("max_depth must be positive and rope_base > 1")
        LossWeights(self.w_loc, self.w_rot)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# building blocks


def step_embedding(i: torch.Tensor, dim: int = STEP_EMB_DIM) -> torch.Tensor:
    """Sinusoidal embedding of integer steps ``i`` (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = i.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def rotary_tables(pos: torch.Tensor, head_dim: int, base: float):
    """cos/sin tables for axial 2-D rotary encoding; ``pos`` (..., T, 2) in patch units."""
    n = head_dim // 4  # rotation pairs per axis
    freqs = base ** (-torch.arange(n, dtype=pos.dtype) / n)
    ang = torch.cat([pos[..., 0:1] * freqs, pos[..., 1:2] * freqs], dim=-1)  # (..., T, 2n)
    return torch.cos(ang), torch.sin(ang)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive pairs of ``x`` (B, h, T, hd); first half of the pairs by u, second by v."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    c, s = cos.unsqueeze(-3), sin.unsqueeze(-3)  # broadcast over heads
    r1 = x1 * c - x2 * s
    r2 = x1 * s + x2 * c
    return torch.stack([r1, r2], dim=-1).flatten(-2)


class Block(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.cq = nn.Linear(d, d)
        self.ckv = nn.Linear(d, 2 * d)
        self.cproj = nn.Linear(d, d)
        self.ln3 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def _split(self, x):
        b, t, d = x.shape
        return x.view(b, t, self.heads, d // self.heads).transpose(1, 2)

    def self_logits(self, x, cos, sin):
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q = apply_rotary(self._split(q), cos, sin)
        k = apply_rotary(self._split(k), cos, sin)
        return q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), self._split(v)

    def forward(self, x, cos, sin, ctx):
        b, t, d = x.shape
        logits, v = self.self_logits(x, cos, sin)
        x = x + self.proj((logits.softmax(-1) @ v).transpose(1, 2).reshape(b, t, d))
        q = self._split(self.cq(self.ln2(x)))
        k, v = self.ckv(ctx).chunk(2, dim=-1)
        k, v = self._split(k), self._split(v)
        att = (q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])).softmax(-1)
        x = x + self.cproj((att @ v).transpose(1, 2).reshape(b, t, d))
        return x + self.ff(self.ln3(x))


class Denoiser(nn.Module):
    """Noise predictor; ``forward`` works on batches of pre-encoded scenes."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.patch = nn.Conv2d(4, d, cfg.patch_size, stride=cfg.patch_size)
        self.fuse = nn.Linear(2 * d, d)
        self.aff = nn.Sequential(nn.Linear(2 + 6 + STEP_EMB_DIM, d), nn.SiLU(), nn.Linear(d, d))
        self.instr = nn.Embedding(cfg.n_instructions, d)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_layers))
        self.ln_out = nn.LayerNorm(d)
        self.head_loc = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, 2))
        self.head_rot = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, 6))

    def zero_heads(self):
        for head in (self.head_loc, self.head_rot):
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)
        return self

    # scene -----------------------------------------------------------------
    def branch_features(self, frames: torch.Tensor, masks: torch.Tensor):
        """Per-patch (full, masked) encoder features, each (B, T, d)."""
        full = self.patch(frames).flatten(2).transpose(1, 2)
        masked_in = frames * masks if self.cfg.use_mask_branch else torch.zeros_like(frames)
        masked = self.patch(masked_in).flatten(2).transpose(1, 2)
        return full, masked

    def encode_scene(self, frames: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        full, masked = self.branch_features(frames, masks)
        return self.fuse(torch.cat([full, masked], dim=-1))

    def patch_positions(self, height: int, width: int, dtype=torch.float32) -> torch.Tensor:
        p = self.cfg.patch_size
        vv, uu = torch.meshgrid(torch.arange(height // p, dtype=dtype), torch.arange(width // p, dtype=dtype),
                                indexing="ij")
        return torch.stack([uu.flatten() * p + p / 2, vv.flatten() * p + p / 2], dim=-1)

    # denoising -------------------------------------------------------------
    def tokens(self, scene, pos, instr, loc, rot, steps, size, pos_offset=None):
        """Token states and positions (pixel units) before the first block."""
        w, h = size
        a = self.aff(torch.cat([loc, rot, step_embedding(steps).to(loc.dtype)], dim=-1))
        x = torch.cat([scene, a[:, None, :]], dim=1)
        scale = torch.tensor([w / 2.0, h / 2.0], dtype=loc.dtype)
        a_pos = (loc + 1.0) * scale - 0.5
        all_pos = torch.cat([pos.expand(len(loc), -1, -1), a_pos[:, None, :]], dim=1)
        if pos_offset is not None:
            all_pos = all_pos + torch.as_tensor(pos_offset, dtype=loc.dtype)
        return x, all_pos

    def forward(self, scene, pos, instr, loc, rot, steps, size, pos_offset=None):
        x, all_pos = self.tokens(scene, pos, instr, loc, rot, steps, size, pos_offset)
        cos, sin = rotary_tables(all_pos / self.cfg.patch_size, self.cfg.d_model // self.cfg.n_heads,
                                 self.cfg.rope_base)
        ctx = self.instr(instr)[:, None, :]
        for blk in self.blocks:
            x = blk(x, cos, sin, ctx)
        out = self.ln_out(x[:, -1])
        return self.head_loc(out), self.head_rot(out)

    def self_attention_logits(self, scene, pos, instr, loc, rot, steps, size, pos_offset=None):
        """First-block self-attention logits (B, h, T, T); exposed for inspection."""
        x, all_pos = self.tokens(scene, pos, instr, loc, rot, steps, size, pos_offset)
        cos, sin = rotary_tables(all_pos / self.cfg.patch_size, self.cfg.d_model // self.cfg.n_heads,
                                 self.cfg.rope_base)
        return self.blocks[0].self_logits(x, cos, sin)[0]


def build_model(cfg: TrainConfig, dtype=torch.float32) -> Denoiser:
    torch.manual_seed(cfg.seed)
    return Denoiser(cfg).to(dtype)


# ---------------------------------------------------------------------------
# record -> tensor conversion


def frame_tensor(rgb_u8: np.ndarray, depth: np.ndarray, max_depth: float) -> np.ndarray:
    """(4, H, W) float32: rgb in [0, 1] and depth scaled by ``max_depth`` (invalid -> 0)."""
    rgb = np.asarray(rgb_u8, dtype=np.float32) / 255.0
    d = np.clip(np.where(depth > 0, depth, 0.0) / max_depth, 0.0, 1.0).astype(np.float32)
    return np.concatenate([rgb.transpose(2, 0, 1), d[None]], axis=0)


@dataclass(frozen=True, eq=False)
class SceneTokens:
    embeddings: torch.Tensor  # (T, d)
    positions: torch.Tensor  # (T, 2) pixel coordinates of patch centres
    width: int
    height: int


def _check_frame(frame, mask, patch):
    h, w = frame.height, frame.width
    m = np.asarray(mask)
    if m.shape != (h, w):
        raise DimensionMismatch(f"mask {m.shape} does not match frame {(h, w)}")
    if h % patch or w % patch:
        raise DimensionMismatch(f"frame {w}x{h} not divisible by patch size {patch}")


def tokenize_scene(frame, mask, params: Denoiser) -> SceneTokens:
    cfg = params.cfg
    _check_frame(frame, mask, cfg.patch_size)
    dtype = next(params.parameters()).dtype
    x = torch.from_numpy(frame_tensor(frame.rgb, frame.depth.values, cfg.max_depth))[None].to(dtype)
    m = torch.from_numpy(np.asarray(mask, dtype=np.float32))[None, None].to(dtype)
    with torch.no_grad():
        emb = params.encode_scene(x, m)[0]
    return SceneTokens(emb, params.patch_positions(frame.height, frame.width, dtype), frame.width, frame.height)


def _check_step_instr(params: Denoiser, instruction_id, i, n_steps: int | None):
    ids = np.atleast_1d(np.asarray(instruction_id))
    if np.any(ids < 0) or np.any(ids >= params.cfg.n_instructions):
        raise UnknownInstruction(f"instruction id {instruction_id} outside [0, {params.cfg.n_instructions})")
    steps = np.atleast_1d(np.asarray(i))
    if np.any(steps < 1) or (n_steps is not None and np.any(steps > n_steps)):
        raise StepOutOfRange(f"step {i} outside [1, {n_steps}]")


def predict_noise(params: Denoiser, scene: SceneTokens, instruction_id: int, a_i: AffordanceLatent, i: int,
                  n_steps: int | None = None) -> NoisePair:
    """Noise estimate for one latent (or a batch sharing one scene)."""
    _check_step_instr(params, instruction_id, i, n_steps)
    dtype = scene.embeddings.dtype
    loc = torch.as_tensor(np.asarray(a_i.loc, dtype=float), dtype=dtype).reshape(-1, 2)
    rot = torch.as_tensor(np.asarray(a_i.rot, dtype=float), dtype=dtype).reshape(-1, 6)
    b = len(loc)
    with torch.no_grad():
        el, er = params(scene.embeddings.expand(b, -1, -1), scene.positions, torch.full((b,), int(instruction_id)),
                        loc, rot, torch.full((b,), int(i)), (scene.width, scene.height))
    shape = np.shape(a_i.loc)[:-1]
    return NoisePair(el.numpy().astype(float).reshape(shape + (2,)), er.numpy().astype(float).reshape(shape + (6,)))


class BatchedPredictor:
    """Noise-predictor callback for ``diffusion.sample_latents`` over many scenes at once.

    ``cond`` is ignored; scene ``j`` of the bundle owns latent rows
    ``j * n_per_scene ... (j + 1) * n_per_scene - 1``.
    """

    def __init__(self, params: Denoiser, frames: torch.Tensor, masks: torch.Tensor, instr: Sequence[int],
                 n_per_scene: int, chunk: int = 512):
        self.params = params
        self.n = n_per_scene
        self.size = (frames.shape[-1], frames.shape[-2])
        with torch.no_grad():
            self.scene = torch.cat([params.encode_scene(frames[s:s + chunk], masks[s:s + chunk])
                                    for s in range(0, len(frames), chunk)])
        self.pos = params.patch_positions(frames.shape[-2], frames.shape[-1], self.scene.dtype)
        self.instr = torch.as_tensor(np.repeat(np.asarray(instr, dtype=np.int64), n_per_scene))
        self.chunk = chunk

    def __call__(self, latent: AffordanceLatent, i: int, cond=None) -> NoisePair:
        dtype = self.scene.dtype
        loc = torch.as_tensor(np.asarray(latent.loc), dtype=dtype)
        rot = torch.as_tensor(np.asarray(latent.rot), dtype=dtype)
        outs_l, outs_r = [], []
        with torch.no_grad():
            for s in range(0, len(loc), self.chunk):
                sl = slice(s, s + self.chunk)
                rows = torch.arange(len(loc))[sl] // self.n
                el, er = self.params(self.scene[rows], self.pos, self.instr[sl], loc[sl], rot[sl],
                                     torch.full((len(rows),), i), self.size)
                outs_l.append(el)
                outs_r.append(er)
        return NoisePair(torch.cat(outs_l).numpy().astype(float), torch.cat(outs_r).numpy().astype(float))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True, eq=False)
class TensorSet:
    """Training tensors for a list of records sharing one image size."""

    frames: torch.Tensor  # (N, 4, H, W)
    masks: torch.Tensor  # (N, 1, H, W)
    instr: torch.Tensor  # (N,)
    loc0: np.ndarray  # (N, 2)
    rot0: np.ndarray  # (N, 6)

    def __len__(self):
        return len(self.instr)

    @property
    def size(self):
        return (self.frames.shape[-1], self.frames.shape[-2])


def records_to_tensors(records, max_depth: float = 2.0, dtype=torch.float32, labels: bool = True) -> TensorSet:
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    w, h = records[0].width, records[0].height
    if any((r.width, r.height) != (w, h) for r in records):
        raise DimensionMismatch("records have different image sizes")
    frames = np.stack([frame_tensor(r.frame.rgb, r.frame.depth.values, max_depth) for r in records])
    masks = np.stack([np.asarray(r.mask, dtype=np.float32)[None] for r in records])
    if labels:
        lat = [affordance_to_latent(r.label(), w, h) for r in records]
        loc0 = np.stack([a.loc for a in lat])
        rot0 = np.stack([a.rot for a in lat])
    else:
        loc0, rot0 = np.zeros((len(records), 2)), np.zeros((len(records), 6))
    return TensorSet(torch.from_numpy(frames).to(dtype), torch.from_numpy(masks).to(dtype),
                     torch.as_tensor([r.instruction_id for r in records], dtype=torch.int64), loc0, rot0)


class Trainer:
    """Holds the model and its AdamW state."""

    def __init__(self, params: Denoiser, cfg: TrainConfig | None = None):
        self.params = params
        self.cfg = cfg or params.cfg
        self.opt = torch.optim.AdamW(params.parameters(), lr=self.cfg.lr, betas=(self.cfg.beta1, self.cfg.beta2),
                                     weight_decay=self.cfg.weight_decay)
        self.n_updates = 0


def batch_loss(params: Denoiser, data: TensorSet, idx: np.ndarray, sched_loc: DiffusionSchedule,
               sched_rot: DiffusionSchedule, cfg: TrainConfig, rng: np.random.Generator) -> torch.Tensor:
    """Mean weighted L1 noise loss over the records ``idx`` with fresh steps and noise."""
    b = len(idx)
    if b == 0:
        raise ValueError("empty batch")
    steps = rng.integers(1, sched_loc.n_steps + 1, size=b)
    eps = NoisePair.standard_normal(rng, (b,))
    a0 = AffordanceLatent(data.loc0[idx], data.rot0[idx])
    ai = forward_noise(a0, steps, sched_loc, sched_rot, eps)
    dtype = data.frames.dtype
    scene = params.encode_scene(data.frames[idx], data.masks[idx])
    pos = params.patch_positions(data.frames.shape[-2], data.frames.shape[-1], dtype)
    el, er = params(scene, pos, data.instr[idx], torch.as_tensor(ai.loc, dtype=dtype),
                    torch.as_tensor(ai.rot, dtype=dtype), torch.as_tensor(steps), data.size)
    target = NoisePair(torch.as_tensor(eps.eps_loc, dtype=dtype), torch.as_tensor(eps.eps_rot, dtype=dtype))
    return noise_loss(NoisePair(el, er), target, LossWeights(cfg.w_loc, cfg.w_rot)).mean()


def train_step(trainer: Trainer, data: TensorSet, idx: np.ndarray, sched_loc: DiffusionSchedule,
               sched_rot: DiffusionSchedule, rng: np.random.Generator) -> float:
    """One AdamW update on the records ``idx`` of ``data``; returns the batch loss."""
    if len(idx) == 0:
        raise ValueError("empty batch")
    loss = batch_loss(trainer.params, data, idx, sched_loc, sched_rot, trainer.cfg, rng)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLoss(f"non-finite loss at update {trainer.n_updates}", step=trainer.n_updates,
                            diagnostics={"loss": value, "batch": [int(j) for j in idx]})
    trainer.opt.zero_grad(set_to_none=True)
    loss.backward()
    trainer.opt.step()
    trainer.n_updates += 1
    for name, p in trainer.params.named_parameters():
        if not torch.isfinite(p).all():
            raise NonFiniteLoss(f"parameter {name} became non-finite", step=trainer.n_updates,
                                diagnostics={"parameter": name})
    return value


def train(params: Denoiser, data: TensorSet, sched_loc: DiffusionSchedule, sched_rot: DiffusionSchedule,
          steps: int | None = None, callback=None) -> list[float]:
    """Run ``steps`` updates with shuffled epochs drawn from the config seed; returns the loss curve."""
    trainer = Trainer(params)
    cfg = trainer.cfg
    rng = np.random.default_rng([cfg.seed, 17])
    n = len(data)
    bs = min(cfg.batch_size, n)
    order, cursor = rng.permutation(n), 0
    curve = []
    for step in range(cfg.steps if steps is None else steps):
        if cursor + bs > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        curve.append(train_step(trainer, data, idx, sched_loc, sched_rot, rng))
        if callback is not None:
            callback(step, curve[-1])
    return curve


# ---------------------------------------------------------------------------
# parameter files


def save_params(params: Denoiser, path) -> None:
    """Length-prefixed JSON header, then float32 little-endian tensors in declaration order."""
    state = params.state_dict()
    header = {
        "format": PARAM_FORMAT,
        "version": PARAM_VERSION,
        "config": asdict(params.cfg),
        "tensors": [[name, list(t.shape)] for name, t in state.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for t in state.values():
                fh.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    except OSError as exc:
        raise ParamIoError(f"cannot write {path}: {exc}") from exc


def read_param_header(path) -> dict:
    raw = _read_bytes(path)
    return _parse_header(raw, path)[0]


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ParamIoError(f"cannot read {path}: {exc}") from exc


def _parse_header(raw: bytes, path):
    if len(raw) < 8:
        raise ParamIoError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + n:
        raise ParamIoError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParamIoError(f"{path}: unreadable header") from exc
    if header.get("format") != PARAM_FORMAT:
        raise ParamIoError(f"{path}: not a parameter file")
    if header.get("version") != PARAM_VERSION:
        raise VersionMismatch(f"{path}: format version {header.get('version')} != {PARAM_VERSION}")
    return header, 8 + n


def load_params(path, expect: TrainConfig | None = None) -> Denoiser:
    """Inverse of :func:`save_params`; ``expect`` adds a shape check against a known config."""
    raw = _read_bytes(path)
    header, off = _parse_header(raw, path)
    cfg = TrainConfig.from_dict(header["config"])
    model = Denoiser(cfg)
    state = model.state_dict()
    if expect is not None:
        want = {k: list(v.shape) for k, v in Denoiser(expect).state_dict().items()}
        got = {name: shape for name, shape in header["tensors"]}
        if want != got:
            raise ShapeMismatch(f"{path}: parameter shapes do not match the expected configuration")
    names = [name for name, _ in header["tensors"]]
    if names != list(state.keys()):
        raise ShapeMismatch(f"{path}: tensor list does not match the model layout")
    new = {}
    for name, shape in header["tensors"]:
        if list(state[name].shape) != list(shape):
            raise ShapeMismatch(f"{path}: {name} has shape {shape}, model expects {list(state[name].shape)}")
        count = int(np.prod(shape)) if shape else 1
        end = off + 4 * count
        if end > len(raw):
            raise ParamIoError(f"{path}: truncated body")
        new[name] = torch.from_numpy(np.frombuffer(raw[off:end], dtype="<f4").astype(np.float32).reshape(shape))
        off = end
    if off != len(raw):
        raise ParamIoError(f"{path}: {len(raw) - off} trailing bytes")
    model.load_state_dict(new)
    return model


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
