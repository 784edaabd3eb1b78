"""Two-stage training augmentation.

Stage 1 perturbs *when* and *where* frames are sampled from the raw timeline
(global offset, focal plane, per-frame jitter, truncation). Stage 2 applies
one spatial/photometric parameter set to every frame of a sequence so the
transform is temporally coherent.

All draws go through ``rng.random()``, mapped onto each range so that a draw
of 0.5 lands on the range midpoint. A generator that always returns 0.5
therefore yields the unaugmented grid, focal offset 0 and end time 124 hpi.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import cv2
import numpy as np

from .sequences import FrameSequence, frame_grid


@dataclass
class AugmentationConfig:
    sequence_offset_range: float = 0.5
    focal_offsets: tuple[int, ...] = (-1, 0, 1)
    focal_offset_probs: tuple[float, ...] = (0.25, 0.50, 0.25)
    per_frame_jitter: float = 0.375
    truncation_range: tuple[float, float] = (108.0, 140.0)
    cutout_enabled: bool = True
    cutout_side_range: tuple[float, float] = (0.10, 0.30)
    rescale_range: tuple[float, float] = (0.90, 1.10)
    translation_max: float = 0.10
    brightness_range: tuple[float, float] = (0.90, 1.10)
    rotation_max: float = 10.0
    hflip_prob: float = 0.5

    def __post_init__(self):
        self.focal_offsets = tuple(int(v) for v in self.focal_offsets)
        self.focal_offset_probs = tuple(float(v) for v in self.focal_offset_probs)
        self.truncation_range = tuple(self.truncation_range)
        self.cutout_side_range = tuple(self.cutout_side_range)
        self.rescale_range = tuple(self.rescale_range)
        self.brightness_range = tuple(self.brightness_range)
        if len(self.focal_offsets) != len(self.focal_offset_probs):
            raise ValueError("focal_offsets and focal_offset_probs differ in length")
        if abs(sum(self.focal_offset_probs) - 1.0) > 1e-9 or min(self.focal_offset_probs) < 0:
            raise ValueError("focal_offset_probs must be a probability vector")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")
        for name in ("truncation_range", "cutout_side_range", "rescale_range", "brightness_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: low > high")
        if self.sequence_offset_range < 0 or self.per_frame_jitter < 0 or self.translation_max < 0:
            raise ValueError("offset, jitter and translation bounds must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown augmentation fields: {sorted(bad)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        """A configuration whose every draw is the identity transform."""
        return cls(
            sequence_offset_range=0.0, focal_offsets=(0,), focal_offset_probs=(1.0,),
            per_frame_jitter=0.0, truncation_range=(140.0, 140.0), cutout_enabled=False,
            rescale_range=(1.0, 1.0), translation_max=0.0, brightness_range=(1.0, 1.0),
            rotation_max=0.0, hflip_prob=0.0,
        )


def _centered(rng, half_width: float, size=None):
    return half_width * (2.0 * np.asarray(rng.random(size)) - 1.0)


def _between(rng, lo: float, hi: float) -> float:
    return float(lo + (hi - lo) * rng.random())


def stage1_temporal(
    config: AugmentationConfig,
    rng,
    grid: np.ndarray | None = None,
) -> tuple[np.ndarray, int, float]:
    """Draw (targets, focal_offset, end_time) for one training sample.

    ``grid`` defaults to the 128-frame hourly grid starting at 12 hpi.
    """
    grid = frame_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    offset = float(_centered(rng, config.sequence_offset_range))
    cum = np.cumsum(config.focal_offset_probs)
    k = int(np.searchsorted(cum, rng.random(), side="right"))
    focal_offset = config.focal_offsets[min(k, len(cum) - 1)]
    jitter = _centered(rng, config.per_frame_jitter, size=len(grid))
    end_time = _between(rng, *config.truncation_range)
    return grid + offset + jitter, focal_offset, end_time


@dataclass(frozen=True)
class SpatialParams:
    """One draw of stage-2 parameters, shared by every frame of a sequence."""

    scale: float = 1.0
    translate_x: float = 0.0  # fraction of side
    translate_y: float = 0.0
    rotation_deg: float = 0.0
    hflip: bool = False
    brightness: float = 1.0
    cutout: tuple[float, float, float, float] | None = None  # x0, y0, w, h as fractions of side

    @property
    def is_identity(self) -> bool:
        return self == SpatialParams()


def draw_spatial_params(config: AugmentationConfig, rng) -> SpatialParams:
    scale = _between(rng, *config.rescale_range)
    tx = float(_centered(rng, config.translation_max))
    ty = float(_centered(rng, config.translation_max))
    rot = float(_centered(rng, config.rotation_max))
    hflip = bool(rng.random() < config.hflip_prob)
    brightness = _between(rng, *config.brightness_range)
    cutout = None
    if config.cutout_enabled:
        w = _between(rng, *config.cutout_side_range)
        h = _between(rng, *config.cutout_side_range)
        x0 = float(rng.random()) * (1.0 - w)
        y0 = float(rng.random()) * (1.0 - h)
        cutout = (x0, y0, w, h)
    return SpatialParams(scale, tx, ty, rot, hflip, brightness, cutout)


def _affine_matrix(p: SpatialParams, side: int) -> np.ndarray:
    c = (side - 1) / 2.0
    m = cv2.getRotationMatrix2D((c, c), p.rotation_deg, p.scale)
    m[0, 2] += p.translate_x * side
    m[1, 2] += p.translate_y * side
    return m


def apply_spatial(seq: FrameSequence, p: SpatialParams) -> FrameSequence:
    """Apply one parameter set identically to every frame.

    Invalid (zero-padded) frames stay exactly zero: geometric ops map zero to
    zero with zero fill and brightness is only applied to valid frames.
    """
    data = seq.data
    side = data.shape[1]
    if p.hflip:
        data = data[:, :, ::-1]
    out = np.ascontiguousarray(data).copy()
    needs_warp = p.scale != 1.0 or p.translate_x != 0.0 or p.translate_y != 0.0 or p.rotation_deg != 0.0
    if needs_warp:
        m = _affine_matrix(p, side)
        for i in np.flatnonzero(seq.validity_mask):
            out[i] = cv2.warpAffine(
                out[i], m, (side, side), flags=cv2.INTER_LINEAR,
                borderMode=cv2.BORDER_CONSTANT, borderValue=0,
            )
    if p.brightness != 1.0:
        valid = seq.validity_mask
        scaled = np.rint(out[valid].astype(np.float32) * np.float32(p.brightness))
        out[valid] = np.clip(scaled, 0, 255).astype(np.uint8)
    box = cutout_box(p, side)
    if box is not None:
        r0, r1, c0, c1 = box
        out[:, r0:r1, c0:c1] = 0
    out[~seq.validity_mask] = 0
    return FrameSequence(out, seq.validity_mask.copy(), seq.target_times.copy(), seq.embryo_id)


def stage2_spatial(seq: FrameSequence, config: AugmentationConfig, rng) -> FrameSequence:
    return apply_spatial(seq, draw_spatial_params(config, rng))


def cutout_box(p: SpatialParams, side: int) -> tuple[int, int, int, int] | None:
    """Pixel rows/cols (r0, r1, c0, c1) erased by ``p.cutout``."""
    if p.cutout is None:
        return None
    x0, y0, w, h = p.cutout
    c0, r0 = int(math.floor(x0 * side)), int(math.floor(y0 * side))
    return r0, r0 + max(1, int(round(h * side))), c0, c0 + max(1, int(round(w * side)))
