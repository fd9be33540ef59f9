"""Training-time augmentation: horizontal flip, integer shifts, brightness scaling."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np

from datspect.imaging import TripletImage


@dataclass(frozen=True)
class AugmentationConfig:
    width_shift_frac: float = 0.1
    height_shift_frac: float = 0.1
    brightness_range: tuple[float, float] = (0.8, 1.2)
    hflip_prob: float = 0.5

    def __post_init__(self):
        for name in ("width_shift_frac", "height_shift_frac"):
            if not 0.0 <= getattr(self, name) <= 0.5:
                raise ValueError(f"{name} must lie in [0, 0.5]")
        lo, hi = self.brightness_range
        if not 0.0 < lo <= hi:
            raise ValueError("brightness_range needs 0 < lo <= hi")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0)


def hflip(pixels: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pixels[:, ::-1])


def shift(pixels: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate content right by ``dx`` and down by ``dy``; vacated pixels become 0."""
    h, w = pixels.shape[:2]
    out = np.zeros_like(pixels)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = pixels[src_y, src_x]
    return out


def scale_brightness(pixels: np.ndarray, b: float) -> np.ndarray:
    if b == 1.0:
        return pixels.copy()
    scaled = np.floor(pixels.astype(np.float64) * b + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def augment(img, cfg: AugmentationConfig, rng: np.random.Generator):
    """Flip, then shift, then scale brightness, drawing every random number
    each call so the stream advances identically whatever the outcome.

    Accepts a ``TripletImage`` or a bare HxWx3 uint8 array and returns the same kind.
    """
    pixels = img.pixels if isinstance(img, TripletImage) else np.asarray(img)
    h, w = pixels.shape[:2]
    flip = rng.random() < cfg.hflip_prob
    max_dx = math.floor(w * cfg.width_shift_frac)
    max_dy = math.floor(h * cfg.height_shift_frac)
    dx = int(rng.integers(-max_dx, max_dx, endpoint=True))
    dy = int(rng.integers(-max_dy, max_dy, endpoint=True))
    lo, hi = cfg.brightness_range
    b = float(rng.uniform(lo, hi)) if hi > lo else lo

    out = hflip(pixels) if flip else pixels
    if dx or dy:
        out = shift(out, dx, dy)
    out = scale_brightness(out, b)
    if isinstance(img, TripletImage):
        return replace(img, pixels=out)
    return out


def sample_rng(seed: int, subject_id: str, epoch: int) -> np.random.Generator:
    """Per-sample stream keyed by (seed, subject, epoch), independent of worker layout."""
    sid = int.from_bytes(hashlib.sha256(subject_id.encode("utf-8")).digest()[:8], "little")
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, sid, int(epoch)])
    return np.random.Generator(np.random.Philox(seq))
