"""Synthetic planted-rank scenes: coloured discs on a noisy background.

Ranks follow the planted rule: larger area is more salient, ties broken by
higher colour contrast against the background.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..config import parse_key_values
from ..metrics import ImageInstances, RankedInstance
from .losses import GroundTruth


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    image_size: int = 32
    min_objects: int = 2
    max_objects: int = 4
    min_radius: float = 3.0
    max_radius: float = 8.0
    noise: float = 0.05
    min_contrast: float = 0.35
    rank_rule: str = "area_then_contrast"

    def __post_init__(self):
        if self.rank_rule != "area_then_contrast":
            raise ValueError(f"unknown rank_rule {self.rank_rule!r}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "SceneConfig":
        return cls(**parse_key_values(text, cls))


@dataclass
class PlantedObject:
    rank: int
    mask: np.ndarray
    box_px: tuple[float, float, float, float]
    area: int
    contrast: float


@dataclass
class Scene:
    image_id: str
    image: np.ndarray  # (S, S, 3) in [0, 1]
    objects: list[PlantedObject] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.image.shape[0]

    def ground_truth(self) -> list[GroundTruth]:
        s = float(self.size)
        return [GroundTruth(o.rank, np.array(o.box_px) / s, o.mask) for o in self.objects]

    def instances(self) -> ImageInstances:
        insts = [RankedInstance(o.rank, o.mask, 1.0, list(o.box_px)) for o in self.objects]
        return ImageInstances(self.image_id, self.size, self.size, insts)


def generate_scene(cfg: SceneConfig, index: int) -> Scene:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    s = cfg.image_size
    bg = rng.uniform(0.3, 0.7, 3)
    image = bg + rng.normal(0.0, cfg.noise, (s, s, 3))
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    yy, xx = np.mgrid[0:s, 0:s] + 0.5

    placed: list[tuple[float, float, float]] = []
    for _ in range(200 * n):
        if len(placed) == n:
            break
        r = rng.uniform(cfg.min_radius, cfg.max_radius)
        cx, cy = rng.uniform(r, s - r, 2)
        if all(np.hypot(cx - px, cy - py) > r + pr + 1.0 for px, py, pr in placed):
            placed.append((cx, cy, r))

    objects = []
    for cx, cy, r in placed:
        while True:
            color = rng.uniform(0.0, 1.0, 3)
            contrast = float(np.linalg.norm(color - bg))
            if contrast >= cfg.min_contrast:
                break
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        image[mask] = color + rng.normal(0.0, cfg.noise, (int(mask.sum()), 3))
        rows, cols = np.nonzero(mask)
        box = (float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))
        objects.append(PlantedObject(0, mask, box, int(mask.sum()), contrast))
    objects.sort(key=lambda o: (-o.area, -o.contrast))
    for rank, obj in enumerate(objects, 1):
        obj.rank = rank
    return Scene(f"scene_{cfg.seed}_{index:05d}", np.clip(image, 0.0, 1.0), objects)


def generate_scenes(cfg: SceneConfig, count: int, start: int = 0) -> list[Scene]:
    return [generate_scene(cfg, start + i) for i in range(count)]


# ---------------------------------------------------------------------------
# backbone stand-in

BACKBONE_CHANNELS = 7
BOX_SCALES = (3, 5, 9)


def backbone_features(image: np.ndarray, grid: int) -> np.ndarray:
    """Fixed (grid, grid, 7) descriptor map: mean colour and colour contrast at four scales."""
    image = np.asarray(image, dtype=np.float64)
    s = image.shape[0]
    if s % grid:
        raise ValueError(f"image size {s} is not a multiple of grid {grid}")
    f = s // grid
    pooled = image.reshape(grid, f, grid, f, 3).mean(axis=(1, 3))
    ref = np.median(image.reshape(-1, 3), axis=0)
    contrast = np.linalg.norm(pooled - ref, axis=-1)
    channels = [pooled[..., 0], pooled[..., 1], pooled[..., 2], contrast]
    for k in BOX_SCALES:
        channels.append(ndimage.uniform_filter(contrast, size=k, mode="constant"))
    return np.stack(channels, axis=-1)


def write_pgm(path: Path, values: np.ndarray) -> None:
    """8-bit binary PGM of values in [0, 1] scaled by 255 and rounded half-up."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    pixels = np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
