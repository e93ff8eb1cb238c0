"""Seeded synthetic carcass scenes with exact instance masks.

Each instance is a smooth blob (a rotated ellipse with a low-order wobble on
its radius) painted over a dim noisy background.  Defect instances carry
dark feather speckles on the body and, sometimes, a skin-tear notch cut
from the outline.  Later blobs occlude earlier ones; the annotation masks
record only what stays visible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta
from fractions import Fraction
from pathlib import Path

import numpy as np

from .coco import DEFECT, NORMAL, AnnotationRecord, CocoDataset, ImageRecord
from .rle import bbox_from_mask, rle_encode

# image counts of the carcass train/val/test splits
PAPER_SPLIT = (Fraction(5132, 7321), Fraction(1289, 7321), Fraction(900, 7321))


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    num_images: int = 250
    height: int = 64
    width: int = 64
    channels: int = 1
    min_instances: int = 1
    max_instances: int = 3
    defect_prob: float = 0.5
    radius_range: tuple[float, float] = (7.0, 13.0)
    aspect_range: tuple[float, float] = (0.6, 1.0)
    wobble: float = 0.12
    speckle_count: tuple[int, int] = (4, 7)
    speckle_radius: float = 1.2
    speckle_intensity: float = 0.05
    notch_prob: float = 0.5
    notch_depth: float = 0.45
    overlap_allowance: float = 0.15
    min_visible_area: int = 20
    body_intensity: tuple[float, float] = (0.65, 0.9)
    background: float = 0.15
    noise_std: float = 0.03
    seed: int = 42
    start_date: str = "2023-03-01T08:00:00"

    def __post_init__(self):
        self.radius_range = tuple(self.radius_range)
        self.aspect_range = tuple(self.aspect_range)
        self.speckle_count = tuple(self.speckle_count)
        self.body_intensity = tuple(self.body_intensity)
        for name in ("defect_prob", "notch_prob", "overlap_allowance"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.min_instances < 1 or self.max_instances < self.min_instances:
            raise ConfigError("instance count range must satisfy 1 <= min <= max")
        if self.num_images < 0 or self.height < 1 or self.width < 1 or self.channels < 1:
            raise ConfigError("image count and geometry must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _blob(rng, cfg: SynthConfig, yy, xx):
    r = rng.uniform(*cfg.radius_range)
    aspect = rng.uniform(*cfg.aspect_range)
    theta = rng.uniform(0, np.pi)
    cy = rng.uniform(r * 0.6, cfg.height - r * 0.6)
    cx = rng.uniform(r * 0.6, cfg.width - r * 0.6)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    ang = np.arctan2(v, u)
    wob = 1.0
    for k in (2, 3):
        wob = wob + cfg.wobble / k * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
    dist = np.sqrt(u**2 + (v / aspect) ** 2)
    return dist <= r * wob, (cy, cx, r, aspect, theta)


def _notch(rng, cfg: SynthConfig, mask, geom, yy, xx):
    cy, cx, r, _, _ = geom
    phi = rng.uniform(0, 2 * np.pi)
    # wedge centred on the outline, pointing at the blob centre
    tip_r = r * (1.0 - cfg.notch_depth)
    ty, tx = cy + tip_r * np.sin(phi), cx + tip_r * np.cos(phi)
    ang = np.arctan2(yy - ty, xx - tx) - phi
    ang = (ang + np.pi) % (2 * np.pi) - np.pi
    return mask & ~((np.abs(ang) < 0.45) & (np.hypot(yy - ty, xx - tx) < r))


def _speckles(rng, cfg: SynthConfig, mask, img):
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return
    n = rng.integers(cfg.speckle_count[0], cfg.speckle_count[1] + 1)
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width]
    for _ in range(n):
        j = rng.integers(ys.size)
        dot = (yy - ys[j]) ** 2 + (xx - xs[j]) ** 2 <= cfg.speckle_radius**2
        img[dot & mask] = cfg.speckle_intensity


def render_image(cfg: SynthConfig, index: int):
    """One image and its visible instances: (C×H×W pixels, [(mask, category)])."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(float)
    img = np.full((cfg.height, cfg.width), cfg.background)
    img += 0.05 * (yy / cfg.height)
    n_target = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    occupied = np.zeros((cfg.height, cfg.width), bool)
    instances: list[list] = []  # [visible mask, category]
    for _ in range(n_target):
        for _attempt in range(60):
            mask, geom = _blob(rng, cfg, yy, xx)
            defect = rng.random() < cfg.defect_prob
            if defect and rng.random() < cfg.notch_prob:
                mask = _notch(rng, cfg, mask, geom, yy, xx)
            area = mask.sum()
            if area < cfg.min_visible_area:
                continue
            if (mask & occupied).sum() > cfg.overlap_allowance * area:
                continue
            survivors = [(m & ~mask).sum() for m, _ in instances]
            if any(s < cfg.min_visible_area for s in survivors):
                continue
            break
        else:
            continue
        for inst in instances:
            inst[0] = inst[0] & ~mask
        occupied |= mask
        shade = rng.uniform(*cfg.body_intensity)
        body = shade - 0.08 * ((yy - geom[0]) ** 2 + (xx - geom[1]) ** 2) / geom[2] ** 2
        img[mask] = body[mask]
        if defect:
            _speckles(rng, cfg, mask, img)
        instances.append([mask, DEFECT if defect else NORMAL])
    img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    pixels = np.clip(np.broadcast_to(img, (cfg.channels, cfg.height, cfg.width)), 0.0, 1.0)
    return np.ascontiguousarray(pixels), [(m, c) for m, c in instances]


def generate_synthetic(cfg: SynthConfig) -> tuple[CocoDataset, dict[str, np.ndarray]]:
    ds = CocoDataset()
    store: dict[str, np.ndarray] = {}
    start = datetime.fromisoformat(cfg.start_date)
    ann_id = 1
    for index in range(cfg.num_images):
        image_id = index + 1
        pixels, instances = render_image(cfg, index)
        file_name = f"img_{image_id:06d}.npy"
        store[file_name] = pixels
        ds.images.append(
            ImageRecord(
                id=image_id,
                file_name=file_name,
                width=cfg.width,
                height=cfg.height,
                date_captured=(start + timedelta(seconds=index)).strftime("%Y-%m-%d %H:%M:%S"),
            )
        )
        crowd = int(len(instances) > 1)
        for mask, cat in instances:
            rle = rle_encode(mask)
            ds.annotations.append(
                AnnotationRecord(
                    id=ann_id,
                    image_id=image_id,
                    category_id=cat,
                    iscrowd=crowd,
                    area=rle.area,
                    bbox=tuple(float(v) for v in bbox_from_mask(mask)),
                    segmentation=rle,
                )
            )
            ann_id += 1
    return ds, store


def split_dataset(ds: CocoDataset, ratios=PAPER_SPLIT, seed: int = 0):
    """Partition by image into (train, val, test); annotations follow their image."""
    ratios = [Fraction(r).limit_denominator(10**9) if not isinstance(r, Fraction) else r for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(float(sum(ratios)) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n = len(ds.images)
    n_train = round(ratios[0] * n)
    n_val = min(round(ratios[1] * n), n - n_train)
    ids = [im.id for im in ds.images]
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    parts = (shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :])
    return tuple(ds.subset(p) for p in parts)


# ---------------------------------------------------------------------------
# image pixel store: one .npy per image plus an index file

INDEX_NAME = "index.json"


def save_image_store(store: dict[str, np.ndarray], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for name in sorted(store):
        arr = np.asarray(store[name], dtype="<f8")
        np.save(directory / name, arr, allow_pickle=False)
        index[name] = list(arr.shape)
    (directory / INDEX_NAME).write_text(json.dumps(index, indent=1, sort_keys=True))


def load_image(directory: str | Path, file_name: str) -> np.ndarray:
    return np.load(Path(directory) / file_name, allow_pickle=False).astype(np.float64)


def load_image_store(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    index = json.loads((directory / INDEX_NAME).read_text())
    out = {}
    for name, shape in index.items():
        arr = load_image(directory, name)
        if list(arr.shape) != shape:
            raise ValueError(f"{name}: stored shape {list(arr.shape)} != index {shape}")
        out[name] = arr
    return out
