"""
BUPM — Synthetic training data

Responsibilities:
- Procedural, horizontally seamless street panoramas (sky band, textured buildings, ground)
- Region selection, query augmentation (perspective, scale, shift, gamma)
- Reference-mask targets at feature resolution
- Negative pairs by derangement of references within a batch
"""

from __future__ import annotations

import colorsys
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, field_validator
from tqdm import tqdm

from src.config import AugmentRanges, SynthConfig
from src.data_io import ManifestRecord, assign_splits, save_image, write_manifest
from src.localizer import BoundingBox

logger = logging.getLogger(__name__)

MAX_REGION_ATTEMPTS = 1000
MAX_DERANGEMENT_ATTEMPTS = 64

GOLDEN_RATIO = (math.sqrt(5.0) - 1.0) / 2.0
SCANLINE_AMPLITUDE = 0.05


# Augmentation parameters


class AugmentParams(BaseModel):
    scale: float = 1.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    gamma: float = 1.0
    # (dx, dy) per corner, clockwise from top-left, as fractions of window extents
    corners: Tuple[float, float, float, float, float, float, float, float] = (0.0,) * 8

    @field_validator("scale")
    @classmethod
    def _scale(cls, v):
        if not 0.5 <= v <= 2.0:
            raise ValueError(f"scale must be in [0.5, 2], got {v}")
        return v

    @field_validator("shift_x", "shift_y")
    @classmethod
    def _shift(cls, v):
        if not -0.2 < v < 0.2:
            raise ValueError(f"shift must be in (-0.2, 0.2), got {v}")
        return v

    @field_validator("gamma")
    @classmethod
    def _gamma(cls, v):
        if not 0.5 <= v <= 1.5:
            raise ValueError(f"gamma must be in [0.5, 1.5], got {v}")
        return v

    @field_validator("corners")
    @classmethod
    def _corners(cls, v):
        if any(not -0.1 <= c <= 0.1 for c in v):
            raise ValueError(f"corner displacements must be in [-0.1, 0.1], got {v}")
        return tuple(v)

    def is_identity(self) -> bool:
        return (
            self.scale == 1.0
            and self.shift_x == 0.0
            and self.shift_y == 0.0
            and self.gamma == 1.0
            and not any(self.corners)
        )


def sample_augment_params(rng: np.random.Generator, ranges: AugmentRanges = AugmentRanges()) -> AugmentParams:
    def open_uniform(limit: float) -> float:
        while True:
            v = float(rng.uniform(-limit, limit))
            if -limit < v < limit:
                return v

    # log-uniform over the range
    lo, hi = ranges.scale
    scale = float(np.clip(math.exp(rng.uniform(math.log(lo), math.log(hi))), lo, hi))

    return AugmentParams(
        scale=scale,
        shift_x=open_uniform(ranges.shift),
        shift_y=open_uniform(ranges.shift),
        gamma=float(rng.uniform(*ranges.gamma)),
        corners=tuple(float(c) for c in rng.uniform(-ranges.corner, ranges.corner, size=8)),
    )


# Records


@dataclass
class SynthRecord:
    query: np.ndarray
    panorama_id: int
    box: BoundingBox
    target: np.ndarray  # H' x W' bool at feature resolution
    params: AugmentParams
    seed: int


# Procedural panoramas


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def procedural_scene(
    seed: int,
    extents: Tuple[int, int],
    d: int = 8,
) -> Tuple[np.ndarray, List[BoundingBox]]:
    """
    Panorama plus the pixel boxes of its buildings (the stand-in for a building detector).

    Facades are flat colours with coarse windows in a darker shade of the same
    colour, so a facade reads the same at any zoom. Sky and ground carry a fine
    row texture that does not survive resampling.
    """
    height, width = extents
    if height % d or width % d:
        raise ValueError(f"panorama extents {extents} must be multiples of {d}")

    rng = np.random.default_rng(seed)
    image = np.zeros((height, width, 3), dtype=np.float64)
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    # constant along each row, so it adds nothing across the seam
    scanlines = np.where(rows % 2 == 0, 1.0, -1.0)[:, :, None]

    horizon = int(height * rng.uniform(0.6, 0.75))

    # sky: vertical gradient only
    sky_top = _hsv(rng.uniform(0.0, 1.0), rng.uniform(0.2, 0.7), rng.uniform(0.6, 1.0))
    sky_bottom = _hsv(rng.uniform(0.0, 1.0), rng.uniform(0.1, 0.5), rng.uniform(0.7, 1.0))
    t = (np.arange(horizon) / max(horizon - 1, 1))[:, None, None]
    image[:horizon] = (1.0 - t) * sky_top + t * sky_bottom + SCANLINE_AMPLITUDE * scanlines[:horizon]

    # ground: base colour modulated by an integer-period wave, flat at column 0
    ground = _hsv(rng.uniform(0.0, 1.0), rng.uniform(0.1, 0.6), rng.uniform(0.2, 0.6))
    period = int(rng.integers(4, 16))
    wave = 0.1 * np.cos(2.0 * math.pi * period * cols / width) * np.cos(0.5 * rows)
    image[horizon:] = ground + wave[horizon:, :, None] + SCANLINE_AMPLITUDE * scanlines[horizon:]

    boxes: List[BoundingBox] = []
    n_buildings = int(rng.integers(5, 9))
    first_hue = rng.uniform(0.0, 1.0)
    for k in range(n_buildings):
        b_width = int(rng.integers(max(2, width // 10), max(3, width // 5 + 1)))
        # no building edge on the seam
        x0 = int(rng.integers(1, width))
        while (x0 + b_width) % width == 0:
            x0 = int(rng.integers(1, width))
        top = int(rng.integers(int(horizon * 0.1), int(horizon * 0.5)))
        bottom = min(height, horizon + int(rng.integers(0, max(1, (height - horizon) // 3))))
        b_height = bottom - top

        base = _hsv(first_hue + k * GOLDEN_RATIO, rng.uniform(0.5, 0.95), rng.uniform(0.45, 0.95))
        window = base * rng.uniform(0.4, 0.7)
        sx, sy = int(rng.integers(10, 21)), int(rng.integers(10, 21))
        wx, wy = int(rng.integers(4, sx - 3)), int(rng.integers(4, sy - 3))
        phase = int(rng.integers(0, sx))
        if x0 + b_width > width:
            # columns W-1 and 0 land on window phases 0 and 1 (wx >= 4)
            phase = (x0 + 1 - width) % sx

        local_x = (np.arange(b_width) + phase)[None, :]
        local_y = np.arange(b_height)[:, None]
        is_window = ((local_x % sx) < wx) & ((local_y % sy) < wy) & (local_y > 3)
        facade = np.where(is_window[:, :, None], window, base)
        facade[:3] = base * 0.6

        columns = (x0 + np.arange(b_width)) % width
        image[top:bottom, columns] = facade
        boxes.append(BoundingBox(x0=x0, y0=top, width=b_width, height=b_height, wrap=x0 + b_width > width))

    return np.clip(image, 0.0, 1.0), boxes


def procedural_panorama(seed: int, extents: Tuple[int, int], d: int = 8) -> np.ndarray:
    image, _ = procedural_scene(seed, extents, d=d)
    return image


def random_location(seed: int) -> Tuple[float, float]:
    """Deterministic world coordinate for a synthetic panorama."""
    rng = np.random.default_rng([seed, 7])
    return float(rng.uniform(-60.0, 70.0)), float(rng.uniform(-180.0, 180.0))


# Region selection


def select_region(
    panorama: np.ndarray,
    rng: np.random.Generator,
    candidates: Optional[Sequence[BoundingBox]] = None,
    config: SynthConfig = SynthConfig(),
) -> BoundingBox:
    height, width = panorama.shape[:2]
    if height < config.min_panorama or width < config.min_panorama:
        raise ValueError(
            f"panorama {height}x{width} is smaller than the minimum "
            f"{config.min_panorama}x{config.min_panorama}"
        )

    if candidates:
        return candidates[int(rng.integers(0, len(candidates)))]

    total = height * width
    lo, hi = config.area_range
    for _ in range(MAX_REGION_ATTEMPTS):
        area = rng.uniform(lo, hi) * total
        aspect = rng.uniform(*config.aspect_range)
        w = int(round(math.sqrt(area * aspect)))
        h = int(round(math.sqrt(area / aspect)))
        if not (1 <= w <= width and 1 <= h <= height):
            continue
        if not lo <= (w * h) / total <= hi:
            continue
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        return BoundingBox(x0=x0, y0=y0, width=w, height=h)

    raise ValueError(f"could not place a region on a {height}x{width} panorama")


def crop_region(panorama: np.ndarray, box: BoundingBox) -> np.ndarray:
    width = panorama.shape[1]
    columns = (box.x0 + np.arange(box.width)) % width
    return panorama[box.y0:box.y0 + box.height][:, columns]


# Augmentation


def augment(
    region: np.ndarray,
    params: AugmentParams,
    output_size: Optional[Tuple[int, int]] = None,
) -> np.ndarray:
    """
    Sample a (possibly perspective-distorted, scaled, shifted) window of the
    region with bilinear interpolation, then apply out = in ** gamma.

    The window is the region scaled by `scale` about its shifted centre;
    outside the region, pixels are reflected.
    """
    params = AugmentParams.model_validate(params.model_dump())
    h, w = region.shape[:2]
    out_h, out_w = output_size if output_size is not None else (h, w)

    if params.is_identity() and (out_h, out_w) == (h, w):
        return region.copy()

    cx = (w - 1) / 2.0 + params.shift_x * w
    cy = (h - 1) / 2.0 + params.shift_y * h
    half_w = (w * params.scale - 1.0) / 2.0
    half_h = (h * params.scale - 1.0) / 2.0
    win_w, win_h = w * params.scale, h * params.scale

    base = np.array(
        [[cx - half_w, cy - half_h], [cx + half_w, cy - half_h],
         [cx + half_w, cy + half_h], [cx - half_w, cy + half_h]],
        dtype=np.float64,
    )
    offsets = np.array(params.corners, dtype=np.float64).reshape(4, 2) * [win_w, win_h]
    src = (base + offsets).astype(np.float32)
    dst = np.array(
        [[0, 0], [out_w - 1, 0], [out_w - 1, out_h - 1], [0, out_h - 1]], dtype=np.float32
    )

    homography = cv2.getPerspectiveTransform(src, dst)
    warped = cv2.warpPerspective(
        np.ascontiguousarray(region, dtype=np.float64),
        homography,
        (out_w, out_h),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REFLECT_101,
    )
    if warped.ndim == 2:
        warped = warped[:, :, None]

    return np.clip(warped, 0.0, 1.0) ** params.gamma


# Targets


def box_to_target(
    box: BoundingBox,
    pano_extents: Tuple[int, int],
    d: int,
    coverage: float = 0.5,
) -> np.ndarray:
    """Feature cells whose d x d pixel block lies at least `coverage` inside the box."""
    height, width = pano_extents
    if height % d or width % d:
        raise ValueError(f"panorama extents {pano_extents} must be multiples of {d}")
    rows = box.row_coverage(height).reshape(-1, d).sum(axis=1)
    cols = box.column_coverage(width).reshape(-1, d).sum(axis=1)
    return np.outer(rows, cols) >= coverage * d * d


def make_positive(
    panorama: np.ndarray,
    panorama_id: int,
    seed: int,
    d: int = 8,
    config: SynthConfig = SynthConfig(),
    candidates: Optional[Sequence[BoundingBox]] = None,
) -> SynthRecord:
    """select_region -> augment -> reference-mask target; reproducible from (panorama, seed)."""
    rng = np.random.default_rng(seed)
    box = select_region(panorama, rng, candidates=candidates, config=config)
    params = sample_augment_params(rng, config.augment)
    query = augment(
        crop_region(panorama, box), params, output_size=(config.query_size, config.query_size)
    )
    target = box_to_target(box, panorama.shape[:2], d, coverage=config.coverage)
    return SynthRecord(
        query=query, panorama_id=panorama_id, box=box, target=target, params=params, seed=seed
    )


# Negatives


def make_negatives(
    query_ids: Sequence[int],
    rng: np.random.Generator,
    reference_ids: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """
    Reassign references within a batch so that no query keeps a reference of
    its own location. Returns perm with query k paired to reference perm[k].
    """
    q = np.asarray(query_ids)
    r = q if reference_ids is None else np.asarray(reference_ids)
    n = q.size
    if n < 2:
        raise ValueError(f"need a batch of at least 2 positives for negatives, got {n}")
    if r.size != n:
        raise ValueError("query_ids and reference_ids must have the same length")

    _, counts = np.unique(r, return_counts=True)
    if counts.max() * 2 > n:
        raise ValueError("no derangement exists: one location holds more than half the batch")

    for _ in range(MAX_DERANGEMENT_ATTEMPTS):
        perm = rng.permutation(n)
        if not np.any(r[perm] == q):
            return perm

    # sorted-by-location shift by the largest group always separates locations
    logger.debug("falling back to shifted derangement for a batch of %d", n)
    order = np.argsort(r, kind="stable")
    shift = int(counts.max())
    perm = np.empty(n, dtype=np.int64)
    perm[order] = np.roll(order, -shift)
    if np.any(r[perm] == q):
        raise ValueError("could not build a derangement for this batch")
    return perm


# Provenance columns

BOX_COLUMNS = ("box_x0", "box_y0", "box_w", "box_h", "box_wrap")
CORNER_COLUMNS = tuple(f"corner_{i}" for i in range(8))


def synth_extras(record: SynthRecord) -> Dict[str, object]:
    extras: Dict[str, object] = {
        "panorama_id": record.panorama_id,
        "box_x0": record.box.x0,
        "box_y0": record.box.y0,
        "box_w": record.box.width,
        "box_h": record.box.height,
        "box_wrap": record.box.wrap,
        "scale": record.params.scale,
        "shift_x": record.params.shift_x,
        "shift_y": record.params.shift_y,
        "gamma": record.params.gamma,
        "seed": record.seed,
    }
    extras.update(zip(CORNER_COLUMNS, record.params.corners))
    return extras


def box_from_extras(extras: Dict[str, object]) -> Optional[BoundingBox]:
    """Source box recorded by a synthetic manifest, or None for real data."""
    values = [extras.get(c) for c in BOX_COLUMNS[:4]]
    if any(v is None for v in values):
        return None
    x0, y0, w, h = (int(float(v)) for v in values)
    wrap = extras.get("box_wrap")
    if isinstance(wrap, str):
        wrap = wrap.strip().lower() == "true"
    return BoundingBox(x0=x0, y0=y0, width=w, height=h, wrap=bool(wrap))


# Dataset writer


def _child_seeds(seed: int, purpose: int, n: int) -> List[int]:
    rng = np.random.default_rng([seed, purpose])
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def write_synthetic_dataset(
    out_dir: Union[str, Path],
    n_panoramas: int,
    n_samples: int,
    seed: int,
    config: SynthConfig = SynthConfig(),
    d: int = 8,
    n_jobs: int = 1,
    progress: bool = False,
) -> Path:
    """
    Write panoramas/, queries/ and manifest.csv under out_dir.

    Positives are split per sample; val and test splits also get one fixed
    derangement negative per positive. Returns the manifest path.
    """
    if n_panoramas < 1:
        raise ValueError(f"need at least one panorama, got {n_panoramas}")
    if n_samples < 0:
        raise ValueError(f"sample count must be >= 0, got {n_samples}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    pano_seeds = _child_seeds(seed, 0, n_panoramas)
    scenes = Parallel(n_jobs=n_jobs, backend="threading")(
        delayed(procedural_scene)(s, config.panorama_size, d) for s in pano_seeds
    )
    locations = [random_location(s) for s in pano_seeds]
    pano_paths = [f"panoramas/pano_{i:04d}.png" for i in range(n_panoramas)]
    for (image, _), rel in zip(tqdm(scenes, desc="panoramas", disable=not progress), pano_paths):
        save_image(image, out_dir / rel)

    rng = np.random.default_rng([seed, 1])
    pano_ids = rng.integers(0, n_panoramas, size=n_samples)
    sample_seeds = _child_seeds(seed, 2, n_samples)

    def _one(k: int) -> SynthRecord:
        image, boxes = scenes[int(pano_ids[k])]
        candidates = boxes if config.region_source == "buildings" else None
        return make_positive(image, int(pano_ids[k]), sample_seeds[k], d=d, config=config, candidates=candidates)

    samples = Parallel(n_jobs=n_jobs, backend="threading")(delayed(_one)(k) for k in range(n_samples))

    positives: List[ManifestRecord] = []
    for k, sample in enumerate(tqdm(samples, desc="queries", disable=not progress)):
        rel = f"queries/q_{k:05d}.png"
        save_image(sample.query, out_dir / rel)
        lat, lon = locations[sample.panorama_id]
        positives.append(
            ManifestRecord(
                query_path=rel,
                ref_path=pano_paths[sample.panorama_id],
                lat=lat,
                lon=lon,
                label=1,
                split="train",
                **synth_extras(sample),
            )
        )

    positives = assign_splits(positives, np.random.default_rng([seed, 3]), config.val_fraction, config.test_fraction)

    negatives: List[ManifestRecord] = []
    for offset, split in enumerate(("val", "test")):
        members = [p for p in positives if p.split == split]
        if not members:
            continue
        ids = [int(p.extras["panorama_id"]) for p in members]
        try:
            perm = make_negatives(ids, np.random.default_rng([seed, 4, offset]))
        except ValueError as exc:
            logger.warning("No fixed %s negatives: %s", split, exc)
            continue
        for q, j in zip(members, perm):
            r = members[int(j)]
            negatives.append(
                ManifestRecord(
                    query_path=q.query_path,
                    ref_path=r.ref_path,
                    lat=r.lat,
                    lon=r.lon,
                    label=0,
                    split=split,
                    panorama_id=r.extras["panorama_id"],
                )
            )

    manifest = out_dir / "manifest.csv"
    write_manifest(positives + negatives, manifest)
    logger.info(
        "Wrote %d panoramas, %d positives, %d negatives to %s",
        n_panoramas, len(positives), len(negatives), out_dir,
    )
    return manifest
