"""
BUPM — Data I/O layer

Responsibilities:
- Image codecs (PPM/PGM for lossless fixtures, PNG for real data) via OpenCV
- Manifest contract: CSV with header, one (query, reference, GPS, label, split) per line
- GPS distance and distance-filtered negative pairing
- Bilinear resize to backbone-divisible extents

The manifest contract is frozen in docs/MANIFEST_CONTRACT.md.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
ONE_MILE_KM = 1.609

MANIFEST_COLUMNS = ["query_path", "ref_path", "lat", "lon", "label", "split"]
SPLITS = ("train", "val", "test")


class ImageDecodeError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# Images


def load_image(path: Union[str, Path]) -> np.ndarray:
    """Decode an image to H x W x C float64 in [0, 1], RGB channel order (C in {1, 3})."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image not found: {path}")

    try:
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    except cv2.error as exc:
        raise ImageDecodeError(f"Cannot decode image {path}: {exc}") from exc

    if raw is None or raw.size == 0:
        raise ImageDecodeError(f"Cannot decode image {path}")

    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageDecodeError(f"Unsupported pixel type {raw.dtype} in {path}")

    if raw.ndim == 2:
        raw = raw[:, :, None]
    elif raw.shape[2] == 4:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGB)
    elif raw.shape[2] == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    else:
        raise ImageDecodeError(f"Unsupported channel count {raw.shape[2]} in {path}")

    return np.clip(raw.astype(np.float64) / scale, 0.0, 1.0)


def to_bytes(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8, scaled by 255 and rounded half-up."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(image: np.ndarray, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    if image.ndim == 2:
        image = image[:, :, None]
    data = to_bytes(image)
    if data.shape[2] == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
    elif data.shape[2] == 1:
        data = data[:, :, 0]
    else:
        raise ValueError(f"save_image expects 1 or 3 channels, got {data.shape[2]}")

    if not cv2.imwrite(str(path), data):
        raise OSError(f"Failed to write image: {path}")


def save_mask(mask: np.ndarray, path: Union[str, Path]) -> None:
    """Write a soft mask as an 8-bit graymap (1.0 -> 255)."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3:
        mask = mask[:, :, 0]
    save_image(mask, path)


def resize(
    image: np.ndarray,
    size: Union[int, Tuple[int, int]],
    multiple_of: Optional[int] = None,
) -> np.ndarray:
    """
    Bilinear resize to a square `size` or an (height, width) pair.

    `multiple_of` enforces backbone divisibility of the target.
    """
    if isinstance(size, int):
        target_h, target_w = size, size
    else:
        target_h, target_w = size

    if target_h < 1 or target_w < 1:
        raise ValueError(f"resize target must be positive, got {target_h}x{target_w}")
    if multiple_of is not None and (target_h % multiple_of or target_w % multiple_of):
        raise ValueError(f"resize target {target_h}x{target_w} must be a multiple of {multiple_of}")

    if image.shape[0] == target_h and image.shape[1] == target_w:
        return image.copy()

    out = cv2.resize(
        np.ascontiguousarray(image, dtype=np.float64),
        (target_w, target_h),
        interpolation=cv2.INTER_LINEAR,
    )
    if out.ndim == 2:
        out = out[:, :, None]
    return out


def nearest_divisible(extent: int, d: int) -> int:
    return max(d, int(round(extent / d)) * d)


def fit_to_multiple(image: np.ndarray, d: int) -> Tuple[np.ndarray, bool]:
    """Resize to the nearest extents divisible by d. Returns (image, resized?)."""
    h, w = image.shape[:2]
    target = (nearest_divisible(h, d), nearest_divisible(w, d))
    if target == (h, w):
        return image, False
    return resize(image, target, multiple_of=d), True


def as_rgb(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[2] == 1:
        return np.repeat(image, 3, axis=2)
    if image.shape[2] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {image.shape[2]}")
    return image


def load_images(paths: Sequence[Union[str, Path]], n_jobs: int = 1) -> List[np.ndarray]:
    """Decode many images, threads bounded by n_jobs; output keeps input order."""
    if n_jobs <= 1:
        return [load_image(p) for p in paths]
    return Parallel(n_jobs=n_jobs, backend="threading")(delayed(load_image)(p) for p in paths)


# GPS


def _check_coordinate(lat: float, lon: float) -> None:
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"latitude must be in [-90, 90], got {lat}")
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"longitude must be in [-180, 180], got {lon}")


def gps_distance(a: Tuple[float, float], b: Tuple[float, float]) -> float:
    """Haversine great-circle distance in kilometers between (lat, lon) pairs."""
    _check_coordinate(*a)
    _check_coordinate(*b)

    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = (
        math.sin((lat2 - lat1) / 2.0) ** 2
        + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2
    )
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def _distance_matrix(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    lat = np.radians(lat)
    lon = np.radians(lon)
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))


# Manifest


class ManifestRecord(BaseModel):
    """One manifest line. Extra provenance columns (synthetic datasets) are kept as-is."""

    model_config = ConfigDict(extra="allow")

    query_path: str
    ref_path: str
    lat: float = Field(ge=-90.0, le=90.0)
    lon: float = Field(ge=-180.0, le=180.0)
    label: int = Field(ge=0, le=1)
    split: Literal["train", "val", "test"]

    @property
    def extras(self) -> Dict[str, object]:
        return dict(self.model_extra or {})

    def resolve(self, base_dir: Path) -> Tuple[Path, Path]:
        return _resolve_under(base_dir, self.query_path), _resolve_under(base_dir, self.ref_path)


def _resolve_under(base_dir: Path, rel: str) -> Path:
    base = Path(base_dir).resolve()
    full = (base / rel).resolve()
    if full != base and base not in full.parents:
        raise ManifestError(f"Path {rel!r} escapes the manifest directory {base}")
    return full


class VerifyRecord(BaseModel):
    query_path: str
    ref_path: str
    score: float
    label: int


def read_manifest(path: Union[str, Path]) -> List[ManifestRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")

    try:
        df = pd.read_csv(path, dtype={"query_path": str, "ref_path": str, "split": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ManifestError(f"Cannot parse manifest {path}: {exc}") from exc

    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise ManifestError(f"Manifest {path} is missing columns: {missing}")

    df = df.astype(object).where(df.notna(), None)

    records = []
    for i, row in enumerate(df.to_dict(orient="records")):
        try:
            records.append(ManifestRecord.model_validate(row))
        except ValueError as exc:
            raise ManifestError(f"Invalid manifest line {i + 2} in {path}: {exc}") from exc

    base = path.parent
    for rec in records:
        rec.resolve(base)

    return records


def write_manifest(records: Sequence[ManifestRecord], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    extra_cols: List[str] = []
    for rec in records:
        for key in rec.extras:
            if key not in extra_cols:
                extra_cols.append(key)

    rows = [rec.model_dump() for rec in records]
    df = pd.DataFrame(rows, columns=MANIFEST_COLUMNS + extra_cols)
    df.to_csv(path, index=False)


def write_jsonl(rows: Iterable[BaseModel], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row.model_dump(mode="json"), sort_keys=True) + "\n")


# Negative pairing


def build_negative_manifest(
    positives: Sequence[ManifestRecord],
    rng: np.random.Generator,
    min_km: float = ONE_MILE_KM,
    max_attempts: int = 100,
) -> List[ManifestRecord]:
    """
    Pair every positive query with another positive's reference at least
    `min_km` away. The claimed location of a negative is its reference's GPS.
    """
    n = len(positives)
    if n < 2:
        raise ValueError(f"Need at least 2 positives to build negatives, got {n}")

    lat = np.array([p.lat for p in positives], dtype=np.float64)
    lon = np.array([p.lon for p in positives], dtype=np.float64)
    allowed = _distance_matrix(lat, lon) >= min_km

    starved = np.flatnonzero(~allowed.any(axis=1))
    if starved.size:
        raise ValueError(
            f"Impossible negative pairing: {starved.size} queries have no reference "
            f">= {min_km} km away"
        )

    for _ in range(max_attempts):
        perm = rng.permutation(n)
        for i in rng.permutation(n):
            if allowed[i, perm[i]]:
                continue
            # swap with a partner that keeps both pairs valid
            for j in rng.permutation(n):
                if allowed[i, perm[j]] and allowed[j, perm[i]]:
                    perm[i], perm[j] = perm[j], perm[i]
                    break
        if allowed[np.arange(n), perm].all():
            break
    else:
        raise ValueError(f"Could not find a valid negative pairing after {max_attempts} attempts")

    negatives = []
    for i, j in enumerate(perm):
        q, r = positives[i], positives[j]
        negatives.append(
            ManifestRecord(
                query_path=q.query_path,
                ref_path=r.ref_path,
                lat=r.lat,
                lon=r.lon,
                label=0,
                split=q.split,
            )
        )
    return negatives


def assign_splits(
    records: Sequence[ManifestRecord],
    rng: np.random.Generator,
    val_fraction: float,
    test_fraction: float,
) -> List[ManifestRecord]:
    """Seeded split assignment; rounding leftovers go to train."""
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1.0:
        raise ValueError(f"Invalid split fractions val={val_fraction} test={test_fraction}")

    n = len(records)
    n_test = int(math.floor(n * test_fraction))
    n_val = int(math.floor(n * val_fraction))
    order = rng.permutation(n)

    splits = np.full(n, "train", dtype=object)
    splits[order[:n_test]] = "test"
    splits[order[n_test:n_test + n_val]] = "val"

    return [rec.model_copy(update={"split": str(s)}) for rec, s in zip(records, splits)]


def read_pair_index(path: Union[str, Path]) -> List[ManifestRecord]:
    """Local-directory ingestion: index CSV of co-located (query, ref, lat, lon) pairs."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Pair index not found: {path}")

    df = pd.read_csv(path, dtype={"query_path": str, "ref_path": str})
    required = ["query_path", "ref_path", "lat", "lon"]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise ManifestError(f"Pair index {path} is missing columns: {missing}")

    records = []
    for i, row in enumerate(df[required].to_dict(orient="records")):
        try:
            records.append(ManifestRecord(**row, label=1, split="train"))
        except ValueError as exc:
            raise ManifestError(f"Invalid pair index line {i + 2} in {path}: {exc}") from exc
    return records


def _relative_to(path: Path, out_dir: Path) -> str:
    full = path.resolve()
    if not full.exists():
        raise FileNotFoundError(f"Indexed image not found: {full}")
    if out_dir not in full.parents:
        raise ManifestError(f"Indexed image {full} is not under the manifest directory {out_dir}")
    return full.relative_to(out_dir).as_posix()


def ingest_pairs(
    index_path: Union[str, Path],
    out_path: Union[str, Path],
    rng: np.random.Generator,
    val_fraction: float,
    test_fraction: float,
    min_km: float = ONE_MILE_KM,
) -> List[ManifestRecord]:
    """
    Turn a pair index into manifest records for a manifest written at `out_path`.

    Paths are re-rooted from the index directory to the manifest directory.
    Val and test splits also get distance-filtered negatives; train relies on
    in-batch negatives.
    """
    index_path = Path(index_path)
    index_dir = index_path.parent.resolve()
    out_dir = Path(out_path).parent.resolve()

    positives = [
        rec.model_copy(update={
            "query_path": _relative_to(index_dir / rec.query_path, out_dir),
            "ref_path": _relative_to(index_dir / rec.ref_path, out_dir),
        })
        for rec in read_pair_index(index_path)
    ]
    positives = assign_splits(positives, rng, val_fraction, test_fraction)

    records = list(positives)
    for split in ("val", "test"):
        group = [p for p in positives if p.split == split]
        if not group:
            continue
        try:
            records.extend(build_negative_manifest(group, rng, min_km=min_km))
        except ValueError as exc:
            logger.warning("No %s negatives: %s", split, exc)

    logger.info("Ingested %d pairs from %s (%d records)", len(positives), index_path, len(records))
    return records
