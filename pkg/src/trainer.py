"""
BUPM — Two-phase training

Responsibilities:
- Losses: mean BCE on the reference mask (phase 1) and on the score (phase 2)
- Phase 1: backbone + mask detector on synthetic M_R targets, SGD
- Phase 2a: verifier only, Adam; phase 2b: everything, Adam at a low rate
- Class-balanced phase-2 batches with per-batch derangement negatives
- Batches built from runs of samples sharing a panorama, each distinct image
  run through the backbone once per batch
- Early stopping, JSONL epoch log, per-epoch checkpoints, resume

This file DOES NOT:
- Generate synthetic data (see synth_gen)
- Encode checkpoints (see model_io)
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Hashable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel
from tqdm import tqdm

from src.bupm_matcher import global_max_pool, pairwise_cosine, set_threshold_response
from src.config import PhaseConfig, SynthConfig, TrainConfig
from src.data_io import ManifestError, ManifestRecord, as_rgb, load_images, resize
from src.model_io import Checkpoint, apply_checkpoint, checkpoint_from_model, save_checkpoint
from src.models import BUPMNetwork, set_trainable, trainable_parameters
from src.synth_gen import box_from_extras, box_to_target, make_negatives
from src.tensor_core import backward, build_optimizer, from_images, optimizer_step
from src.verify_head import build_feature, decide

logger = logging.getLogger(__name__)

PHASES = ("phase1", "phase2a", "phase2b")
PHASE_COMPONENTS = {
    "phase1": ("backbone", "mask_detector"),
    "phase2a": ("verifier",),
    "phase2b": ("backbone", "mask_detector", "verifier"),
}

MAX_CALIBRATION_GAIN = 100.0


class TrainingDivergedError(RuntimeError):
    def __init__(self, phase: str, epoch: int, step: int, value: float):
        self.phase = phase
        self.epoch = epoch
        self.step = step
        self.value = value
        super().__init__(f"loss diverged to {value} in {phase}, epoch {epoch}, step {step}")


# Samples


class MaskSample(NamedTuple):
    query: np.ndarray
    reference: np.ndarray
    target: np.ndarray  # H' x W' bool
    location: int


class PairSample(NamedTuple):
    query: np.ndarray
    reference: np.ndarray
    location: int
    label: int = 1


class Batch(NamedTuple):
    """
    Distinct queries and references of a batch plus, per pair, the row of each
    it uses. `targets` holds H' x W' masks (phase 1) or labels (phase 2).
    """

    queries: torch.Tensor
    references: torch.Tensor
    query_index: torch.Tensor
    reference_index: torch.Tensor
    targets: torch.Tensor
    query_keys: Tuple[int, ...]
    reference_keys: Tuple[int, ...]
    size: int

    @property
    def n_pairs(self) -> int:
        return int(self.query_index.shape[0])


# Losses


def _bce(pred: torch.Tensor, target: torch.Tensor, eps: float) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    clamped = pred.clamp(eps, 1.0 - eps)
    return F.binary_cross_entropy(clamped, target.to(clamped.dtype), reduction="mean")


def loss_mask(m_r: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean cell-wise BCE with predictions clamped to [eps, 1 - eps]."""
    return _bce(m_r, target, eps)


def loss_verify(score: torch.Tensor, label: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    score = torch.as_tensor(score, dtype=torch.float64)
    label = torch.as_tensor(label, dtype=torch.float64)
    if torch.any((label != 0) & (label != 1)):
        raise ValueError("labels must be 0 or 1")
    return _bce(score, label, eps)


def prior_loss(targets: Sequence[np.ndarray]) -> float:
    """BCE of always predicting the mean target rate: the bar a useful mask must beat."""
    rate = float(np.mean([np.mean(t) for t in targets]))
    if rate <= 0.0 or rate >= 1.0:
        return 0.0
    return -(rate * math.log(rate) + (1.0 - rate) * math.log(1.0 - rate))


# Epoch log


class EpochLog(BaseModel):
    phase: str
    epoch: int
    train_loss: float
    val_loss: Optional[float]
    lr: float


def _append_log(path: Optional[Path], row: EpochLog) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(row.model_dump(), sort_keys=True) + "\n")


# Early stopping


@dataclass
class EarlyStopping:
    patience: int
    min_delta: float
    best: Optional[float] = None
    stale: int = 0
    stopped: bool = False

    def update(self, value: float) -> bool:
        if self.best is None or value < self.best - self.min_delta:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        self.stopped = self.stale >= self.patience
        return self.stopped

    def state(self) -> Dict[str, object]:
        return {"best": self.best, "stale": self.stale, "stopped": self.stopped}

    def restore(self, state: Dict[str, object]) -> None:
        self.best = state.get("best")
        self.stale = int(state.get("stale", 0))
        self.stopped = bool(state.get("stopped", False))


# Batching


def _epoch_rng(seed: int, phase: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, PHASES.index(phase), epoch])


def _check_query_sizes(config: TrainConfig, d: int) -> None:
    for size in tuple(config.query_sizes) + (config.val_query_size,):
        if size % d:
            raise ValueError(f"query size {size} is not a multiple of the backbone factor {d}")


def _queries(images: Sequence[np.ndarray], size: int) -> torch.Tensor:
    return from_images([resize(img, size) for img in images])


def _distinct(keys: Sequence[int]) -> Tuple[List[int], torch.Tensor]:
    """Distinct keys in first-seen order, and the position of every key among them."""
    unique = list(dict.fromkeys(keys))
    slot = {k: i for i, k in enumerate(unique)}
    return unique, torch.tensor([slot[k] for k in keys], dtype=torch.long)


def _grouped_order(locations: Sequence[int], group: int, rng: np.random.Generator) -> np.ndarray:
    """
    A sample order made of runs of up to `group` samples from one location.
    Runs are shuffled, then neighbouring runs are moved apart when they share
    a location.
    """
    locations = np.asarray(locations)
    if locations.size == 0:
        return np.zeros(0, dtype=np.int64)

    runs: List[np.ndarray] = []
    for loc in np.unique(locations):
        members = rng.permutation(np.flatnonzero(locations == loc))
        runs.extend(members[i:i + group] for i in range(0, len(members), group))
    runs = [runs[i] for i in rng.permutation(len(runs))]

    for i in range(1, len(runs)):
        previous = locations[runs[i - 1][0]]
        if locations[runs[i][0]] != previous:
            continue
        for j in range(i + 1, len(runs)):
            if locations[runs[j][0]] != previous:
                runs[i], runs[j] = runs[j], runs[i]
                break
    return np.concatenate(runs)


def _mask_batches(
    samples: Sequence[MaskSample],
    batch_size: int,
    rng: np.random.Generator,
    sizes: Sequence[int],
    per_reference: int = 1,
) -> Iterator[Batch]:
    order = _grouped_order([s.location for s in samples], per_reference, rng)
    for start in range(0, len(order), batch_size):
        ids = [int(i) for i in order[start:start + batch_size]]
        chunk = [samples[i] for i in ids]
        size = int(rng.choice(sizes))
        locations, reference_index = _distinct([s.location for s in chunk])
        images = {s.location: s.reference for s in chunk}
        yield Batch(
            queries=_queries([s.query for s in chunk], size),
            references=from_images([images[loc] for loc in locations]),
            query_index=torch.arange(len(chunk)),
            reference_index=reference_index,
            targets=torch.from_numpy(np.stack([s.target for s in chunk]).astype(np.float64)),
            query_keys=tuple(ids),
            reference_keys=tuple(locations),
            size=size,
        )


def _pair_batches(
    positives: Sequence[PairSample],
    batch_size: int,
    rng: np.random.Generator,
    sizes: Sequence[int],
    per_reference: int = 1,
) -> Iterator[Batch]:
    """k positives + their k derangement negatives per batch, k = batch_size // 2."""
    k = batch_size // 2
    # a run longer than half a batch leaves no derangement
    order = _grouped_order([s.location for s in positives], max(1, min(per_reference, k // 2)), rng)
    for start in range(0, len(order), k):
        ids = [int(i) for i in order[start:start + k]]
        chunk = [positives[i] for i in ids]
        if len(chunk) < 2:
            logger.debug("dropping a trailing batch of %d positive(s)", len(chunk))
            continue
        try:
            perm = make_negatives([s.location for s in chunk], rng)
        except ValueError as exc:
            logger.debug("dropping a batch without a derangement: %s", exc)
            continue
        size = int(rng.choice(sizes))
        locations, reference_index = _distinct(
            [s.location for s in chunk] + [chunk[int(j)].location for j in perm]
        )
        images = {s.location: s.reference for s in chunk}
        yield Batch(
            queries=_queries([s.query for s in chunk], size),
            references=from_images([images[loc] for loc in locations]),
            query_index=torch.arange(len(chunk)).repeat(2),
            reference_index=reference_index,
            targets=torch.cat([torch.ones(len(chunk)), torch.zeros(len(chunk))]).to(torch.float64),
            query_keys=tuple(ids),
            reference_keys=tuple(locations),
            size=size,
        )


def _labelled_batches(pairs: Sequence[PairSample], batch_size: int, size: int) -> Iterator[Batch]:
    """Held-out pairs in file order; the labels are the pairs' own."""
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        locations, reference_index = _distinct([s.location for s in chunk])
        images = {s.location: s.reference for s in chunk}
        yield Batch(
            queries=_queries([s.query for s in chunk], size),
            references=from_images([images[loc] for loc in locations]),
            query_index=torch.arange(len(chunk)),
            reference_index=reference_index,
            targets=torch.tensor([float(s.label) for s in chunk], dtype=torch.float64),
            query_keys=tuple(range(start, start + len(chunk))),
            reference_keys=tuple(locations),
            size=size,
        )


def fixed_negatives(positives: Sequence[PairSample], seed: int) -> List[PairSample]:
    """One derangement negative per positive, drawn once for a held-out split."""
    if len(positives) < 2:
        return []
    perm = make_negatives([p.location for p in positives], np.random.default_rng([seed, 99]))
    return [
        PairSample(query=p.query, reference=positives[int(j)].reference, location=positives[int(j)].location, label=0)
        for p, j in zip(positives, perm)
    ]


# Frozen features


class FeatureCache:
    """Backbone features while the backbone is frozen, computed once per key."""

    def __init__(self, model: BUPMNetwork):
        self.model = model
        self._store: Dict[Hashable, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self._store)

    def lookup(self, images: torch.Tensor, keys: Sequence[Hashable], reference: bool) -> torch.Tensor:
        missing = [i for i, key in enumerate(keys) if key not in self._store]
        if missing:
            with torch.no_grad():
                computed = self.model.features(images[missing], reference=reference)
            for i, features in zip(missing, computed):
                self._store[keys[i]] = features
        return torch.stack([self._store[key] for key in keys])


# Phase runner


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def _run_phase(
    model: BUPMNetwork,
    phase: str,
    phase_config: PhaseConfig,
    seed: int,
    batches: Callable[[np.random.Generator], Iterator[Batch]],
    batch_loss: Callable[[Batch], torch.Tensor],
    val_loss: Callable[[], Optional[float]],
    ckpt_path: Optional[Path],
    log_path: Optional[Path],
    resume: Optional[Checkpoint],
    progress: bool,
) -> Checkpoint:
    set_trainable(model, PHASE_COMPONENTS[phase])

    optimizer = None
    if phase_config.lr > 0:
        optimizer = build_optimizer(trainable_parameters(model), phase_config.optimizer, phase_config.lr)
    else:
        logger.warning("%s: learning rate is 0, weights will not be updated", phase)

    stopper = EarlyStopping(phase_config.patience, phase_config.min_delta)
    start_epoch = 1
    checkpoint = checkpoint_from_model(model, phase, 0, optimizer=optimizer, state={"early_stopping": stopper.state()})

    if resume is not None and resume.phase == phase:
        apply_checkpoint(resume, model, optimizer)
        stopper.restore(resume.state.get("early_stopping", {}))
        start_epoch = resume.epoch + 1
        checkpoint = resume
        logger.info("Resuming %s at epoch %d", phase, start_epoch)

    if stopper.stopped:
        logger.info("%s already converged at epoch %d", phase, resume.epoch)
        return checkpoint

    for epoch in range(start_epoch, phase_config.epochs + 1):
        rng = _epoch_rng(seed, phase, epoch)
        model.train()

        losses: List[float] = []
        steps = tqdm(batches(rng), desc=f"{phase} epoch {epoch}", disable=not progress, leave=False)
        for step, batch in enumerate(steps, start=1):
            loss = batch_loss(batch)
            value = float(loss.item())
            if not math.isfinite(value):
                raise TrainingDivergedError(phase, epoch, step, value)
            if optimizer is not None:
                backward(loss)
                optimizer_step(optimizer)
            losses.append(value)

        if not losses:
            raise ValueError(f"{phase}: no usable training batches")

        model.eval()
        with torch.no_grad():
            v_loss = val_loss()
        if v_loss is not None and not math.isfinite(v_loss):
            raise TrainingDivergedError(phase, epoch, len(losses), v_loss)

        row = EpochLog(phase=phase, epoch=epoch, train_loss=_mean(losses), val_loss=v_loss, lr=phase_config.lr)
        _append_log(log_path, row)
        logger.info(
            "%s epoch %d: train_loss=%.6f val_loss=%s", phase, epoch, row.train_loss,
            "n/a" if v_loss is None else f"{v_loss:.6f}",
        )

        converged = stopper.update(v_loss if v_loss is not None else row.train_loss)
        checkpoint = checkpoint_from_model(
            model,
            phase,
            epoch,
            metrics={"train_loss": row.train_loss, "val_loss": v_loss},
            optimizer=optimizer,
            state={"early_stopping": stopper.state()},
        )
        if ckpt_path is not None:
            save_checkpoint(checkpoint, ckpt_path)

        if converged:
            logger.info("%s converged after epoch %d", phase, epoch)
            break

    return checkpoint


# Phase 1


def calibrate_mask_detector(model: BUPMNetwork, samples: Sequence[MaskSample], config: TrainConfig) -> Tuple[float, float]:
    """
    Reset the mask detector to sigmoid(gain * (B_R - threshold)), with the
    threshold at the best-score quantile that marks as many reference cells as
    the targets do, and M_R = 0.9 at a quarter of that rate.

    Uses one fixed batch at the validation query size. Returns (gain, threshold).
    """
    batch = next(
        _mask_batches(
            samples, config.phase1.batch_size, np.random.default_rng([config.seed, 0]),
            [config.val_query_size], config.samples_per_reference,
        )
    )
    with torch.no_grad():
        f_q = model.features(batch.queries, reference=False)[batch.query_index]
        f_r = model.features(batch.references, reference=True)[batch.reference_index]
        best = global_max_pool(pairwise_cosine(f_r, f_q)).b_r.numpy().ravel()

    rate = float(np.clip(batch.targets.mean().item(), 1e-3, 0.5))
    threshold = float(np.quantile(best, 1.0 - rate))
    upper = float(np.quantile(best, 1.0 - rate / 4.0))
    gain = float(np.clip(math.log(9.0) / max(upper - threshold, 1e-6), 1.0, MAX_CALIBRATION_GAIN))

    set_threshold_response(model.mask_detector, gain, threshold)
    logger.info("Mask detector calibrated: target rate=%.4f threshold=%.4f gain=%.2f", rate, threshold, gain)
    return gain, threshold


def train_phase1(
    model: BUPMNetwork,
    train: Sequence[MaskSample],
    config: TrainConfig,
    val: Sequence[MaskSample] = (),
    ckpt_path: Optional[Union[str, Path]] = None,
    log_path: Optional[Union[str, Path]] = None,
    resume: Optional[Checkpoint] = None,
    progress: bool = False,
) -> Checkpoint:
    """Mask supervision on M_R only; the verifier stays frozen."""
    if not train:
        raise ValueError("phase 1 needs at least one training sample")
    _check_query_sizes(config, model.downsample_factor)
    eps = config.clamp_eps
    group = config.samples_per_reference

    if config.calibrate_masks and config.phase1.lr > 0 and resume is None:
        calibrate_mask_detector(model, train, config)
    if val:
        logger.info("phase1 constant-prior val loss: %.6f", prior_loss([s.target for s in val]))

    def batch_loss(batch: Batch) -> torch.Tensor:
        m_r = model.match(batch.queries, batch.references, batch.query_index, batch.reference_index).m_r
        return loss_mask(m_r[..., 0], batch.targets, eps)

    def val_loss() -> Optional[float]:
        if not val:
            return None
        total = 0.0
        batches = _mask_batches(val, config.phase1.batch_size, np.random.default_rng(0), [config.val_query_size], group)
        for batch in batches:
            total += batch_loss(batch).item() * batch.n_pairs
        return total / len(val)

    return _run_phase(
        model, "phase1", config.phase1, config.seed,
        lambda rng: _mask_batches(train, config.phase1.batch_size, rng, config.query_sizes, group),
        batch_loss, val_loss,
        _path(ckpt_path), _path(log_path), resume, progress,
    )


# Phase 2


def train_phase2(
    model: BUPMNetwork,
    train: Sequence[PairSample],
    config: TrainConfig,
    val: Sequence[PairSample] = (),
    ckpt_path: Optional[Union[str, Path]] = None,
    log_path: Optional[Union[str, Path]] = None,
    resume: Optional[Checkpoint] = None,
    progress: bool = False,
) -> Checkpoint:
    """
    Stage 2a trains the verifier on frozen masks; stage 2b fine-tunes everything.

    `train` holds positives only, negatives are drawn per batch. `val` holds
    labelled pairs (positives plus fixed negatives). During stage 2a the frozen
    backbone features are cached per query, query size and panorama.
    """
    positives = [p for p in train if p.label == 1]
    if len(positives) < 2:
        raise ValueError(f"phase 2 needs at least 2 training positives, got {len(positives)}")
    _check_query_sizes(config, model.downsample_factor)
    eps = config.clamp_eps

    def scores(batch: Batch, cache: Optional[FeatureCache], split: str) -> torch.Tensor:
        if cache is None:
            return model(batch.queries, batch.references, batch.query_index, batch.reference_index).score
        f_q = cache.lookup(batch.queries, [(split, "query", k, batch.size) for k in batch.query_keys], reference=False)
        f_r = cache.lookup(batch.references, [(split, "reference", k) for k in batch.reference_keys], reference=True)
        with torch.no_grad():
            m_r, m_q, _ = model.match_features(f_q, f_r, batch.query_index, batch.reference_index)
        return decide(build_feature(m_r, m_q), model.verifier)

    def make_loss(cache: Optional[FeatureCache]):
        def batch_loss(batch: Batch) -> torch.Tensor:
            return loss_verify(scores(batch, cache, "train"), batch.targets, eps)
        return batch_loss

    def make_val(cache: Optional[FeatureCache]):
        def val_loss() -> Optional[float]:
            if not val:
                return None
            total = 0.0
            for batch in _labelled_batches(val, config.phase2a.batch_size, config.val_query_size):
                total += loss_verify(scores(batch, cache, "val"), batch.targets, eps).item() * batch.n_pairs
            return total / len(val)
        return val_loss

    skip_2a = resume is not None and resume.phase == "phase2b"

    checkpoint = resume
    for phase, phase_config in (("phase2a", config.phase2a), ("phase2b", config.phase2b)):
        if phase == "phase2a" and skip_2a:
            continue
        cache = FeatureCache(model) if phase == "phase2a" else None
        checkpoint = _run_phase(
            model, phase, phase_config, config.seed,
            lambda rng, pc=phase_config: _pair_batches(
                positives, pc.batch_size, rng, config.query_sizes, config.samples_per_reference
            ),
            make_loss(cache), make_val(cache),
            _path(ckpt_path), _path(log_path),
            resume if resume is not None and resume.phase == phase else None,
            progress,
        )
        if cache is not None:
            logger.debug("%s cached %d feature maps", phase, len(cache))
    return checkpoint


def _path(p: Optional[Union[str, Path]]) -> Optional[Path]:
    return Path(p) if p is not None else None


# Manifest loading


def _load_all(records: Sequence[ManifestRecord], base_dir: Path, n_jobs: int):
    queries, references = zip(*(r.resolve(base_dir) for r in records)) if records else ((), ())
    query_images = [as_rgb(img) for img in load_images(queries, n_jobs)]
    unique_refs = list(dict.fromkeys(references))
    ref_images = dict(zip(unique_refs, (as_rgb(img) for img in load_images(unique_refs, n_jobs))))
    return query_images, [ref_images[r] for r in references], references


def _locations(ref_paths: Sequence[Path]) -> np.ndarray:
    codes, _ = pd.factorize(pd.Series([str(p) for p in ref_paths], dtype=object))
    return codes


def load_mask_samples(
    records: Sequence[ManifestRecord],
    base_dir: Union[str, Path],
    d: int,
    synth: SynthConfig = SynthConfig(),
    n_jobs: int = 1,
) -> List[MaskSample]:
    """Phase-1 samples from the positives of a synthetic manifest (needs source boxes)."""
    positives = [r for r in records if r.label == 1]
    boxes = [box_from_extras(r.extras) for r in positives]
    if any(b is None for b in boxes):
        raise ManifestError("phase 1 needs box_x0/box_y0/box_w/box_h columns on every positive")

    queries, references, ref_paths = _load_all(positives, Path(base_dir), n_jobs)
    return [
        MaskSample(q, r, box_to_target(b, r.shape[:2], d, coverage=synth.coverage), int(loc))
        for q, r, b, loc in zip(queries, references, boxes, _locations(ref_paths))
    ]


def load_pair_samples(
    records: Sequence[ManifestRecord],
    base_dir: Union[str, Path],
    n_jobs: int = 1,
) -> List[PairSample]:
    """Pairs keyed by location; records sharing a reference image share a location."""
    queries, references, ref_paths = _load_all(records, Path(base_dir), n_jobs)
    # a label-0 record's location is its reference's location by construction
    return [
        PairSample(q, r, int(loc), int(rec.label))
        for q, r, loc, rec in zip(queries, references, _locations(ref_paths), records)
    ]


def split_records(records: Sequence[ManifestRecord], split: str) -> List[ManifestRecord]:
    return [r for r in records if r.split == split]


def read_log(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_json(path, lines=True)
