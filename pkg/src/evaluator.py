"""
BUPM — Verification metrics and reports

Responsibilities:
- ROC AUC (rank / Mann-Whitney form, ties count one half)
- Precision-recall sweep and average precision
- evaluate_manifest: score every pair of a manifest, write report + curves + figures
- Localization IoU against synthetic source boxes when the manifest has them

Outputs of evaluate_manifest (all under the output directory):
    report.json   {auc, average_precision, n_pos, n_neg, excluded, ...}
    scores.jsonl  one {query_path, ref_path, score, label} per scored pair
    roc.csv       threshold, tpr, fpr
    pr.csv        threshold, precision, recall
    roc.png / pr.png
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel
from sklearn.metrics import average_precision_score, precision_recall_curve, roc_curve
from tqdm import tqdm

from src.data_io import (
    ImageDecodeError,
    ManifestRecord,
    VerifyRecord,
    as_rgb,
    fit_to_multiple,
    load_image,
    read_manifest,
    write_jsonl,
)
from src.localizer import box_iou, localize
from src.model_io import load_model
from src.models import DEFAULT_THRESHOLD, BUPMNetwork, verify
from src.synth_gen import box_from_extras

logger = logging.getLogger(__name__)

IOU_PASS = 0.5


# Scored sets


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    ids: List[str]

    @classmethod
    def from_lists(cls, scores: Sequence[float], labels: Sequence[int], ids: Optional[Sequence[str]] = None):
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if scores.shape != labels.shape or scores.ndim != 1:
            raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
        if np.any((labels != 0) & (labels != 1)):
            raise ValueError("labels must be 0 or 1")
        if np.any(~np.isfinite(scores)):
            raise ValueError("scores must be finite")
        ids = list(ids) if ids is not None else [str(i) for i in range(len(scores))]
        return cls(scores=scores, labels=labels, ids=ids)

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(len(self.labels) - self.labels.sum())


# Metrics


def roc_auc(s: ScoredSet) -> float:
    """
    P(random positive outscores random negative), ties counted one half.

    Computed from average ranks, which keeps every intermediate a half-integer
    and makes the result identical to exhaustive pair counting.
    """
    n_pos, n_neg = s.n_pos, s.n_neg
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC needs both classes, got {n_pos} positive(s) and {n_neg} negative(s)")

    ranks = pd.Series(s.scores).rank(method="average").to_numpy()
    u = ranks[s.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class PrecisionRecall:
    thresholds: np.ndarray  # descending distinct scores
    precision: np.ndarray
    recall: np.ndarray  # non-decreasing along the sweep
    average_precision: float


def precision_recall(s: ScoredSet) -> PrecisionRecall:
    """Sweep thresholds over distinct scores, descending. AP = sum (R_k - R_{k-1}) * P_k."""
    if s.n_pos == 0:
        raise ValueError("precision-recall needs at least one positive")

    precision, recall, thresholds = precision_recall_curve(s.labels, s.scores)
    # sklearn appends the (precision 1, recall 0) end point without a threshold
    precision, recall = precision[:-1], recall[:-1]
    order = np.argsort(thresholds)[::-1]
    return PrecisionRecall(
        thresholds=thresholds[order],
        precision=precision[order],
        recall=recall[order],
        average_precision=float(average_precision_score(s.labels, s.scores)),
    )


def roc_points(s: ScoredSet) -> pd.DataFrame:
    fpr, tpr, thresholds = roc_curve(s.labels, s.scores, drop_intermediate=False)
    return pd.DataFrame({"threshold": thresholds, "tpr": tpr, "fpr": fpr})


# Reports


class ExcludedSample(BaseModel):
    query_path: str
    ref_path: str
    reason: str


class LocalizationSummary(BaseModel):
    n: int
    mean_iou: Optional[float]
    iou_pass_rate: Optional[float]
    iou_threshold: float = IOU_PASS


class EvaluationReport(BaseModel):
    auc: Optional[float]
    average_precision: Optional[float]
    n_pos: int
    n_neg: int
    excluded: int
    excluded_samples: List[ExcludedSample] = []
    threshold: float = DEFAULT_THRESHOLD
    accuracy: Optional[float] = None
    localization: Optional[LocalizationSummary] = None


@dataclass
class _Outcome:
    record: ManifestRecord
    score: Optional[float] = None
    iou: Optional[float] = None
    error: Optional[str] = None


def _score_one(record: ManifestRecord, base_dir: Path, model: BUPMNetwork, threshold: float) -> _Outcome:
    d = model.downsample_factor
    try:
        q_path, r_path = record.resolve(base_dir)
        query, q_resized = fit_to_multiple(as_rgb(load_image(q_path)), d)
        reference, r_resized = fit_to_multiple(as_rgb(load_image(r_path)), d)
    except (OSError, ImageDecodeError, ValueError) as exc:
        return _Outcome(record, error=str(exc))

    if q_resized or r_resized:
        logger.warning("Resized %s / %s to multiples of %d", record.query_path, record.ref_path, d)

    result = verify(query, reference, model, threshold)
    outcome = _Outcome(record, score=result.score)

    truth = box_from_extras(record.extras)
    if record.label == 1 and truth is not None and not r_resized:
        box = localize(result.m_r, reference.shape[:2], t=DEFAULT_THRESHOLD, wrap_horizontal=model.config.reference_wrap)
        outcome.iou = 0.0 if box is None else box_iou(box, truth, reference.shape[:2])
    return outcome


def _plot_roc(points: pd.DataFrame, auc: float, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(points["fpr"], points["tpr"], drawstyle="steps-post", label=f"AUC = {auc:.4f}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_pr(pr: PrecisionRecall, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(pr.recall, pr.precision, drawstyle="steps-post", label=f"AP = {pr.average_precision:.4f}")
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def evaluate_manifest(
    ckpt_path: Union[str, Path],
    manifest_path: Union[str, Path],
    out_dir: Union[str, Path],
    split: Optional[str] = None,
    threshold: float = DEFAULT_THRESHOLD,
    n_jobs: int = 1,
    progress: bool = False,
) -> EvaluationReport:
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    if split is not None:
        records = [r for r in records if r.split == split]
    if not records:
        raise ValueError(f"no records to evaluate in {manifest_path}" + (f" (split={split})" if split else ""))

    model, checkpoint = load_model(ckpt_path)
    logger.info(
        "Evaluating %d pairs with checkpoint %s (phase=%s, epoch=%d)",
        len(records), ckpt_path, checkpoint.phase, checkpoint.epoch,
    )

    base_dir = manifest_path.parent
    jobs = (delayed(_score_one)(r, base_dir, model, threshold) for r in tqdm(records, disable=not progress))
    outcomes: List[_Outcome] = Parallel(n_jobs=n_jobs, backend="threading")(jobs)

    scored = [o for o in outcomes if o.error is None]
    excluded = [
        ExcludedSample(query_path=o.record.query_path, ref_path=o.record.ref_path, reason=o.error)
        for o in outcomes if o.error is not None
    ]
    for e in excluded:
        logger.warning("Excluded %s / %s: %s", e.query_path, e.ref_path, e.reason)

    s = ScoredSet.from_lists(
        [o.score for o in scored],
        [o.record.label for o in scored],
        [f"{o.record.query_path}|{o.record.ref_path}" for o in scored],
    )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    auc = None
    if s.n_pos and s.n_neg:
        auc = roc_auc(s)
        points = roc_points(s)
        points.to_csv(out_dir / "roc.csv", index=False)
        _plot_roc(points, auc, out_dir / "roc.png")
    else:
        logger.warning("AUC undefined: %d positive(s), %d negative(s)", s.n_pos, s.n_neg)

    ap = None
    if s.n_pos:
        pr = precision_recall(s)
        ap = pr.average_precision
        pd.DataFrame({"threshold": pr.thresholds, "precision": pr.precision, "recall": pr.recall}).to_csv(
            out_dir / "pr.csv", index=False
        )
        _plot_pr(pr, out_dir / "pr.png")

    write_jsonl(
        [
            VerifyRecord(query_path=o.record.query_path, ref_path=o.record.ref_path, score=o.score, label=o.record.label)
            for o in scored
        ],
        out_dir / "scores.jsonl",
    )

    localization = None
    ious = [o.iou for o in scored if o.iou is not None]
    if ious:
        localization = LocalizationSummary(
            n=len(ious),
            mean_iou=float(np.mean(ious)),
            iou_pass_rate=float(np.mean(np.asarray(ious) >= IOU_PASS)),
        )

    accuracy = None
    if len(s.scores):
        accuracy = float(np.mean((s.scores >= threshold).astype(np.int64) == s.labels))

    report = EvaluationReport(
        auc=auc,
        average_precision=ap,
        n_pos=s.n_pos,
        n_neg=s.n_neg,
        excluded=len(excluded),
        excluded_samples=excluded,
        threshold=threshold,
        accuracy=accuracy,
        localization=localization,
    )
    with open(out_dir / "report.json", "w") as f:
        json.dump(report.model_dump(mode="json"), f, indent=2, sort_keys=True)

    logger.info("AUC=%s AP=%s (n_pos=%d, n_neg=%d, excluded=%d)", auc, ap, s.n_pos, s.n_neg, len(excluded))
    return report
