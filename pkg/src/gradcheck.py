"""
Finite-difference gradient suites for BUPM.

Every differentiable op, each network component and the end-to-end score is
checked against central finite differences over many seeds. Seeds whose
inputs sit within KINK_MARGIN of a relu or max kink are skipped and replaced,
so every suite reports on the requested number of smooth points.
"""

from __future__ import annotations

import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd
import torch
from pydantic import BaseModel

from src.backbone import Backbone, extract_features
from src.bupm_matcher import MaskDetector, detect_mask, global_max_pool, pairwise_cosine
from src.config import BackboneConfig, MaskDetectorConfig, ModelConfig, VerifierConfig
from src.models import BUPMNetwork
from src.tensor_core import (
    DTYPE,
    activation,
    conv2d,
    dense,
    finite_difference_check,
    l2_normalize,
    recording,
    reduce,
)
from src.verify_head import Verifier, decide

logger = logging.getLogger(__name__)

KINK_MARGIN = 2e-4
MAX_ATTEMPT_FACTOR = 5

SIZES = {
    "toy": {"h": 4, "w": 6, "c": 2, "cout": 3, "stages": 1, "query": (8, 8), "reference": (8, 16)},
    "small": {"h": 6, "w": 8, "c": 3, "cout": 4, "stages": 2, "query": (16, 16), "reference": (16, 32)},
}

Suite = Callable[[torch.Generator, dict, Callable], Tuple[Callable[[], torch.Tensor], List[torch.Tensor]]]


class GradcheckRow(BaseModel):
    op: str
    seeds: int
    skipped: int
    max_rel_error: float
    passed: bool


# Negative control


class _HalfGradient(torch.autograd.Function):
    """Identity forward, half the gradient backward."""

    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * 0.5


def _identity(t: torch.Tensor) -> torch.Tensor:
    return t


def _broken(t: torch.Tensor) -> torch.Tensor:
    return _HalfGradient.apply(t)


# Helpers


def _randn(g: torch.Generator, *shape, grad: bool = True) -> torch.Tensor:
    return torch.randn(*shape, generator=g, dtype=DTYPE).requires_grad_(grad)


def _weighted(out: torch.Tensor, g: torch.Generator) -> Callable[[torch.Tensor], torch.Tensor]:
    w = torch.randn(out.shape, generator=g, dtype=DTYPE)
    return lambda t: (t * w).sum()


def _toy_model_config(size: dict) -> ModelConfig:
    stages = size["stages"]
    return ModelConfig(
        backbone=BackboneConfig(
            num_stages=stages,
            channels_per_stage=(4,) * stages,
            downsample_factor=2 ** stages,
            feature_depth=4,
        ),
        reference_size=size["reference"],
    )


# Suites


def _conv_suite(padding: str, stride: int) -> Suite:
    def build(g, size, tap):
        x = _randn(g, size["h"], size["w"], size["c"])
        k = _randn(g, 3, 3, size["c"], size["cout"])
        b = _randn(g, size["cout"])
        loss = _weighted(conv2d(x, k, b, padding=padding, stride=stride), g)
        return (lambda: loss(tap(conv2d(x, k, b, padding=padding, stride=stride)))), [x, k, b]
    return build


def _dense(g, size, tap):
    x = _randn(g, 3, size["c"])
    w = _randn(g, size["c"], size["cout"])
    b = _randn(g, size["cout"])
    loss = _weighted(dense(x, w, b), g)
    return (lambda: loss(tap(dense(x, w, b)))), [x, w, b]


def _activation_suite(kind: str) -> Suite:
    def build(g, size, tap):
        x = _randn(g, size["h"], size["w"], size["c"])
        loss = _weighted(x, g)
        return (lambda: loss(tap(activation(x, kind)))), [x]
    return build


def _reduce_suite(kind: str) -> Suite:
    def build(g, size, tap):
        x = _randn(g, size["h"], size["w"], size["c"], 3)
        loss = _weighted(reduce(x, (1, 3), kind), g)
        return (lambda: loss(tap(reduce(x, (1, 3), kind)))), [x]
    return build


def _l2_normalize(g, size, tap):
    x = _randn(g, size["h"], size["w"], size["c"])
    loss = _weighted(x, g)
    return (lambda: loss(tap(l2_normalize(x)))), [x]


def _pairwise_cosine(g, size, tap):
    f_r = _randn(g, size["h"], size["w"], size["c"])
    f_q = _randn(g, size["h"] - 1, size["h"] - 1, size["c"])
    loss = _weighted(pairwise_cosine(f_r, f_q), g)
    return (lambda: loss(tap(pairwise_cosine(f_r, f_q)))), [f_r, f_q]


def _global_max_pool(g, size, tap):
    s = _randn(g, size["h"], size["w"], size["h"] - 1, size["h"] - 1)
    best = global_max_pool(s)
    loss_r, loss_q = _weighted(best.b_r, g), _weighted(best.b_q, g)

    def fn():
        b_r, b_q = global_max_pool(s)
        return loss_r(tap(b_r)) + loss_q(tap(b_q))

    return fn, [s]


def _backbone(g, size, tap):
    config = _toy_model_config(size).backbone
    net = Backbone(config, g)
    image = _randn(g, *size["query"], 3, grad=False).sigmoid()
    loss = _weighted(extract_features(image, net, pano_wrap=True), g)
    return (lambda: loss(tap(extract_features(image, net, pano_wrap=True)))), list(net.parameters())


def _mask_detector(g, size, tap):
    det = MaskDetector(MaskDetectorConfig(), g)
    best = _randn(g, size["h"], size["w"], 1)
    loss = _weighted(detect_mask(best, det, pano_wrap=True), g)
    return (lambda: loss(tap(detect_mask(best, det, pano_wrap=True)))), [best] + list(det.parameters())


def _verifier(g, size, tap):
    ver = Verifier(VerifierConfig(), g)
    v = _randn(g, 5, 2, grad=False).sigmoid().requires_grad_(True)
    loss = _weighted(decide(v, ver), g)
    return (lambda: loss(tap(decide(v, ver)))), [v] + list(ver.parameters())


def _end_to_end(g, size, tap):
    seed = int(torch.randint(0, 2**31 - 1, (1,), generator=g).item())
    config = _toy_model_config(size).model_copy(update={"init_seed": seed})
    model = BUPMNetwork(config)
    query = torch.rand(1, *size["query"], 3, generator=g, dtype=DTYPE)
    reference = torch.rand(1, *size["reference"], 3, generator=g, dtype=DTYPE)
    return (lambda: tap(model(query, reference).score).sum()), list(model.parameters())


SUITES: Dict[str, Suite] = {
    "conv2d_zero": _conv_suite("same-zero", 1),
    "conv2d_circular": _conv_suite("same-circular-horizontal", 1),
    "conv2d_stride2": _conv_suite("same-zero", 2),
    "dense": _dense,
    "relu": _activation_suite("relu"),
    "sigmoid": _activation_suite("sigmoid"),
    "reduce_max": _reduce_suite("max"),
    "reduce_mean": _reduce_suite("mean"),
    "l2_normalize": _l2_normalize,
    "pairwise_cosine": _pairwise_cosine,
    "global_max_pool": _global_max_pool,
    "backbone": _backbone,
    "mask_detector": _mask_detector,
    "verifier": _verifier,
    "end_to_end": _end_to_end,
}


# Runner


def check_suite(
    name: str,
    size: str = "toy",
    seeds: int = 20,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    broken: bool = False,
) -> GradcheckRow:
    if name not in SUITES:
        raise ValueError(f"unknown gradcheck suite {name!r}; choose from {sorted(SUITES)}")
    if size not in SIZES:
        raise ValueError(f"unknown size {size!r}; choose from {sorted(SIZES)}")
    if seeds < 1:
        raise ValueError(f"seeds must be >= 1, got {seeds}")

    tap = _broken if broken else _identity
    checked, skipped, worst = 0, 0, 0.0
    for seed in range(seeds * MAX_ATTEMPT_FACTOR):
        if checked == seeds:
            break
        g = torch.Generator().manual_seed(seed)
        fn, params = SUITES[name](g, SIZES[size], tap)

        with torch.no_grad(), recording() as tape:
            fn()
        if tape.min_margin < KINK_MARGIN:
            skipped += 1
            continue

        worst = max(worst, finite_difference_check(fn, params, step=step))
        checked += 1

    if checked < seeds:
        logger.warning("%s: only %d smooth seeds out of %d attempts", name, checked, checked + skipped)

    return GradcheckRow(
        op=name,
        seeds=checked,
        skipped=skipped,
        max_rel_error=worst,
        passed=checked > 0 and worst < tolerance,
    )


def run_gradcheck(
    size: str = "toy",
    seeds: int = 20,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    ops: Optional[Iterable[str]] = None,
    broken: Sequence[str] = (),
) -> pd.DataFrame:
    """One row per suite: op, seeds, skipped, max_rel_error, passed."""
    names = list(ops) if ops is not None else list(SUITES)
    unknown = set(broken) - set(names)
    if unknown:
        raise ValueError(f"cannot break suites that are not run: {sorted(unknown)}")

    rows = []
    for name in names:
        row = check_suite(name, size, seeds, step, tolerance, broken=name in broken)
        logger.info("gradcheck %-16s max_rel_error=%.3e %s", name, row.max_rel_error, "ok" if row.passed else "FAIL")
        rows.append(row.model_dump())
    return pd.DataFrame(rows, columns=list(GradcheckRow.model_fields))
