"""
BUPM — Tensor core

Every op is a thin, validated wrapper over torch in float64 and channels-last
layout (H x W x C, optional leading batch axis). torch's autograd graph is the
reverse-mode tape: built per forward pass, replayed once by `backward`, freed
afterwards.

This file DOES NOT:
- Know anything about images, masks or panoramas
- Hold parameters (see backbone / bupm_matcher / verify_head)
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

DTYPE = torch.float64
NORM_EPS = 1e-12

Padding = Literal["same-zero", "same-circular-horizontal"]


# Tape


@dataclass
class Tape:
    """
    Names of the ops executed inside a `recording()` block, in order.

    Non-smooth ops (relu, max) also log their distance to the nearest kink:
    smallest |x| for relu, smallest top-1 minus top-2 gap for max.
    """

    nodes: List[str] = field(default_factory=list)
    margins: List[float] = field(default_factory=list)

    def record(self, op: str, margin: Optional[float] = None) -> None:
        self.nodes.append(op)
        if margin is not None:
            self.margins.append(margin)

    @property
    def min_margin(self) -> float:
        return min(self.margins, default=float("inf"))


_ACTIVE_TAPES: List[Tape] = []


@contextmanager
def recording():
    tape = Tape()
    _ACTIVE_TAPES.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE_TAPES.remove(tape)


def _record(op: str, margin: Optional[Callable[[], float]] = None) -> None:
    if not _ACTIVE_TAPES:
        return
    value = margin() if margin is not None else None
    for tape in _ACTIVE_TAPES:
        tape.record(op, value)


def configure_determinism(threads: int = 1) -> None:
    """Pin torch to a fixed thread count and deterministic kernels."""
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    out = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    out.requires_grad_(requires_grad)
    return out


# Ops


def conv2d(
    input: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor,
    padding: Padding = "same-zero",
    stride: int = 1,
) -> torch.Tensor:
    """
    Same-padded 2-D convolution (cross-correlation) on channels-last input.

    input  : [N x] H x W x Cin
    kernel : Kh x Kw x Cin x Cout
    bias   : Cout
    output : [N x] ceil(H/stride) x ceil(W/stride) x Cout
    """
    if kernel.dim() != 4:
        raise ValueError(f"kernel must be Kh x Kw x Cin x Cout, got shape {tuple(kernel.shape)}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if input.dim() not in (3, 4):
        raise ValueError(f"input must be [N x] H x W x C, got shape {tuple(input.shape)}")
    if input.shape[-1] != cin:
        raise ValueError(f"input has {input.shape[-1]} channels but kernel expects {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {tuple(bias.shape)}")
    if padding not in ("same-zero", "same-circular-horizontal"):
        raise ValueError(f"unknown padding mode {padding!r}")

    _record("conv2d")

    batched = input.dim() == 4
    x = input if batched else input.unsqueeze(0)
    x = x.permute(0, 3, 1, 2)
    ph, pw = kh // 2, kw // 2

    if padding == "same-circular-horizontal":
        width = x.shape[-1]
        cols = torch.arange(-pw, width + pw) % width
        x = x.index_select(-1, cols)
        x = F.pad(x, (0, 0, ph, ph))
    else:
        x = F.pad(x, (pw, pw, ph, ph))

    weight = kernel.permute(3, 2, 0, 1)
    out = F.conv2d(x, weight, bias, stride=stride)
    out = out.permute(0, 2, 3, 1)

    return out if batched else out.squeeze(0)


def dense(input: torch.Tensor, weights: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """out[j] = sum_i input[i] * weights[i, j] + bias[j], optional leading batch axes."""
    if weights.dim() != 2:
        raise ValueError(f"weights must be N x M, got shape {tuple(weights.shape)}")
    if input.shape[-1] != weights.shape[0]:
        raise ValueError(
            f"input extent {input.shape[-1]} does not match weights {tuple(weights.shape)}"
        )
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"bias must have shape ({weights.shape[1]},), got {tuple(bias.shape)}")

    _record("dense")
    return input @ weights + bias


def activation(input: torch.Tensor, kind: Literal["relu", "sigmoid"]) -> torch.Tensor:
    if kind == "relu":
        _record("relu", lambda: input.detach().abs().min().item())
        return torch.relu(input)
    if kind == "sigmoid":
        _record("sigmoid")
        return torch.sigmoid(input)
    raise ValueError(f"unknown activation {kind!r}")


def _normalize_axes(axes: Iterable[int], ndim: int) -> Tuple[int, ...]:
    norm = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise ValueError(f"axis {axis} out of range for a {ndim}-d tensor")
        norm.append(axis % ndim)
    if len(set(norm)) != len(norm):
        raise ValueError(f"axes must be distinct, got {tuple(axes)}")
    if not norm:
        raise ValueError("at least one axis is required")
    return tuple(sorted(norm))


def reduce(
    input: torch.Tensor,
    axes: Sequence[int],
    kind: Literal["max", "mean"],
) -> torch.Tensor:
    """
    Reduce over `axes`, removing them.

    max backward routes the whole gradient to the first maximal element of
    each group in row-major order (torch.argmax returns the first maximum).
    """
    axes = _normalize_axes(axes, input.dim())

    if kind == "mean":
        _record("reduce_mean")
        return input.mean(dim=axes)

    if kind != "max":
        raise ValueError(f"unknown reduction {kind!r}")

    keep = [a for a in range(input.dim()) if a not in axes]
    keep_shape = [input.shape[a] for a in keep]
    flat = input.permute(*keep, *axes).reshape(*keep_shape, -1)
    _record("reduce_max", lambda: _max_gap(flat))
    idx = flat.argmax(dim=-1, keepdim=True)
    return flat.gather(-1, idx).squeeze(-1)


def _max_gap(flat: torch.Tensor) -> float:
    if flat.shape[-1] < 2:
        return float("inf")
    top = flat.detach().topk(2, dim=-1).values
    return (top[..., 0] - top[..., 1]).min().item()


def l2_normalize(input: torch.Tensor, epsilon: float = NORM_EPS) -> torch.Tensor:
    """Divide each trailing-axis fiber by max(||fiber||_2, epsilon)."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    _record("l2_normalize")
    return F.normalize(input, p=2.0, dim=-1, eps=epsilon)


def backward(
    loss: torch.Tensor,
    inputs: Optional[Sequence[torch.Tensor]] = None,
    retain_graph: bool = False,
) -> Optional[List[Optional[torch.Tensor]]]:
    """
    Accumulate d(loss)/d(t) into t.grad for every leaf t with requires_grad.

    Returns the accumulated grads of `inputs` when given.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    _record("backward")
    loss.reshape(()).backward(retain_graph=retain_graph)
    if inputs is None:
        return None
    return [t.grad for t in inputs]


# Optimizers


def build_optimizer(
    params: Iterable[torch.nn.Parameter],
    kind: Literal["sgd", "adam"],
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> torch.optim.Optimizer:
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    params = list(params)
    if kind == "sgd":
        # plain SGD, no momentum, no decay
        return torch.optim.SGD(params, lr=lr, momentum=0.0, weight_decay=0.0)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps, weight_decay=0.0)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(optimizer: torch.optim.Optimizer) -> None:
    """Apply one update from the accumulated grads, then reset them to zero."""
    optimizer.step()
    optimizer.zero_grad(set_to_none=False)


# Finite differences


def finite_difference_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-5,
    floor: float = 1e-10,
) -> float:
    """
    Largest relative error between autograd and central-difference gradients.

    Relative error per parameter is ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||, floor),
    and 0 when both vanish.
    """
    for p in params:
        if p.grad is not None:
            p.grad = None

    loss = fn()
    backward(loss)
    analytic = [
        p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        for p in params
    ]

    worst = 0.0
    with torch.no_grad():
        for p, g_auto in zip(params, analytic):
            g_fd = torch.zeros_like(p)
            flat = p.view(-1)
            flat_fd = g_fd.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                plus = fn().item()
                flat[k] = orig - step
                minus = fn().item()
                flat[k] = orig
                flat_fd[k] = (plus - minus) / (2.0 * step)

            scale = max(g_auto.norm().item(), g_fd.norm().item())
            err = 0.0 if scale == 0.0 else (g_auto - g_fd).norm().item() / max(scale, floor)
            worst = max(worst, err)

    for p in params:
        p.grad = None

    return worst


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def from_images(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack H x W x C float images into an N x H x W x C float64 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.stack(images, axis=0), dtype=np.float64))

