"""
BUPM — Checkpoint container

Responsibilities:
- Encode / decode the versioned BUPMCKPT binary container
- Move weights and optimizer moments between a live model and a Checkpoint
- Load a ready-to-use network from a checkpoint file

Layout (all integers little-endian), frozen in docs/CHECKPOINT_FORMAT.md:

    magic      8 bytes  b"BUPMCKPT"
    version    u32
    digest     32 bytes sha256 of the canonical model config
    meta_len   u64, then meta_len bytes of canonical JSON
    n_blocks   u32, then per block (sorted by name):
        name_len u32, name utf-8, rank u32, rank x u64 extents, float64 '<f8' data

This file DOES NOT:
- Decide when to checkpoint (see trainer)
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from src.config import ModelConfig, config_digest
from src.models import BUPMNetwork, build_model
from src.tensor_core import DTYPE

logger = logging.getLogger(__name__)

MAGIC = b"BUPMCKPT"
FORMAT_VERSION = 1
OPTIMIZER_PREFIX = "optimizer/"


class CheckpointError(ValueError):
    pass


@dataclass
class OptimizerState:
    kind: str
    lr: float
    # per parameter name
    steps: Dict[str, int] = field(default_factory=dict)
    # "<param name>/<moment>" -> array
    moments: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    phase: str
    epoch: int
    weights: Dict[str, np.ndarray]
    metrics: Dict[str, Optional[float]] = field(default_factory=dict)
    optimizer: Optional[OptimizerState] = None
    # trainer bookkeeping needed to resume (early-stopping state, rng seeds)
    state: Dict[str, Any] = field(default_factory=dict)

    @property
    def digest(self) -> bytes:
        return config_digest(self.model_config)


# Model <-> Checkpoint


def _param_names(model: BUPMNetwork, optimizer: torch.optim.Optimizer) -> List[str]:
    by_id = {id(p): name for name, p in model.named_parameters()}
    names = []
    for group in optimizer.param_groups:
        for p in group["params"]:
            if id(p) not in by_id:
                raise ValueError("optimizer holds a parameter that is not part of the model")
            names.append(by_id[id(p)])
    return names


def _optimizer_kind(optimizer: torch.optim.Optimizer) -> str:
    if isinstance(optimizer, torch.optim.Adam):
        return "adam"
    if isinstance(optimizer, torch.optim.SGD):
        return "sgd"
    raise ValueError(f"unsupported optimizer {type(optimizer).__name__}")


def capture_optimizer(model: BUPMNetwork, optimizer: torch.optim.Optimizer) -> OptimizerState:
    names = _param_names(model, optimizer)
    state = optimizer.state_dict()["state"]

    captured = OptimizerState(kind=_optimizer_kind(optimizer), lr=float(optimizer.param_groups[0]["lr"]))
    for idx, name in enumerate(names):
        entry = state.get(idx)
        if not entry:
            continue
        for key, value in entry.items():
            if key == "step":
                captured.steps[name] = int(float(value))
            elif torch.is_tensor(value):
                captured.moments[f"{name}/{key}"] = value.detach().cpu().numpy().astype(np.float64)
    return captured


def restore_optimizer(
    model: BUPMNetwork,
    optimizer: torch.optim.Optimizer,
    saved: OptimizerState,
) -> None:
    if saved.kind != _optimizer_kind(optimizer):
        raise CheckpointError(
            f"checkpoint holds {saved.kind} state but the optimizer is {_optimizer_kind(optimizer)}"
        )

    names = _param_names(model, optimizer)
    state_dict = optimizer.state_dict()
    restored: Dict[int, Dict[str, Any]] = {}
    for idx, name in enumerate(names):
        entry: Dict[str, Any] = {}
        if name in saved.steps:
            # optimizer __setstate__ turns the float step back into a tensor
            entry["step"] = float(saved.steps[name])
        prefix = f"{name}/"
        for key, value in saved.moments.items():
            if key.startswith(prefix):
                entry[key[len(prefix):]] = torch.from_numpy(value.copy())
        if entry:
            restored[idx] = entry

    state_dict["state"] = restored
    optimizer.load_state_dict(state_dict)


def checkpoint_from_model(
    model: BUPMNetwork,
    phase: str,
    epoch: int,
    metrics: Optional[Dict[str, Optional[float]]] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    state: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    weights = {
        name: t.detach().cpu().numpy().astype(np.float64).copy()
        for name, t in model.state_dict().items()
    }
    return Checkpoint(
        model_config=model.config,
        phase=phase,
        epoch=epoch,
        weights=weights,
        metrics=dict(metrics or {}),
        optimizer=capture_optimizer(model, optimizer) if optimizer is not None else None,
        state=dict(state or {}),
    )


def apply_checkpoint(
    checkpoint: Checkpoint,
    model: BUPMNetwork,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> None:
    if config_digest(model.config) != checkpoint.digest:
        raise CheckpointError("checkpoint was written for a different model configuration")

    expected = set(model.state_dict())
    found = set(checkpoint.weights)
    if expected != found:
        raise CheckpointError(
            f"weight names differ: missing {sorted(expected - found)}, unexpected {sorted(found - expected)}"
        )

    tensors = {name: torch.from_numpy(arr.copy()).to(DTYPE) for name, arr in checkpoint.weights.items()}
    with torch.no_grad():
        model.load_state_dict(tensors, strict=True)

    if optimizer is not None and checkpoint.optimizer is not None:
        restore_optimizer(model, optimizer, checkpoint.optimizer)


# Encoding


def _metadata(checkpoint: Checkpoint) -> Dict[str, Any]:
    meta: Dict[str, Any] = {
        "phase": checkpoint.phase,
        "epoch": checkpoint.epoch,
        "metrics": checkpoint.metrics,
        "model_config": checkpoint.model_config.model_dump(mode="json"),
        "state": checkpoint.state,
        "optimizer": None,
    }
    if checkpoint.optimizer is not None:
        meta["optimizer"] = {
            "kind": checkpoint.optimizer.kind,
            "lr": checkpoint.optimizer.lr,
            "steps": checkpoint.optimizer.steps,
        }
    return meta


def _blocks(checkpoint: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    blocks = dict(checkpoint.weights)
    if checkpoint.optimizer is not None:
        for key, arr in checkpoint.optimizer.moments.items():
            blocks[OPTIMIZER_PREFIX + key] = arr
    return sorted(blocks.items())


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    meta = json.dumps(_metadata(checkpoint), sort_keys=True, separators=(",", ":")).encode("utf-8")

    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), checkpoint.digest, struct.pack("<Q", len(meta)), meta]

    blocks = _blocks(checkpoint)
    parts.append(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())

    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)

    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a BUPM checkpoint (bad magic)")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    digest = reader.take(32)

    (meta_len,) = reader.unpack("<Q")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
        model_config = ModelConfig.model_validate(meta["model_config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc

    if config_digest(model_config) != digest:
        raise CheckpointError("config digest does not match the stored model config")

    (n_blocks,) = reader.unpack("<I")
    weights: Dict[str, np.ndarray] = {}
    moments: Dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        if name.startswith(OPTIMIZER_PREFIX):
            moments[name[len(OPTIMIZER_PREFIX):]] = arr
        else:
            weights[name] = arr

    if reader.pos != len(data):
        raise CheckpointError(f"{len(data) - reader.pos} trailing bytes after the last block")

    optimizer = None
    if meta.get("optimizer") is not None:
        opt = meta["optimizer"]
        optimizer = OptimizerState(
            kind=opt["kind"],
            lr=float(opt["lr"]),
            steps={k: int(v) for k, v in opt["steps"].items()},
            moments=moments,
        )
    elif moments:
        raise CheckpointError("optimizer blocks present without optimizer metadata")

    return Checkpoint(
        model_config=model_config,
        phase=meta["phase"],
        epoch=int(meta["epoch"]),
        weights=weights,
        metrics=meta.get("metrics", {}),
        optimizer=optimizer,
        state=meta.get("state", {}),
    )


# Files


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(encode_checkpoint(checkpoint))
    tmp.replace(path)
    logger.info("Saved checkpoint %s (phase=%s, epoch=%d)", path, checkpoint.phase, checkpoint.epoch)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def load_model(path: Union[str, Path]) -> Tuple[BUPMNetwork, Checkpoint]:
    checkpoint = load_checkpoint(path)
    model = build_model(checkpoint.model_config)
    apply_checkpoint(checkpoint, model)
    model.eval()
    return model, checkpoint
