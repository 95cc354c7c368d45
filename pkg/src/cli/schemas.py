from typing import Literal, Optional

from pydantic import BaseModel

from src.data_io import VerifyRecord
from src.localizer import BoundingBox


class VerifyOutput(VerifyRecord):
    threshold: float


class LocalizeOutput(BaseModel):
    status: Literal["ok", "no-localization"]
    score: float
    box: Optional[BoundingBox] = None
    wraparound: Optional[bool] = None


class SynthOutput(BaseModel):
    manifest: str
    panoramas: int
    samples: int


class TrainOutput(BaseModel):
    checkpoint: str
    phase: str
    epoch: int
    train_loss: Optional[float] = None
    val_loss: Optional[float] = None


class IngestOutput(BaseModel):
    manifest: str
    positives: int
    negatives: int
