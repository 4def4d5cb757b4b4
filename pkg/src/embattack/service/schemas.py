"""Request and response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class Health(BaseModel):
    status: str = "ok"
    version: str
    oracle_id: str
    vocabulary_size: int
    tau: float


class SynthRequest(BaseModel):
    text: str = Field(min_length=1)


class TranscriptResponse(BaseModel):
    # the field path HttpAdapter reads by default
    text: str


class BlurModel(BaseModel):
    alpha: float = Field(0.3, gt=0, le=1)
    beta: int = Field(1, ge=0)
    gamma: float = Field(1.0, ge=0)


class OtlRequest(BaseModel):
    text: str = Field(min_length=1)
    blur: BlurModel = BlurModel()
    epoch_max: int = Field(50, ge=1)
    num_candidates: int = Field(10, ge=1)
    learning_rate: float = Field(0.05, gt=0)
    query_policy: str = Field("online", pattern="^(online|offline)$")
    thr: float | None = Field(None, ge=0)
    seed: int = 0


class OtaRequest(BaseModel):
    text: str = Field(min_length=1)
    blur: BlurModel = BlurModel()
    k: int = Field(20, ge=1)
    epoch_max: int = Field(10, ge=1)
    w: float = Field(0.5, ge=0)
    c1: float = Field(2.0, ge=0)
    c2: float = Field(2.0, ge=0)
    eta: float = Field(0.1, ge=0)
    thr: float | None = Field(None, ge=0)
    seed: int = 0


class AttackResponse(BaseModel):
    target: str
    success: bool
    final_loss: float | None
    mel_loss: float
    query_count: int
    budget: int
    delta_inf_norm: float
    audio_wav_base64: str | None = None
