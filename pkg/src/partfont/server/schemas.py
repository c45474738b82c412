"""Pydantic request/response models for the studio HTTP API."""

from __future__ import annotations

from pydantic import BaseModel, Field


class SessionCreated(BaseModel):
    session_id: str
    part_size: int


class ImageUploaded(BaseModel):
    image_id: str
    width: int
    height: int


class ImageInfo(BaseModel):
    image_id: str
    width: int
    height: int


class CropRequest(BaseModel):
    image_id: str
    x: int
    y: int
    size: int


class AutoExtractRequest(BaseModel):
    image_ids: list[str]
    k: int = Field(default=26, ge=1)


class TrayPart(BaseModel):
    part_id: str
    image_id: str | None = None
    x: int
    y: int
    size: int
    auto: bool = False


class PartCreated(BaseModel):
    part_id: str


class PartsCreated(BaseModel):
    part_ids: list[str]


class SessionState(BaseModel):
    session_id: str
    part_size: int
    images: list[ImageInfo]
    parts: list[TrayPart]


class GenerateRequest(BaseModel):
    part_ids: list[str]
    chars: str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    steps: int | None = Field(default=None, ge=1)
    seed: int = 0


class JobCreated(BaseModel):
    job_id: str
    cached: bool = False


class JobStatus(BaseModel):
    job_id: str
    status: str  # queued | running | done | error
    error: str | None = None
    chars: dict[str, str] = {}  # char -> PNG URL
    grid: str | None = None  # PNG URL


class Health(BaseModel):
    status: str
    checkpoint: str | None = None
