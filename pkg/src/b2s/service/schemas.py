"""Pydantic request/response models for the /v1 API.

Scene payloads mirror the canonical scene JSON schema; image payloads are
base64 PNG.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class RoadModel(BaseModel):
    polygon: list[list[float]]


class VehicleModel(BaseModel):
    center: list[float]
    yaw: float
    length: float
    width: float
    height: Optional[float] = None


class CameraModel(BaseModel):
    name: str
    K: list[list[float]]
    R: list[list[float]]
    t: list[float]
    image_wh: list[int]


class SceneModel(BaseModel):
    extent_m: float
    weather: str
    roads: list[RoadModel]
    vehicles: list[VehicleModel]
    cameras: list[CameraModel]
    seed: int


class Violation(BaseModel):
    code: str
    message: str
    subject: str
    severity: Literal["error", "warning"]


class ValidateResponse(BaseModel):
    valid: bool
    violations: list[Violation]


class ProjectRequest(BaseModel):
    scene: SceneModel


class SemanticPayload(BaseModel):
    width: int
    height: int
    classes: list[str]
    resolution_tag: str
    png: str = Field(description="base64 PNG, palette-colored class map")
    labels: str = Field(description="base64 raw uint8 class-label grid, row-major")


class ProjectedView(BaseModel):
    camera_name: str
    initial: SemanticPayload
    refined: SemanticPayload


class ProjectResponse(BaseModel):
    views: list[ProjectedView]


class GenerateRequest(BaseModel):
    scene: SceneModel
    seed: int = 0
    weather: Optional[str] = None
    cameras: Optional[list[str]] = None


class GenerateAccepted(BaseModel):
    job_id: str


class GeneratedView(BaseModel):
    camera_name: str
    image_png: str
    condition: SemanticPayload
    seed: int
    adapter_id: Optional[str] = None
    warning: Optional[str] = None


class GenerationPayload(BaseModel):
    views: list[GeneratedView]
    panel_png: str
    config_hash: str
    timing: dict


class JobStatus(BaseModel):
    job_id: str
    status: Literal["queued", "running", "done", "failed"]
    result: Optional[GenerationPayload] = None
    error: Optional[str] = None


class RigResponse(BaseModel):
    cameras: list[CameraModel]


class HealthResponse(BaseModel):
    status: str
    checkpoints: dict


class ErrorBody(BaseModel):
    code: str
    message: str
    field: Optional[str] = None
