"""Request/response models for the pipeline service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str
    device: str


class SynthRequest(BaseModel):
    out_dir: str
    num_train: int = Field(default=40, ge=1)
    num_test: int = Field(default=20, ge=0)
    image_size: int = Field(default=64, ge=32)
    num_classes: int = Field(default=2, ge=1, le=3)
    seed: int = 0


class SynthResponse(BaseModel):
    resolved_config: dict
    train_dir: str
    test_dir: str
    train_items: int
    test_items: int


class TrainBaseRequest(BaseModel):
    data_dir: str
    out: str
    num_classes: int = Field(default=2, ge=1, le=3)
    epochs: int = Field(default=12, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    gamma: float = Field(default=2.0, ge=0)
    alpha: float = Field(default=1.0, gt=0)
    patience: int = Field(default=4, ge=1)
    shots: int = Field(default=4, ge=1)
    seed: int = 0


class TransferRequest(BaseModel):
    checkpoint: str
    support_dir: str
    out: str
    policy: str = "conv_mapper"
    support_size: int = Field(default=10, ge=2)
    support_seed: int = 0
    epochs: int = Field(default=20, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    gamma: float = Field(default=2.0, ge=0)
    alpha: float = Field(default=1.0, gt=0)
    patience: int = Field(default=6, ge=1)
    conditioning_count: Optional[int] = Field(default=None, ge=1)
    seed: int = 0


class DistillRequest(BaseModel):
    teacher_checkpoint: str
    support_dir: str
    out: str
    use_dist_loss: bool = True
    policy: str = "classifier,conv_mapper,conv_merge,conv_skip,mixer"
    support_size: int = Field(default=10, ge=2)
    support_seed: int = 0
    epochs: int = Field(default=20, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    gamma: float = Field(default=2.0, ge=0)
    alpha: float = Field(default=1.0, gt=0)
    patience: int = Field(default=6, ge=1)
    conditioning_count: Optional[int] = Field(default=None, ge=1)
    seed: int = 0


class TrainResponse(BaseModel):
    resolved_config: dict
    checkpoint: str
    best_epoch: int
    best_miou: float
    epochs_run: int


class EvalRequest(BaseModel):
    checkpoint: str
    test_dir: str
    support_dir: Optional[str] = None
    support_size: Optional[int] = Field(default=None, ge=1)
    support_seed: int = 0
    support_batch: int = Field(default=10, ge=1)
    out: Optional[str] = None


class EvalResponse(BaseModel):
    resolved_config: dict
    miou: float
    per_class_iou: dict[str, float]
    excluded_classes: list[int]
    metrics_path: Optional[str] = None


class BenchRequest(BaseModel):
    checkpoints: dict[str, str]  # label -> checkpoint path
    k_values: list[int] = Field(default=[1, 5, 10, 25, 50])
    n_values: Optional[list[int]] = None  # default: each model's own way count
    image_size: int = Field(default=64, ge=32)
    repeats: int = Field(default=20, ge=1)
    warmup: int = Field(default=3, ge=0)
    support_batch: int = Field(default=10, ge=1)
    seed: int = 0
    out: str = "report"


class BenchRecordModel(BaseModel):
    model: str
    k: int
    n: int
    image_size: int
    latency_ms_median: float
    peak_bytes: int
    flops: int


class BenchResponse(BaseModel):
    resolved_config: dict
    records: list[BenchRecordModel]
    files: list[str]


class SegmentRequest(BaseModel):
    checkpoint: str
    image_png_base64: str


class SegmentResponse(BaseModel):
    resolved_config: dict
    mask_png_base64: str
    classes_present: list[int]
