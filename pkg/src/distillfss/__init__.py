"""Few-shot segmentation with a dense cross-attention teacher distilled into
support-free convolutional students."""

__version__ = "0.1.0"

from .backbone import ModelConfig, ScaleSpec, ToyBackbone
from .datasets import (
    Episode,
    MultiClassMask,
    SegDataset,
    SupportSet,
    binarize_mask,
    build_support_set,
    load_dataset,
    save_dataset,
    synth_shapes,
)
from .student import ConvDist, MulticlassStudent, StudentModel
from .teacher import AttentionMapSet, TeacherModel, cross_attention
from .training import (
    Block,
    TrainConfig,
    UnfreezePolicy,
    composite_loss,
    distill_fss,
    distill_loss,
    focal_loss,
    train_base,
    transfer_fss,
)

__all__ = [
    "AttentionMapSet",
    "Block",
    "ConvDist",
    "Episode",
    "ModelConfig",
    "MulticlassStudent",
    "MultiClassMask",
    "ScaleSpec",
    "SegDataset",
    "StudentModel",
    "SupportSet",
    "TeacherModel",
    "ToyBackbone",
    "TrainConfig",
    "UnfreezePolicy",
    "binarize_mask",
    "build_support_set",
    "composite_loss",
    "cross_attention",
    "distill_fss",
    "distill_loss",
    "focal_loss",
    "load_dataset",
    "save_dataset",
    "synth_shapes",
    "train_base",
    "transfer_fss",
]
