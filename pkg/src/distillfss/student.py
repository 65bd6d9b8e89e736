"""Support-free student path: per-layer convolutional heads replacing the
attention blocks, reusing the shared extractor and decoder.

A student's forward accepts only the query image. There is deliberately no
parameter through which support images, masks or features could enter.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
from torch import nn

from .backbone import ModelConfig, MultiScaleFeatures, ToyBackbone, extract_features
from .datasets import MultiClassMask
from .decoder import AggregationDecoder
from .teacher import AttentionMapSet, TeacherModel, assemble_prediction


class ConvDist(nn.Module):
    """Distillation head for one attention layer.

    3x3 convolution preserving channels, ReLU, 1x1 convolution down to a
    single channel, sigmoid. The 1x1 stage starts at zero so the initial map
    is uniformly 0.5, a symmetric starting point for squared-error matching.
    """

    def __init__(self, channels: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.channels = channels
        self.conv3 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate")
        self.conv1 = nn.Conv2d(channels, 1, 1)
        with torch.no_grad():
            self.conv3.weight.normal_(0.0, 0.02, generator=generator)
            self.conv3.bias.zero_()
            self.conv1.weight.zero_()
            self.conv1.bias.zero_()

    def forward(self, feature_map: torch.Tensor) -> torch.Tensor:
        if feature_map.shape[0] != self.channels:
            raise ValueError(
                f"expected {self.channels} input channels, got {feature_map.shape[0]}"
            )
        x = torch.relu(self.conv3(feature_map.unsqueeze(0)))
        x = self.conv1(x)
        return torch.sigmoid(x)[0, 0]


class ConvDistBank(nn.Module):
    """One ConvDist per attention layer, in the fixed layer order."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        spec = config.scales
        gen = torch.Generator().manual_seed(seed)
        heads = []
        self.levels = []
        for level in spec.attention_levels:
            for _ in range(spec.layers_per_level[level]):
                heads.append(ConvDist(config.channels(level), generator=gen))
                self.levels.append(level)
        self.heads = nn.ModuleList(heads)

    def forward(self, feats: MultiScaleFeatures) -> AttentionMapSet:
        if len(feats.layers) != len(self.heads):
            raise ValueError(
                f"expected {len(self.heads)} feature layers, got {len(feats.layers)}"
            )
        maps = [head(layer.tensor) for head, layer in zip(self.heads, feats.layers)]
        return AttentionMapSet(maps=maps, levels=list(self.levels))


class StudentModel(nn.Module):
    """Single-class support-free segmenter (one ConvDist bank)."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.backbone = ToyBackbone(self.config)
        self.bank = ConvDistBank(self.config, seed=self.config.seed)
        self.decoder = AggregationDecoder(self.config)

    @classmethod
    def from_teacher(cls, teacher: TeacherModel, seed: int = 0) -> "StudentModel":
        """Build a student sharing the teacher's extractor and decoder
        instances; only the distillation heads are fresh."""
        student = cls.__new__(cls)
        nn.Module.__init__(student)
        student.config = teacher.config
        student.backbone = teacher.backbone
        student.bank = ConvDistBank(teacher.config, seed=seed)
        student.decoder = teacher.decoder
        return student

    def forward(self, query_image: torch.Tensor) -> tuple[AttentionMapSet, torch.Tensor]:
        feats = extract_features(query_image, self.backbone)
        return self.forward_from_features(feats, query_image.shape[-2:])

    def forward_from_features(
        self, feats: MultiScaleFeatures, out_size: tuple[int, int]
    ) -> tuple[AttentionMapSet, torch.Tensor]:
        maps = self.bank(feats)
        logits = self.decoder(maps.grouped_by_level(), feats.skip, out_size)
        return maps, logits


class MulticlassStudent(nn.Module):
    """N-way student: one shared extractor and decoder, one ConvDist bank per
    class, so inference cost is one extraction plus N light heads."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.backbone = ToyBackbone(self.config)
        self.banks = nn.ModuleList(
            ConvDistBank(self.config, seed=self.config.seed + c)
            for c in range(self.config.num_classes)
        )
        self.decoder = AggregationDecoder(self.config)

    @classmethod
    def from_teacher(cls, teacher: TeacherModel, seed: int = 0) -> "MulticlassStudent":
        student = cls.__new__(cls)
        nn.Module.__init__(student)
        student.config = teacher.config
        student.backbone = teacher.backbone
        student.banks = nn.ModuleList(
            ConvDistBank(teacher.config, seed=seed + c)
            for c in range(teacher.config.num_classes)
        )
        student.decoder = teacher.decoder
        return student

    @property
    def num_classes(self) -> int:
        return len(self.banks)

    def class_forward(
        self, feats: MultiScaleFeatures, class_id: int, out_size: tuple[int, int]
    ) -> tuple[AttentionMapSet, torch.Tensor]:
        maps = self.banks[class_id - 1](feats)
        logits = self.decoder(maps.grouped_by_level(), feats.skip, out_size)
        return maps, logits

    def forward(self, query_image: torch.Tensor) -> tuple[torch.Tensor, MultiClassMask]:
        feats = extract_features(query_image, self.backbone)
        out_size = query_image.shape[-2:]
        probs = []
        for class_id in range(1, self.num_classes + 1):
            _, logits = self.class_forward(feats, class_id, out_size)
            probs.append(torch.sigmoid(logits))
        stacked = torch.stack(probs)
        return stacked, assemble_prediction(stacked)


def support_free_signature(model: nn.Module) -> Sequence[str]:
    """Names of the forward inputs; used to assert support-freedom."""
    import inspect

    return [
        p
        for p in inspect.signature(type(model).forward).parameters
        if p != "self"
    ]
