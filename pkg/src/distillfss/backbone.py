"""Multi-scale feature extraction shared by the query and support paths.

The toy backbone is a small strided CNN standing in for a pretrained
hierarchical extractor: a stem down to 1/4 resolution (reserved for decoder
skip connections) followed by one stage per coarser scale, each emitting a
configurable number of feature maps ("layers") used by the attention blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_LAYERS_PER_LEVEL = {2: 0, 3: 2, 4: 2, 5: 2}
DEFAULT_WIDTHS = {1: 16, 2: 24, 3: 32, 4: 48, 5: 64}


@dataclass(frozen=True)
class ScaleSpec:
    """Which scales 1/base**level the extractor serves, and how many feature
    maps feed attention at each of them. The finest level carries no
    attention layers; it is reserved for decoder skip connections."""

    base: int = 2
    min_level: int = 2
    max_level: int = 5
    layers_per_level: Mapping[int, int] = field(
        default_factory=lambda: dict(DEFAULT_LAYERS_PER_LEVEL)
    )

    def __post_init__(self):
        if self.min_level >= self.max_level:
            raise ValueError("min_level must be below max_level")
        for level in range(self.min_level, self.max_level + 1):
            count = self.layers_per_level.get(level)
            if count is None:
                raise ValueError(f"layers_per_level missing level {level}")
            if level == self.min_level:
                if count != 0:
                    raise ValueError("the skip level must have zero attention layers")
            elif count < 1:
                raise ValueError(f"level {level} needs at least one layer")

    @property
    def skip_level(self) -> int:
        return self.min_level

    @property
    def attention_levels(self) -> list[int]:
        return [
            lvl
            for lvl in range(self.min_level, self.max_level + 1)
            if self.layers_per_level[lvl] > 0
        ]

    @property
    def total_layers(self) -> int:
        return sum(self.layers_per_level[lvl] for lvl in self.attention_levels)

    def stride(self, level: int) -> int:
        return self.base**level


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters that fix the full architecture (all components)."""

    num_classes: int = 1
    in_channels: int = 3
    scales: ScaleSpec = field(default_factory=ScaleSpec)
    widths: Mapping[int, int] = field(default_factory=lambda: dict(DEFAULT_WIDTHS))
    decoder_width: int = 64
    seed: int = 0

    def channels(self, level: int) -> int:
        return self.widths[level]


@dataclass
class LayerFeature:
    index: int  # position in the fixed layer order
    level: int  # scale is 1/base**level
    tensor: torch.Tensor  # (C, H, W)


@dataclass
class MultiScaleFeatures:
    layers: list[LayerFeature]
    skip: torch.Tensor  # high-resolution maps reserved for the decoder

    def by_level(self) -> dict[int, list[LayerFeature]]:
        grouped: dict[int, list[LayerFeature]] = {}
        for layer in self.layers:
            grouped.setdefault(layer.level, []).append(layer)
        return grouped


@dataclass(frozen=True)
class TokenSequence:
    tokens: torch.Tensor  # (H*W, C), row-major over the spatial grid
    height: int
    width: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.height * self.width:
            raise ValueError(
                f"token count {self.tokens.shape[0]} != {self.height}x{self.width}"
            )


class ToyBackbone(nn.Module):
    """Stem to the skip level, then one stride-2 stage per attention level.

    About 120k parameters at the default widths (the tests assert the count
    stays under 1e6 so every acceptance run finishes on CPU).
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        spec = self.config.scales
        widths = self.config.widths
        in_ch = self.config.in_channels

        stem = []
        ch = in_ch
        for level in range(1, spec.skip_level + 1):
            stem.append(nn.Conv2d(ch, widths[level], 3, stride=2, padding=1))
            ch = widths[level]
        self.stem = nn.ModuleList(stem)

        self.stages = nn.ModuleDict()
        for level in spec.attention_levels:
            convs = [nn.Conv2d(ch, widths[level], 3, stride=2, padding=1)]
            for _ in range(spec.layers_per_level[level] - 1):
                convs.append(nn.Conv2d(widths[level], widths[level], 3, padding=1))
            ch = widths[level]
            self.stages[str(level)] = nn.ModuleList(convs)

        init_parameters(self, self.config.seed)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, image: torch.Tensor) -> MultiScaleFeatures:
        spec = self.config.scales
        x = image.unsqueeze(0)
        for conv in self.stem:
            x = F.relu(conv(x))
        skip = x.squeeze(0)

        layers: list[LayerFeature] = []
        index = 0
        for level in spec.attention_levels:
            for conv in self.stages[str(level)]:
                x = F.relu(conv(x))
                layers.append(LayerFeature(index=index, level=level, tensor=x.squeeze(0)))
                index += 1
        return MultiScaleFeatures(layers=layers, skip=skip)


def extract_features(image: torch.Tensor, backbone: ToyBackbone) -> MultiScaleFeatures:
    """Run the shared extractor after validating the input geometry."""
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {tuple(image.shape)}")
    spec = backbone.config.scales
    multiple = spec.stride(spec.max_level)
    h, w = image.shape[-2:]
    if h % multiple or w % multiple:
        raise ValueError(
            f"image size {h}x{w} must be a multiple of {multiple}"
        )
    return backbone(image)


# The encoding grid is quantized to multiples of 2**-16 so that adding it to
# a token and subtracting it again is lossless for moderately scaled features.
_PE_QUANT = 2.0**16


@lru_cache(maxsize=64)
def _positional_encoding_f64(height: int, width: int, channels: int) -> torch.Tensor:
    if channels % 4:
        raise ValueError(f"positional encoding needs channels % 4 == 0, got {channels}")
    half = channels // 2
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=torch.float64),
        torch.arange(width, dtype=torch.float64),
        indexing="ij",
    )
    pe = torch.zeros(height * width, channels, dtype=torch.float64)
    for offset, coord in ((0, ys.reshape(-1)), (half, xs.reshape(-1))):
        for i in range(half // 2):
            freq = 1.0 / (10000.0 ** (2.0 * i / half))
            pe[:, offset + 2 * i] = torch.sin(coord * freq)
            pe[:, offset + 2 * i + 1] = torch.cos(coord * freq)
    return torch.round(pe * _PE_QUANT) / _PE_QUANT


def positional_encoding(
    height: int, width: int, channels: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding of shape (H*W, C), row-major."""
    return _positional_encoding_f64(height, width, channels).to(dtype)


def flatten_with_pe(feature_map: torch.Tensor) -> TokenSequence:
    """Flatten a (C, H, W) map row-major into (H*W, C) tokens plus encoding."""
    if feature_map.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {tuple(feature_map.shape)}")
    c, h, w = feature_map.shape
    tokens = feature_map.reshape(c, h * w).T
    pe = positional_encoding(h, w, c, dtype=feature_map.dtype)
    return TokenSequence(tokens=tokens + pe, height=h, width=w)


def unflatten_tokens(seq: TokenSequence) -> torch.Tensor:
    """Restore the (C, H, W) layout of a token sequence (encoding included)."""
    return seq.tokens.T.reshape(-1, seq.height, seq.width)


def downsample_mask(mask: torch.Tensor, stride: int) -> torch.Tensor:
    """Nearest-neighbor downsample of a binary (H, W) mask to a flat column.

    Returns an (N_j, 1) column with values still in {0, 1}, where
    N_j = ceil(H/stride) * ceil(W/stride).
    """
    if mask.ndim != 2:
        raise ValueError(f"expected a (H, W) mask, got shape {tuple(mask.shape)}")
    vals = torch.unique(mask)
    if not bool(((vals == 0) | (vals == 1)).all()):
        raise ValueError("mask must be binary")
    h, w = mask.shape
    target = (math.ceil(h / stride), math.ceil(w / stride))
    small = F.interpolate(
        mask.to(torch.float32)[None, None], size=target, mode="nearest"
    )[0, 0]
    return small.reshape(-1, 1).to(mask.dtype if mask.is_floating_point() else torch.float32)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Re-initialize every parameter from a private generator.

    Weights use He-uniform (variance-preserving through ReLU stacks, which
    keeps token magnitudes comparable to the positional encoding), biases
    zero. A local generator keeps construction independent of global RNG
    state, so two models built with the same seed are bitwise identical.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, param in module.named_parameters():
        if param.ndim > 1:
            fan_in = param.shape[1] * (param[0, 0].numel() if param.ndim > 2 else 1)
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                param.uniform_(-bound, bound, generator=gen)
        else:
            with torch.no_grad():
                param.zero_()
