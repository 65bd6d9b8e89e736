"""Multi-scale aggregation decoder shared verbatim by teacher and student.

The decoder consumes per-scale stacks of single-channel maps plus the
query-side skip features; nothing support-derived can enter this interface.
Convolutions use replicate padding: the coarsest maps are as small as 2x2,
where zero padding would distort most pixels, and uniform inputs then stay
uniform through the whole decoder.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ModelConfig


class ConvMapper(nn.Module):
    """Per-scale projection of stacked maps into a richer feature space."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        spec = config.scales
        w = config.decoder_width
        self.stacks = nn.ModuleDict()
        self.in_channels = {}
        for level in spec.attention_levels:
            l_j = spec.layers_per_level[level]
            self.in_channels[level] = l_j
            self.stacks[str(level)] = nn.Sequential(
                nn.Conv2d(l_j, w, 3, padding=1, padding_mode="replicate"),
                nn.ReLU(),
                nn.Conv2d(w, w, 3, padding=1, padding_mode="replicate"),
                nn.ReLU(),
                nn.Conv2d(w, w, 3, padding=1, padding_mode="replicate"),
                nn.ReLU(),
            )

    def forward(self, level: int, stacked: torch.Tensor) -> torch.Tensor:
        expected = self.in_channels[level]
        if stacked.shape[0] != expected:
            raise ValueError(
                f"scale level {level} expects {expected} stacked maps, "
                f"got {stacked.shape[0]}"
            )
        return self.stacks[str(level)](stacked.unsqueeze(0)).squeeze(0)


class ConvMerge(nn.Module):
    """Coarse-to-fine fusion: entry convolution at the coarsest scale, then
    repeated upsample-concatenate-convolve steps down to the finest scale."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        spec = config.scales
        w = config.decoder_width
        self.levels = sorted(spec.attention_levels)  # fine -> coarse
        self.upsample_factor = spec.base
        self.entry = nn.Conv2d(w, w, 3, padding=1, padding_mode="replicate")
        self.steps = nn.ModuleDict(
            {str(level): nn.Conv2d(2 * w, w, 3, padding=1, padding_mode="replicate") for level in self.levels[:-1]}
        )

    def forward(self, mapped: dict[int, torch.Tensor]) -> torch.Tensor:
        for level in self.levels:
            if level not in mapped:
                raise ValueError(f"missing mapped features for scale level {level}")
        coarsest = self.levels[-1]
        x = F.relu(self.entry(mapped[coarsest].unsqueeze(0)))
        for level in reversed(self.levels[:-1]):
            fine = mapped[level].unsqueeze(0)
            up = F.interpolate(
                x, size=fine.shape[-2:], mode="bilinear", align_corners=False
            )
            x = F.relu(self.steps[str(level)](torch.cat([up, fine], dim=1)))
        return x.squeeze(0)


class AggregationDecoder(nn.Module):
    """ConvMapper -> ConvMerge -> skip-connected Mixer -> Classifier."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        w = config.decoder_width
        skip_ch = config.channels(config.scales.skip_level)
        self.mapper = ConvMapper(config)
        self.merge = ConvMerge(config)
        self.skip_conv = nn.Conv2d(skip_ch, w, 3, padding=1, padding_mode="replicate")
        self.mixer = nn.Sequential(
            nn.Conv2d(2 * w, w, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(),
        )
        self.classifier = nn.Conv2d(w, 1, 1)

    def forward(
        self,
        grouped_maps: dict[int, torch.Tensor],
        query_skip: torch.Tensor,
        out_size: tuple[int, int],
    ) -> torch.Tensor:
        """Decode per-scale map stacks into a full-resolution logit map.

        The signature admits only map stacks and query-derived skip features;
        there is no input through which support features could reach it.
        """
        mapped = {
            level: self.mapper(level, stacked) for level, stacked in grouped_maps.items()
        }
        merged = self.merge(mapped).unsqueeze(0)
        skip = self.skip_conv(query_skip.unsqueeze(0))
        up = F.interpolate(
            merged, size=skip.shape[-2:], mode="bilinear", align_corners=False
        )
        x = self.mixer(torch.cat([up, skip], dim=1))
        logits = self.classifier(x)
        logits = F.interpolate(
            logits, size=out_size, mode="bilinear", align_corners=False
        )
        return logits[0, 0]
