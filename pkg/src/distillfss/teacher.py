"""Dense cross query-and-support attention and the full teacher forward pass.

Each attention layer projects flattened query/support features through
per-scale query/key matrices, row-softmaxes the scaled similarity and
multiplies by the flattened binary support mask, yielding one single-channel
map per layer in [0, 1]. The maps, grouped by scale, drive the shared
aggregation decoder together with query-side skip features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import torch
from torch import nn

from .backbone import (
    ModelConfig,
    MultiScaleFeatures,
    TokenSequence,
    ToyBackbone,
    downsample_mask,
    extract_features,
    flatten_with_pe,
    init_parameters,
)
from .datasets import MultiClassMask, SupportSet, binarize_mask
from .decoder import AggregationDecoder

SupportEntries = Sequence[tuple[torch.Tensor, MultiClassMask]]


class ScaleProjection(nn.Module):
    """Learnable query/key projections shared by all layers of one scale."""

    def __init__(self, channels: int, key_dim: Optional[int] = None):
        super().__init__()
        self.channels = channels
        self.key_dim = key_dim if key_dim is not None else channels
        self.query_proj = nn.Linear(channels, self.key_dim, bias=False)
        self.key_proj = nn.Linear(channels, self.key_dim, bias=False)


class CrossAttentionBank(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.projections = nn.ModuleDict(
            {
                str(level): ScaleProjection(config.channels(level))
                for level in config.scales.attention_levels
            }
        )

    def at_level(self, level: int) -> ScaleProjection:
        return self.projections[str(level)]


@dataclass
class AttentionMapSet:
    """Per-layer single-channel maps in the fixed layer order."""

    maps: list[torch.Tensor]  # each (H_j, W_j)
    levels: list[int]

    def __post_init__(self):
        if len(self.maps) != len(self.levels):
            raise ValueError("one level per map required")

    def grouped_by_level(self) -> dict[int, torch.Tensor]:
        """Stack maps of one scale into (L_j, H_j, W_j); a pure reshaping."""
        grouped: dict[int, list[torch.Tensor]] = {}
        for level, m in zip(self.levels, self.maps):
            grouped.setdefault(level, []).append(m)
        return {level: torch.stack(ms) for level, ms in grouped.items()}

    def detached(self) -> "AttentionMapSet":
        return AttentionMapSet([m.detach() for m in self.maps], list(self.levels))


def average_map_sets(sets: Sequence[AttentionMapSet]) -> AttentionMapSet:
    """Plain mean of aligned map sets (used to merge support batches)."""
    if not sets:
        raise ValueError("cannot average zero map sets")
    first = sets[0]
    if len(sets) == 1:
        return first
    maps = []
    for i in range(len(first.maps)):
        maps.append(torch.stack([s.maps[i] for s in sets]).mean(dim=0))
    return AttentionMapSet(maps=maps, levels=list(first.levels))


def multi_shot_keys(
    token_seqs: Sequence[TokenSequence], mask_columns: Sequence[torch.Tensor]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Concatenate per-shot support tokens and mask columns in support order."""
    if len(token_seqs) != len(mask_columns):
        raise ValueError("one mask column per support shot required")
    if len(token_seqs) == 1:
        return token_seqs[0].tokens, mask_columns[0]
    return (
        torch.cat([s.tokens for s in token_seqs], dim=0),
        torch.cat(list(mask_columns), dim=0),
    )


def cross_attention(
    query: TokenSequence,
    support_tokens: torch.Tensor,
    support_mask: torch.Tensor,
    projection: ScaleProjection,
) -> torch.Tensor:
    """One attention layer: softmax(Q K^T / sqrt(d_k)) applied to the mask.

    Returns the (H_j, W_j) map. With a binary mask each output pixel is a
    convex combination of {0, 1}, hence in [0, 1].
    """
    if support_tokens.shape[0] != support_mask.shape[0]:
        raise ValueError(
            f"support token rows ({support_tokens.shape[0]}) != "
            f"mask column rows ({support_mask.shape[0]})"
        )
    if query.tokens.shape[1] != projection.channels:
        raise ValueError(
            f"query token channels ({query.tokens.shape[1]}) != "
            f"projection channels ({projection.channels})"
        )
    if support_tokens.shape[1] != projection.channels:
        raise ValueError(
            f"support token channels ({support_tokens.shape[1]}) != "
            f"projection channels ({projection.channels})"
        )
    q = projection.query_proj(query.tokens)
    k = projection.key_proj(support_tokens)
    scores = (q @ k.T) / math.sqrt(projection.key_dim)
    weights = torch.softmax(scores, dim=-1)
    column = weights @ support_mask.to(weights.dtype)
    return column.reshape(query.height, query.width)


@dataclass
class EntryCache:
    """Precomputed per-image tensors for loops where the extractor is frozen."""

    image: torch.Tensor
    mask: MultiClassMask
    feats: MultiScaleFeatures
    tokens: list[TokenSequence]  # per layer
    mask_columns: dict[tuple[int, int], torch.Tensor]  # (class_id, level) -> (N_j, 1)


def assemble_prediction(probs: torch.Tensor) -> MultiClassMask:
    """Turn per-class foreground probabilities (N, H, W) into a class grid.

    A pixel is background unless some class exceeds 0.5; ties go to the
    lowest class index.
    """
    best, idx = probs.max(dim=0)
    grid = torch.where(best > 0.5, idx + 1, torch.zeros_like(idx))
    return MultiClassMask(grid=grid, num_classes=probs.shape[0])


class TeacherModel(nn.Module):
    """Support-conditioned segmenter: extractor + attention + shared decoder."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.backbone = ToyBackbone(self.config)
        self.attention = CrossAttentionBank(self.config)
        self.decoder = AggregationDecoder(self.config)
        init_parameters(self, self.config.seed)

    # -- building blocks -------------------------------------------------

    def extract(self, image: torch.Tensor) -> MultiScaleFeatures:
        return extract_features(image, self.backbone)

    def layer_tokens(self, feats: MultiScaleFeatures) -> list[TokenSequence]:
        return [flatten_with_pe(layer.tensor) for layer in feats.layers]

    def mask_columns(
        self, binary: torch.Tensor, dtype: torch.dtype
    ) -> dict[int, torch.Tensor]:
        spec = self.config.scales
        return {
            level: downsample_mask(binary.to(dtype), spec.stride(level))
            for level in spec.attention_levels
        }

    def attention_maps(
        self,
        query_tokens: Sequence[TokenSequence],
        support_tokens: Sequence[Sequence[TokenSequence]],
        support_mask_columns: Sequence[Mapping[int, torch.Tensor]],
    ) -> AttentionMapSet:
        """Compute every layer map against the concatenated multi-shot keys."""
        spec = self.config.scales
        levels = [lvl for lvl in spec.attention_levels for _ in range(spec.layers_per_level[lvl])]
        maps = []
        for layer_idx, level in enumerate(levels):
            shot_tokens = [tokens[layer_idx] for tokens in support_tokens]
            shot_masks = [cols[level] for cols in support_mask_columns]
            keys, mask = multi_shot_keys(shot_tokens, shot_masks)
            maps.append(
                cross_attention(
                    query_tokens[layer_idx], keys, mask, self.attention.at_level(level)
                )
            )
        return AttentionMapSet(maps=maps, levels=levels)

    def decode(
        self,
        maps: AttentionMapSet,
        query_skip: torch.Tensor,
        out_size: tuple[int, int],
    ) -> torch.Tensor:
        return self.decoder(maps.grouped_by_level(), query_skip, out_size)

    def build_entry_caches(
        self, entries: SupportEntries, classes: Sequence[int]
    ) -> list[EntryCache]:
        """Precompute features, tokens and mask columns for a frozen extractor."""
        caches = []
        with torch.no_grad():
            for image, mask in entries:
                feats = self.extract(image)
                tokens = self.layer_tokens(feats)
                columns = {}
                for class_id in classes:
                    cols = self.mask_columns(
                        binarize_mask(mask, class_id), tokens[0].tokens.dtype
                    )
                    for level, col in cols.items():
                        columns[(class_id, level)] = col
                caches.append(
                    EntryCache(
                        image=image, mask=mask, feats=feats, tokens=tokens,
                        mask_columns=columns,
                    )
                )
        return caches

    def maps_from_caches(
        self,
        query_cache: EntryCache,
        support_caches: Sequence[EntryCache],
        class_id: int,
    ) -> AttentionMapSet:
        spec = self.config.scales
        columns = [
            {lvl: c.mask_columns[(class_id, lvl)] for lvl in spec.attention_levels}
            for c in support_caches
        ]
        return self.attention_maps(
            query_cache.tokens, [c.tokens for c in support_caches], columns
        )

    # -- full forwards ----------------------------------------------------

    def forward_class(
        self,
        query_image: torch.Tensor,
        support: SupportSet | SupportEntries,
        class_id: int,
        support_batch: Optional[int] = None,
    ) -> tuple[AttentionMapSet, torch.Tensor]:
        """One-vs-all forward for a single class.

        Large support sets can be processed in chunks of ``support_batch``
        shots; the per-chunk attention maps are averaged before decoding.
        """
        entries = support.entries if isinstance(support, SupportSet) else support
        if class_id < 1:
            raise ValueError(f"class_id must be >= 1, got {class_id}")
        query_feats = self.extract(query_image)
        query_tokens = self.layer_tokens(query_feats)
        dtype = query_tokens[0].tokens.dtype

        chunk = support_batch if support_batch else len(entries)
        map_sets = []
        for start in range(0, len(entries), chunk):
            part = entries[start : start + chunk]
            tokens, columns = [], []
            for image, mask in part:
                feats = self.extract(image)
                tokens.append(self.layer_tokens(feats))
                columns.append(self.mask_columns(binarize_mask(mask, class_id), dtype))
            map_sets.append(self.attention_maps(query_tokens, tokens, columns))
        maps = average_map_sets(map_sets)
        logits = self.decode(maps, query_feats.skip, query_image.shape[-2:])
        return maps, logits

    def forward_multiclass(
        self,
        query_image: torch.Tensor,
        support: SupportSet | SupportEntries,
        num_classes: Optional[int] = None,
        support_batch: Optional[int] = None,
    ) -> tuple[torch.Tensor, MultiClassMask]:
        """One-vs-all over every class; support features are extracted once
        per chunk and reused across classes."""
        entries = support.entries if isinstance(support, SupportSet) else support
        if num_classes is None:
            if isinstance(support, SupportSet):
                num_classes = support.num_classes
            else:
                num_classes = entries[0][1].num_classes
        query_feats = self.extract(query_image)
        query_tokens = self.layer_tokens(query_feats)
        dtype = query_tokens[0].tokens.dtype

        chunk = support_batch if support_batch else len(entries)
        per_class_sets: dict[int, list[AttentionMapSet]] = {
            c: [] for c in range(1, num_classes + 1)
        }
        for start in range(0, len(entries), chunk):
            part = entries[start : start + chunk]
            tokens = []
            feats_part = []
            for image, mask in part:
                feats = self.extract(image)
                feats_part.append(feats)
                tokens.append(self.layer_tokens(feats))
            for class_id in range(1, num_classes + 1):
                columns = [
                    self.mask_columns(binarize_mask(mask, class_id), dtype)
                    for _, mask in part
                ]
                per_class_sets[class_id].append(
                    self.attention_maps(query_tokens, tokens, columns)
                )

        probs = []
        for class_id in range(1, num_classes + 1):
            maps = average_map_sets(per_class_sets[class_id])
            logits = self.decode(maps, query_feats.skip, query_image.shape[-2:])
            probs.append(torch.sigmoid(logits))
        stacked = torch.stack(probs)
        return stacked, assemble_prediction(stacked)

    def forward(self, episode_query: torch.Tensor, support: SupportSet):
        return self.forward_multiclass(episode_query, support)
