import math

import numpy as np
import pytest
import torch

from distillfss import ModelConfig, TeacherModel, binarize_mask, build_support_set
from distillfss.backbone import TokenSequence, positional_encoding
from distillfss.datasets import MultiClassMask
from distillfss.teacher import (
    ScaleProjection,
    assemble_prediction,
    average_map_sets,
    cross_attention,
    multi_shot_keys,
)
from distillfss import complexity


def naive_attention_map(query_tokens, support_tokens, mask_col, wq, wk, key_dim):
    """Independent per-pixel double-loop computation of one attention map."""
    nq, ns = query_tokens.shape[0], support_tokens.shape[0]
    out = torch.zeros(nq, dtype=torch.float64)
    for i in range(nq):
        q = query_tokens[i] @ wq
        scores = []
        for j in range(ns):
            k = support_tokens[j] @ wk
            scores.append(float(q @ k) / math.sqrt(key_dim))
        top = max(scores)
        exps = [math.exp(s - top) for s in scores]
        z = sum(exps)
        out[i] = sum((e / z) * float(mask_col[j, 0]) for j, e in enumerate(exps))
    return out


def make_seq(tokens, h, w):
    return TokenSequence(tokens=tokens, height=h, width=w)


class TestCrossAttention:
    def test_all_one_mask_gives_identically_one(self):
        gen = torch.Generator().manual_seed(0)
        proj = ScaleProjection(channels=8, key_dim=8)
        query = make_seq(torch.randn(16, 8, generator=gen), 4, 4)
        support = torch.randn(16, 8, generator=gen)
        out = cross_attention(query, support, torch.ones(16, 1), proj)
        assert torch.allclose(out, torch.ones(4, 4), atol=1e-6)

    def test_all_zero_mask_gives_identically_zero(self):
        gen = torch.Generator().manual_seed(1)
        proj = ScaleProjection(channels=8)
        query = make_seq(torch.randn(16, 8, generator=gen), 4, 4)
        support = torch.randn(16, 8, generator=gen)
        out = cross_attention(query, support, torch.zeros(16, 1), proj)
        assert torch.equal(out, torch.zeros(4, 4))

    def test_binary_mask_keeps_outputs_in_unit_interval(self):
        gen = torch.Generator().manual_seed(2)
        for trial in range(5):
            proj = ScaleProjection(channels=8)
            query = make_seq(torch.randn(16, 8, generator=gen) * 3, 4, 4)
            support = torch.randn(16, 8, generator=gen) * 3
            mask = (torch.rand(16, 1, generator=gen) > 0.5).float()
            out = cross_attention(query, support, mask, proj)
            assert out.min() >= 0.0
            assert out.max() <= 1.0

    @pytest.mark.parametrize("key_dim", [4, 16])
    def test_matches_double_loop_oracle(self, key_dim):
        gen = torch.Generator().manual_seed(10 + key_dim)
        worst = 0.0
        for trial in range(25):
            channels = key_dim
            proj = ScaleProjection(channels=channels, key_dim=key_dim).double()
            qt = torch.randn(64, channels, generator=gen, dtype=torch.float64)
            st = torch.randn(64, channels, generator=gen, dtype=torch.float64)
            mask = (torch.rand(64, 1, generator=gen) > 0.4).double()
            with torch.no_grad():
                out = cross_attention(make_seq(qt, 8, 8), st, mask, proj)
            expected = naive_attention_map(
                qt,
                st,
                mask,
                proj.query_proj.weight.detach().T,
                proj.key_proj.weight.detach().T,
                key_dim,
            ).reshape(8, 8)
            worst = max(worst, float((out - expected).abs().max()))
        assert worst < 1e-6

    def test_mismatched_mask_rows_named(self):
        proj = ScaleProjection(channels=8)
        query = make_seq(torch.randn(16, 8), 4, 4)
        with pytest.raises(ValueError, match="mask column rows"):
            cross_attention(query, torch.randn(16, 8), torch.ones(12, 1), proj)

    def test_mismatched_channels_named(self):
        proj = ScaleProjection(channels=8)
        query = make_seq(torch.randn(16, 4), 4, 4)
        with pytest.raises(ValueError, match="channels"):
            cross_attention(query, torch.randn(16, 8), torch.ones(16, 1), proj)


class TestMultiShotKeys:
    def test_single_shot_passthrough(self):
        seq = make_seq(torch.randn(16, 8), 4, 4)
        mask = torch.ones(16, 1)
        tokens, col = multi_shot_keys([seq], [mask])
        assert tokens is seq.tokens
        assert col is mask

    def test_three_shot_lengths(self):
        seqs = [make_seq(torch.randn(16, 8), 4, 4) for _ in range(3)]
        masks = [torch.ones(16, 1) for _ in range(3)]
        tokens, col = multi_shot_keys(seqs, masks)
        assert tokens.shape == (48, 8)
        assert col.shape == (48, 1)

    def test_duplicated_shot_equals_single_shot(self):
        gen = torch.Generator().manual_seed(3)
        proj = ScaleProjection(channels=8)
        query = make_seq(torch.randn(16, 8, generator=gen), 4, 4)
        support = make_seq(torch.randn(16, 8, generator=gen), 4, 4)
        mask = (torch.rand(16, 1, generator=gen) > 0.5).float()
        with torch.no_grad():
            single = cross_attention(query, *multi_shot_keys([support], [mask]), proj)
            double = cross_attention(
                query, *multi_shot_keys([support, support], [mask, mask]), proj
            )
        assert float((single - double).abs().max()) < 1e-6


class TestTeacherForward:
    def test_logit_map_matches_query_size(self, teacher, tiny_dataset):
        sup = build_support_set(tiny_dataset, 3, seed=0)
        image, _ = tiny_dataset.items[4]
        maps, logits = teacher.forward_class(image, sup, 1)
        assert logits.shape == image.shape[-2:]
        assert len(maps.maps) == teacher.config.scales.total_layers

    def test_support_order_permutation_leaves_maps_unchanged(self, teacher, tiny_dataset):
        sup = build_support_set(tiny_dataset, 4, seed=0)
        image, _ = tiny_dataset.items[5]
        with torch.no_grad():
            maps_a, _ = teacher.forward_class(image, sup.entries, 1)
            maps_b, _ = teacher.forward_class(image, tuple(reversed(sup.entries)), 1)
        for a, b in zip(maps_a.maps, maps_b.maps):
            assert float((a - b).abs().max()) < 1e-6

    def test_zero_support_mask_zeroes_every_map(self, teacher):
        # entries whose masks contain class 1 only: binarizing class 2 is empty
        entries = []
        for _ in range(2):
            grid = torch.zeros(64, 64, dtype=torch.long)
            grid[8:20, 8:20] = 1
            entries.append(
                (torch.rand(3, 64, 64), MultiClassMask(grid=grid, num_classes=2))
            )
        with torch.no_grad():
            maps, _ = teacher.forward_class(torch.rand(3, 64, 64), entries, 2)
        for m in maps.maps:
            assert torch.equal(m, torch.zeros_like(m))

    def test_grouped_view_is_pure_reshape(self, teacher, tiny_dataset):
        sup = build_support_set(tiny_dataset, 2, seed=1)
        image, _ = tiny_dataset.items[0]
        with torch.no_grad():
            maps, _ = teacher.forward_class(image, sup, 1)
        grouped = maps.grouped_by_level()
        flat = [m for level in sorted(grouped) for m in grouped[level]]
        for original, regrouped in zip(maps.maps, flat):
            assert torch.equal(original, regrouped)

    def test_support_batching_identical_batches_matches_unbatched(self, teacher, tiny_dataset):
        sup = build_support_set(tiny_dataset, 2, seed=2)
        entries = sup.entries + sup.entries  # two identical batches of 2
        image, _ = tiny_dataset.items[3]
        with torch.no_grad():
            maps_batched, _ = teacher.forward_class(image, entries, 1, support_batch=2)
            maps_full, _ = teacher.forward_class(image, entries, 1)
        for a, b in zip(maps_batched.maps, maps_full.maps):
            assert float((a - b).abs().max()) < 1e-6


class TestAssembly:
    def test_single_class_thresholds_at_half(self):
        probs = torch.tensor([[[0.4, 0.6], [0.5, 0.9]]])
        pred = assemble_prediction(probs)
        assert pred.grid.tolist() == [[0, 1], [0, 1]]

    def test_all_below_half_is_background(self):
        probs = torch.full((3, 2, 2), 0.49)
        pred = assemble_prediction(probs)
        assert pred.grid.sum() == 0

    def test_tie_breaks_to_lowest_class(self):
        probs = torch.tensor([[[0.7]], [[0.7]]])
        pred = assemble_prediction(probs)
        assert pred.grid.tolist() == [[1]]

    def test_argmax_above_half_wins(self):
        probs = torch.tensor([[[0.6]], [[0.8]]])
        pred = assemble_prediction(probs)
        assert pred.grid.tolist() == [[2]]


class TestMapAveraging:
    def test_average_of_identical_sets_is_identity(self, teacher, tiny_dataset):
        sup = build_support_set(tiny_dataset, 2, seed=3)
        image, _ = tiny_dataset.items[1]
        with torch.no_grad():
            maps, _ = teacher.forward_class(image, sup, 1)
        merged = average_map_sets([maps, maps])
        for a, b in zip(maps.maps, merged.maps):
            assert torch.allclose(a, b)


class TestAttentionCostScaling:
    def test_flops_linear_in_shots(self):
        config = ModelConfig(num_classes=1)
        ks = [1, 2, 4, 8]
        flops = [
            complexity.teacher_class_flops(config, 64, k_shots=k) for k in ks
        ]
        slope, intercept = np.polyfit(ks, flops, 1)
        predicted = [slope * k + intercept for k in ks]
        residual = sum((f - p) ** 2 for f, p in zip(flops, predicted))
        total = sum((f - np.mean(flops)) ** 2 for f in flops)
        assert 1.0 - residual / total > 0.99
        assert slope > 0
