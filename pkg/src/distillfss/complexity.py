"""Analytic forward-cost model for the exact architectures in this package.

FLOPs are integers derived from the configuration (multiply-accumulate = 2),
so they are exactly reproducible: the teacher's count is linear in the shot
count K, the student's count never references K at all.
"""

from __future__ import annotations

import math

from .backbone import ModelConfig

RELU_PER_ELEM = 1
SOFTMAX_PER_ELEM = 5  # exp, running max/subtract, sum, divide
BILINEAR_PER_ELEM = 8  # 4 taps: weights, multiplies, adds
SIGMOID_PER_ELEM = 4


def _conv(in_ch: int, out_ch: int, kernel: int, out_h: int, out_w: int) -> int:
    macs = in_ch * kernel * kernel * out_ch * out_h * out_w
    bias = out_ch * out_h * out_w
    return 2 * macs + bias


def _grid(image_size: int, config: ModelConfig, level: int) -> tuple[int, int]:
    side = math.ceil(image_size / config.scales.stride(level))
    return side, side


def backbone_flops(config: ModelConfig, image_size: int) -> int:
    spec = config.scales
    total = 0
    in_ch = config.in_channels
    for level in range(1, spec.skip_level + 1):
        h, w = _grid(image_size, config, level)
        out_ch = config.channels(level)
        total += _conv(in_ch, out_ch, 3, h, w) + RELU_PER_ELEM * out_ch * h * w
        in_ch = out_ch
    for level in spec.attention_levels:
        h, w = _grid(image_size, config, level)
        out_ch = config.channels(level)
        total += _conv(in_ch, out_ch, 3, h, w) + RELU_PER_ELEM * out_ch * h * w
        for _ in range(spec.layers_per_level[level] - 1):
            total += _conv(out_ch, out_ch, 3, h, w) + RELU_PER_ELEM * out_ch * h * w
        in_ch = out_ch
    return total


def _attention_layer_flops(
    config: ModelConfig, image_size: int, level: int, support_tokens: int
) -> int:
    h, w = _grid(image_size, config, level)
    n_query = h * w
    channels = config.channels(level)
    key_dim = channels
    total = 2 * n_query * channels * key_dim  # query projection
    total += 2 * support_tokens * channels * key_dim  # key projection
    total += 2 * n_query * support_tokens * key_dim + n_query * support_tokens  # scores
    total += SOFTMAX_PER_ELEM * n_query * support_tokens
    total += 2 * n_query * support_tokens  # mask column product
    return total


def _pe_flops(config: ModelConfig, image_size: int) -> int:
    spec = config.scales
    total = 0
    for level in spec.attention_levels:
        h, w = _grid(image_size, config, level)
        total += spec.layers_per_level[level] * h * w * config.channels(level)
    return total


def decoder_flops(config: ModelConfig, image_size: int) -> int:
    spec = config.scales
    width = config.decoder_width
    total = 0
    for level in spec.attention_levels:
        h, w = _grid(image_size, config, level)
        l_j = spec.layers_per_level[level]
        total += _conv(l_j, width, 3, h, w) + RELU_PER_ELEM * width * h * w
        total += 2 * (_conv(width, width, 3, h, w) + RELU_PER_ELEM * width * h * w)
    levels = sorted(spec.attention_levels)
    h, w = _grid(image_size, config, levels[-1])
    total += _conv(width, width, 3, h, w) + RELU_PER_ELEM * width * h * w
    for level in reversed(levels[:-1]):
        h, w = _grid(image_size, config, level)
        total += BILINEAR_PER_ELEM * width * h * w  # upsample coarser map
        total += _conv(2 * width, width, 3, h, w) + RELU_PER_ELEM * width * h * w
    sh, sw = _grid(image_size, config, spec.skip_level)
    total += _conv(config.channels(spec.skip_level), width, 3, sh, sw)
    total += BILINEAR_PER_ELEM * width * sh * sw  # merged features up to skip size
    total += _conv(2 * width, width, 3, sh, sw) + RELU_PER_ELEM * width * sh * sw
    total += 2 * (_conv(width, width, 3, sh, sw) + RELU_PER_ELEM * width * sh * sw)
    total += _conv(width, 1, 1, sh, sw)
    total += BILINEAR_PER_ELEM * image_size * image_size  # logits to full size
    return total


def teacher_class_flops(
    config: ModelConfig, image_size: int, k_shots: int, support_batch: int | None = None
) -> int:
    """One one-vs-all teacher forward: query + K support extractions, dense
    attention over K*N_j keys (chunked), decoding of the averaged maps."""
    spec = config.scales
    total = (1 + k_shots) * backbone_flops(config, image_size)
    total += (1 + k_shots) * _pe_flops(config, image_size)
    chunk = support_batch if support_batch else k_shots
    chunks = [min(chunk, k_shots - s) for s in range(0, k_shots, chunk)]
    for level in spec.attention_levels:
        h, w = _grid(image_size, config, level)
        for _ in range(spec.layers_per_level[level]):
            for size in chunks:
                total += _attention_layer_flops(config, image_size, level, size * h * w)
            if len(chunks) > 1:  # averaging the per-chunk maps
                total += len(chunks) * h * w
    total += decoder_flops(config, image_size)
    total += SIGMOID_PER_ELEM * image_size * image_size
    return total


def teacher_forward_flops(
    model_or_config,
    image_size: int,
    k_shots: int,
    n_ways: int = 1,
    support_batch: int | None = None,
) -> int:
    config = getattr(model_or_config, "config", model_or_config)
    return n_ways * teacher_class_flops(config, image_size, k_shots, support_batch)


def convdist_flops(config: ModelConfig, image_size: int) -> int:
    spec = config.scales
    total = 0
    for level in spec.attention_levels:
        h, w = _grid(image_size, config, level)
        ch = config.channels(level)
        for _ in range(spec.layers_per_level[level]):
            total += _conv(ch, ch, 3, h, w) + RELU_PER_ELEM * ch * h * w
            total += _conv(ch, 1, 1, h, w) + SIGMOID_PER_ELEM * h * w
    return total


def student_forward_flops(model_or_config, image_size: int) -> int:
    """Support-free forward: one extraction plus one head+decode per class.
    Note the absence of any shot-count input."""
    config = getattr(model_or_config, "config", model_or_config)
    n = getattr(model_or_config, "num_classes", None) or config.num_classes
    total = backbone_flops(config, image_size)
    per_class = (
        convdist_flops(config, image_size)
        + decoder_flops(config, image_size)
        + SIGMOID_PER_ELEM * image_size * image_size
    )
    total += n * per_class
    total += 3 * n * image_size * image_size  # max/argmax/threshold assembly
    return total
