"""Losses, fine-tuning and distillation loops, unfreeze policies.

All loops are seeded and single-threaded: the same seed on the same machine
reproduces the returned parameters bit for bit. The extractor is frozen in
every loop except base training, so per-image features and tokens are
precomputed once per run.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .datasets import SegDataset, SupportSet, binarize_mask
from .evaluation import MetricAccumulator
from .student import MulticlassStudent
from .teacher import EntryCache, TeacherModel, AttentionMapSet, assemble_prediction


class Block(str, enum.Enum):
    CONV_MAPPER = "conv_mapper"
    CONV_SKIP = "conv_skip"
    CLASSIFIER = "classifier"
    CONV_MERGE = "conv_merge"
    ATTENTION_WEIGHTS = "attention_weights"
    MIXER = "mixer"


@dataclass(frozen=True)
class UnfreezePolicy:
    """The model blocks allowed to update during a fine-tuning run."""

    blocks: frozenset[Block]

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("an unfreeze policy must name at least one block")

    @classmethod
    def of(cls, *blocks: Block | str) -> "UnfreezePolicy":
        return cls(frozenset(Block(b) for b in blocks))

    @classmethod
    def parse(cls, text: str) -> "UnfreezePolicy":
        names = [part.strip() for part in text.split(",") if part.strip()]
        try:
            return cls.of(*names)
        except ValueError as exc:
            valid = ", ".join(b.value for b in Block)
            raise ValueError(f"{exc}; valid blocks: {valid}") from None

    def __contains__(self, block: Block) -> bool:
        return block in self.blocks

    def describe(self) -> str:
        return ",".join(sorted(b.value for b in self.blocks))


DEFAULT_TRANSFER_POLICY = UnfreezePolicy.of(Block.CONV_MAPPER)
DEFAULT_DISTILL_POLICY = UnfreezePolicy.of(
    Block.CONV_MAPPER, Block.CONV_MERGE, Block.CONV_SKIP, Block.MIXER, Block.CLASSIFIER
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    gamma: float = 2.0
    alpha: float = 1.0
    epochs: int = 50
    conditioning_count: Optional[int] = None  # default: min(M - 1, 5)
    patience: int = 10
    seed: int = 0
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.conditioning_count is not None and self.conditioning_count < 1:
            raise ValueError("conditioning_count must be >= 1 when given")

    def resolved_conditioning(self, support_size: int) -> int:
        if self.conditioning_count is not None:
            return self.conditioning_count
        return max(1, min(support_size - 1, 5))


# -- losses ----------------------------------------------------------------

FOCAL_EPS = 1e-7


def focal_loss(
    probs: torch.Tensor,
    target: torch.Tensor,
    gamma: float = 2.0,
    alpha: float = 1.0,
) -> torch.Tensor:
    """Mean focal term over pixels; probabilities are clamped away from 0/1."""
    if probs.shape != target.shape:
        raise ValueError(
            f"probability map shape {tuple(probs.shape)} != target shape {tuple(target.shape)}"
        )
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    t = target.to(probs.dtype)
    pt = torch.where(t > 0.5, probs, 1.0 - probs).clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)
    return (-alpha * (1.0 - pt) ** gamma * torch.log(pt)).mean()


def distill_loss(
    teacher_maps: AttentionMapSet, student_maps: AttentionMapSet
) -> torch.Tensor:
    """Mean over layers of the per-layer pixel-mean squared error."""
    if len(teacher_maps.maps) != len(student_maps.maps):
        raise ValueError(
            f"layer count mismatch: teacher has {len(teacher_maps.maps)}, "
            f"student has {len(student_maps.maps)}"
        )
    total = None
    for i, (t, s) in enumerate(zip(teacher_maps.maps, student_maps.maps)):
        if t.shape != s.shape:
            raise ValueError(
                f"layer {i} shape mismatch: {tuple(t.shape)} vs {tuple(s.shape)}"
            )
        term = torch.mean((t - s) ** 2)
        total = term if total is None else total + term
    return total / len(teacher_maps.maps)


def composite_loss(
    student_probs: torch.Tensor,
    teacher_probs: torch.Tensor,
    target: torch.Tensor,
    teacher_maps: AttentionMapSet,
    student_maps: AttentionMapSet,
    gamma: float = 2.0,
    alpha: float = 1.0,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> torch.Tensor:
    """Distillation term plus both segmentation terms (unweighted by default)."""
    w_dist, w_student, w_teacher = weights
    return (
        w_dist * distill_loss(teacher_maps, student_maps)
        + w_student * focal_loss(student_probs, target, gamma, alpha)
        + w_teacher * focal_loss(teacher_probs, target, gamma, alpha)
    )


# -- freeze discipline -------------------------------------------------------


def _block_module(model: TeacherModel, block: Block) -> nn.Module:
    return {
        Block.CONV_MAPPER: model.decoder.mapper,
        Block.CONV_MERGE: model.decoder.merge,
        Block.CONV_SKIP: model.decoder.skip_conv,
        Block.MIXER: model.decoder.mixer,
        Block.CLASSIFIER: model.decoder.classifier,
        Block.ATTENTION_WEIGHTS: model.attention,
    }[block]


def apply_policy(model: TeacherModel, policy: UnfreezePolicy) -> list[nn.Parameter]:
    """Freeze everything, then re-enable exactly the policy blocks."""
    for p in model.parameters():
        p.requires_grad_(False)
    trainable: list[nn.Parameter] = []
    for block in sorted(policy.blocks, key=lambda b: b.value):
        for p in _block_module(model, block).parameters():
            p.requires_grad_(True)
            trainable.append(p)
    return trainable


# -- histories ---------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    miou: float
    loss: float
    dist_loss: Optional[float] = None  # distillation term only, when tracked


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_miou: float = 0.0
    dist_loss_calls: int = 0

    def to_jsonable(self) -> dict:
        return {
            "records": [vars(r) for r in self.records],
            "best_epoch": self.best_epoch,
            "best_miou": self.best_miou,
            "dist_loss_calls": self.dist_loss_calls,
        }


def _snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _sample_conditioning(
    rng: np.random.Generator, size: int, query_idx: int, count: int
) -> list[int]:
    others = [i for i in range(size) if i != query_idx]
    if count <= len(others):
        picks = rng.choice(len(others), size=count, replace=False)
    else:  # spec'd fallback: sample with replacement when M - 1 < count
        picks = rng.choice(len(others), size=count, replace=True)
    return [others[int(j)] for j in picks]


def _covered_classes(caches: Sequence[EntryCache], classes: Sequence[int]) -> set[int]:
    covered: set[int] = set()
    for cache in caches:
        covered.update(cache.mask.classes_present())
    return {c for c in classes if c in covered}


def _teacher_support_miou(
    model: TeacherModel, caches: Sequence[EntryCache], num_classes: int
) -> float:
    """Pseudo-query mIoU over the support set, each entry conditioned on the
    remaining ones (self excluded to avoid trivial self-matching)."""
    acc = MetricAccumulator(num_classes)
    with torch.no_grad():
        for i, query in enumerate(caches):
            cond = [c for j, c in enumerate(caches) if j != i]
            probs = []
            for class_id in range(1, num_classes + 1):
                maps = model.maps_from_caches(query, cond, class_id)
                logits = model.decode(maps, query.feats.skip, query.image.shape[-2:])
                probs.append(torch.sigmoid(logits))
            pred = assemble_prediction(torch.stack(probs))
            acc.add(pred.grid, query.mask.grid)
    return acc.result().miou


def _student_support_miou(
    student: MulticlassStudent, caches: Sequence[EntryCache]
) -> float:
    acc = MetricAccumulator(student.num_classes)
    with torch.no_grad():
        for cache in caches:
            out_size = cache.image.shape[-2:]
            probs = []
            for class_id in range(1, student.num_classes + 1):
                _, logits = student.class_forward(cache.feats, class_id, out_size)
                probs.append(torch.sigmoid(logits))
            pred = assemble_prediction(torch.stack(probs))
            acc.add(pred.grid, cache.mask.grid)
    return acc.result().miou


# -- fine-tuning on the target support set ------------------------------------


def transfer_fss(
    model: TeacherModel,
    support: SupportSet,
    policy: UnfreezePolicy = DEFAULT_TRANSFER_POLICY,
    config: TrainConfig = TrainConfig(),
) -> tuple[TeacherModel, TrainHistory]:
    """Fine-tune the policy blocks on the support set.

    Every epoch each support entry serves once as a pseudo-query, with a
    seeded sample of the other entries as conditioning inputs. Support mIoU
    is tracked per epoch and the best-scoring parameters are returned; the
    input model is left untouched.
    """
    if support.size < 2:
        raise ValueError("fine-tuning needs at least 2 support images")
    work = copy.deepcopy(model)
    trainable = apply_policy(work, policy)
    optimizer = torch.optim.AdamW(trainable, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    num_classes = support.num_classes
    classes = list(range(1, num_classes + 1))
    cond_count = config.resolved_conditioning(support.size)

    caches = work.build_entry_caches(support.entries, classes)

    history = TrainHistory()
    best_miou = _teacher_support_miou(work, caches, num_classes)
    best_state = _snapshot(work)
    history.records.append(EpochRecord(epoch=0, miou=best_miou, loss=float("nan")))
    history.best_epoch, history.best_miou = 0, best_miou
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(support.size)
        losses = []
        for qi in order:
            query = caches[qi]
            cond_idx = _sample_conditioning(rng, support.size, int(qi), cond_count)
            cond = [caches[j] for j in cond_idx]
            targets = sorted(
                _covered_classes(cond, query.mask.classes_present())
            )
            if not targets:
                continue
            optimizer.zero_grad()
            loss = None
            for class_id in targets:
                maps = work.maps_from_caches(query, cond, class_id)
                logits = work.decode(maps, query.feats.skip, query.image.shape[-2:])
                term = focal_loss(
                    torch.sigmoid(logits),
                    binarize_mask(query.mask, class_id),
                    config.gamma,
                    config.alpha,
                )
                loss = term if loss is None else loss + term
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        miou = _teacher_support_miou(work, caches, num_classes)
        history.records.append(
            EpochRecord(epoch=epoch, miou=miou, loss=float(np.mean(losses)))
        )
        if miou > best_miou:
            best_miou = miou
            best_state = _snapshot(work)
            history.best_epoch, history.best_miou = epoch, miou
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    work.load_state_dict(best_state)
    return work, history


# -- distillation --------------------------------------------------------------


def distill_fss(
    teacher: TeacherModel,
    support: SupportSet,
    config: TrainConfig = TrainConfig(),
    use_dist_loss: bool = True,
    policy: UnfreezePolicy = DEFAULT_DISTILL_POLICY,
) -> tuple[MulticlassStudent, TrainHistory]:
    """Distill the teacher's attention behavior into per-class ConvDist banks.

    The teacher's attention weights and the extractor stay frozen; the shared
    decoder follows ``policy`` and the ConvDist heads are always trainable.
    The passed-in teacher is not modified (distillation adapts a copy whose
    decoder the student shares). Disabling ``use_dist_loss`` trains with the
    two segmentation terms only and never evaluates the distillation term.
    """
    if support.size < 2:
        raise ValueError("distillation needs at least 2 support images")
    if Block.ATTENTION_WEIGHTS in policy:
        raise ValueError("attention weights stay frozen during distillation")
    work = copy.deepcopy(teacher)
    student = MulticlassStudent.from_teacher(work, seed=config.seed)

    decoder_params = set(apply_policy(work, policy))
    trainable = list(decoder_params)
    for p in student.banks.parameters():
        p.requires_grad_(True)
        trainable.append(p)
    optimizer = torch.optim.AdamW(trainable, lr=config.learning_rate)

    rng = np.random.default_rng(config.seed)
    num_classes = support.num_classes
    classes = list(range(1, num_classes + 1))
    cond_count = config.resolved_conditioning(support.size)
    caches = work.build_entry_caches(support.entries, classes)
    w_dist, w_student, w_teacher = config.loss_weights

    history = TrainHistory()
    best_miou = _student_support_miou(student, caches)
    best_state = _snapshot(student)
    history.records.append(EpochRecord(epoch=0, miou=best_miou, loss=float("nan")))
    history.best_epoch, history.best_miou = 0, best_miou
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(support.size)
        losses = []
        dist_terms = []
        for qi in order:
            query = caches[qi]
            cond_idx = _sample_conditioning(rng, support.size, int(qi), cond_count)
            cond = [caches[j] for j in cond_idx]
            targets = sorted(_covered_classes(cond, query.mask.classes_present()))
            if not targets:
                continue
            out_size = query.image.shape[-2:]
            optimizer.zero_grad()
            loss = None
            for class_id in targets:
                with torch.no_grad():  # attention path is frozen
                    teacher_maps = work.maps_from_caches(query, cond, class_id)
                teacher_logits = work.decode(teacher_maps, query.feats.skip, out_size)
                student_maps, student_logits = student.class_forward(
                    query.feats, class_id, out_size
                )
                target = binarize_mask(query.mask, class_id)
                term = w_student * focal_loss(
                    torch.sigmoid(student_logits), target, config.gamma, config.alpha
                ) + w_teacher * focal_loss(
                    torch.sigmoid(teacher_logits), target, config.gamma, config.alpha
                )
                if use_dist_loss:
                    dist_term = distill_loss(teacher_maps, student_maps)
                    history.dist_loss_calls += 1
                    dist_terms.append(float(dist_term.detach()))
                    term = term + w_dist * dist_term
                loss = term if loss is None else loss + term
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        miou = _student_support_miou(student, caches)
        history.records.append(
            EpochRecord(
                epoch=epoch,
                miou=miou,
                loss=float(np.mean(losses)),
                dist_loss=float(np.mean(dist_terms)) if dist_terms else None,
            )
        )
        if miou > best_miou:
            best_miou = miou
            best_state = _snapshot(student)
            history.best_epoch, history.best_miou = epoch, miou
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    student.load_state_dict(best_state)
    return student, history


# -- source-domain episodic training -------------------------------------------


def train_base(
    model: TeacherModel,
    dataset: SegDataset,
    config: TrainConfig = TrainConfig(),
    shots: int = 4,
) -> tuple[TeacherModel, TrainHistory]:
    """Episodic training of the full teacher (extractor included) on a source
    dataset: every item serves once per epoch as the query of an episode with
    seeded conditioning shots. Trains in place and returns the best-epoch
    parameters by episodic mIoU."""
    if len(dataset.items) < 2:
        raise ValueError("base training needs at least 2 dataset items")
    for p in model.parameters():
        p.requires_grad_(True)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = len(dataset.items)
    num_classes = dataset.num_classes
    shots = min(shots, n - 1)

    def episode_entries(query_idx: int) -> list:
        idx = _sample_conditioning(rng, n, query_idx, shots)
        return [dataset.items[j] for j in idx]

    def epoch_miou() -> float:
        acc = MetricAccumulator(num_classes)
        with torch.no_grad():
            for qi in range(n):
                image, mask = dataset.items[qi]
                entries = episode_entries(qi)
                _, pred = model.forward_multiclass(image, entries, num_classes)
                acc.add(pred.grid, mask.grid)
        return acc.result().miou

    history = TrainHistory()
    best_miou = epoch_miou()
    best_state = _snapshot(model)
    history.records.append(EpochRecord(epoch=0, miou=best_miou, loss=float("nan")))
    history.best_epoch, history.best_miou = 0, best_miou
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for qi in order:
            image, mask = dataset.items[int(qi)]
            entries = episode_entries(int(qi))
            covered: set[int] = set()
            for _, emask in entries:
                covered.update(emask.classes_present())
            targets = sorted(set(mask.classes_present()) & covered)
            if not targets:
                continue
            optimizer.zero_grad()
            query_feats = model.extract(image)
            query_tokens = model.layer_tokens(query_feats)
            support_tokens = [model.layer_tokens(model.extract(img)) for img, _ in entries]
            dtype = query_tokens[0].tokens.dtype
            loss = None
            for class_id in targets:
                columns = [
                    model.mask_columns(binarize_mask(emask, class_id), dtype)
                    for _, emask in entries
                ]
                maps = model.attention_maps(query_tokens, support_tokens, columns)
                logits = model.decode(maps, query_feats.skip, image.shape[-2:])
                term = focal_loss(
                    torch.sigmoid(logits),
                    binarize_mask(mask, class_id),
                    config.gamma,
                    config.alpha,
                )
                loss = term if loss is None else loss + term
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        miou = epoch_miou()
        history.records.append(
            EpochRecord(epoch=epoch, miou=miou, loss=float(np.mean(losses)))
        )
        if miou > best_miou:
            best_miou = miou
            best_state = _snapshot(model)
            history.best_epoch, history.best_miou = epoch, miou
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.load_state_dict(best_state)
    return model, history
