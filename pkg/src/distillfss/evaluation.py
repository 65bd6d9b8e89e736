"""mIoU computation, the fixed-support evaluation protocol and the
latency/memory/FLOP benchmark harness.

Pixel counts are accumulated globally over the evaluated split (not averaged
per image); classes whose union stays empty are excluded from the mean and
tracked separately.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import torch

from . import complexity
from .datasets import MultiClassMask, SegDataset, SupportSet, synth_shapes
from .student import MulticlassStudent, StudentModel
from .teacher import TeacherModel

CSV_HEADER = ["model", "K", "N", "image_size", "latency_ms_median", "peak_bytes", "flops"]


@dataclass
class Metrics:
    per_class_iou: dict[int, float]
    miou: float
    true_positive: dict[int, int]
    false_positive: dict[int, int]
    false_negative: dict[int, int]
    excluded_classes: list[int] = field(default_factory=list)

    def to_jsonable(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "true_positive": {str(k): v for k, v in self.true_positive.items()},
            "false_positive": {str(k): v for k, v in self.false_positive.items()},
            "false_negative": {str(k): v for k, v in self.false_negative.items()},
            "excluded_classes": self.excluded_classes,
        }


class MetricAccumulator:
    """Accumulates global pixel TP/FP/FN per foreground class."""

    def __init__(self, num_classes: int, classes: Optional[Sequence[int]] = None):
        self.classes = list(classes) if classes is not None else list(
            range(1, num_classes + 1)
        )
        self.tp = {c: 0 for c in self.classes}
        self.fp = {c: 0 for c in self.classes}
        self.fn = {c: 0 for c in self.classes}

    def add(self, prediction: torch.Tensor, target: torch.Tensor) -> None:
        if prediction.shape != target.shape:
            raise ValueError(
                f"prediction shape {tuple(prediction.shape)} != "
                f"target shape {tuple(target.shape)}"
            )
        for c in self.classes:
            pred_c = prediction == c
            targ_c = target == c
            self.tp[c] += int((pred_c & targ_c).sum())
            self.fp[c] += int((pred_c & ~targ_c).sum())
            self.fn[c] += int((~pred_c & targ_c).sum())

    def result(self) -> Metrics:
        ious: dict[int, float] = {}
        excluded: list[int] = []
        for c in self.classes:
            union = self.tp[c] + self.fp[c] + self.fn[c]
            if union == 0:
                excluded.append(c)
            else:
                ious[c] = self.tp[c] / union
        mean = sum(ious.values()) / len(ious) if ious else 0.0
        return Metrics(
            per_class_iou=ious,
            miou=mean,
            true_positive=dict(self.tp),
            false_positive=dict(self.fp),
            false_negative=dict(self.fn),
            excluded_classes=excluded,
        )


def miou(
    prediction: MultiClassMask,
    target: MultiClassMask,
    classes: Optional[Sequence[int]] = None,
) -> Metrics:
    acc = MetricAccumulator(target.num_classes, classes)
    acc.add(prediction.grid, target.grid)
    return acc.result()


def evaluate(
    model,
    dataset: SegDataset,
    support: Optional[SupportSet] = None,
    support_batch: int = 10,
) -> Metrics:
    """Evaluate a model over a full split with a fixed support set.

    Teacher evaluation requires a support set and processes it in chunks of
    ``support_batch`` shots (per-chunk attention maps averaged). Student
    evaluation forbids a support set: passing one is a contract violation.
    """
    is_student = isinstance(model, (StudentModel, MulticlassStudent))
    if is_student and support is not None:
        raise ValueError("student models are support-free; do not pass a support set")
    if not is_student and support is None:
        raise ValueError("teacher evaluation requires a support set")

    acc = MetricAccumulator(dataset.num_classes)
    with torch.no_grad():
        for image, mask in dataset.items:
            if is_student:
                _, pred = model(image)
            else:
                _, pred = model.forward_multiclass(
                    image,
                    support,
                    num_classes=dataset.num_classes,
                    support_batch=support_batch,
                )
            acc.add(pred.grid, mask.grid)
    return acc.result()


# -- benchmark harness ---------------------------------------------------------


@dataclass
class BenchRecord:
    model: str
    k: int
    n: int
    image_size: int
    latency_ms_median: float
    peak_bytes: int
    flops: int


def measure_peak_bytes(fn: Callable[[], object]) -> int:
    """Peak bytes allocated during one call, from CPU allocator events."""
    from torch.profiler import ProfilerActivity, profile

    with profile(activities=[ProfilerActivity.CPU], profile_memory=True) as prof:
        fn()
    events = sorted(prof.events(), key=lambda e: e.time_range.start)
    current = peak = 0
    for event in events:
        delta = event.self_cpu_memory_usage
        if delta:
            current += delta
            peak = max(peak, current)
    return peak


def bench_inference(
    models: Mapping[str, TeacherModel | MulticlassStudent],
    k_values: Sequence[int],
    n_values: Sequence[int],
    image_size: int = 64,
    repeats: int = 20,
    warmup: int = 3,
    support_batch: int = 10,
    seed: int = 0,
) -> list[BenchRecord]:
    """Time each model across the (shots, ways) grid on synthetic inputs.

    Every (K, N) cell builds a support pool of K*N images (K per class).
    Latency is the median of ``repeats`` timed forwards after ``warmup``
    passes, single-threaded; the peak-memory pass runs separately so profiler
    overhead never contaminates timings. FLOPs come from the analytic counter.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    records: list[BenchRecord] = []
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for n in n_values:
            pool_classes = min(n, 3)
            for k in k_values:
                pool = synth_shapes(
                    num_items=k * n,
                    image_size=image_size,
                    num_classes=pool_classes,
                    seed=seed + 1000 * n + k,
                )
                query = synth_shapes(
                    num_items=1, image_size=image_size, num_classes=pool_classes,
                    seed=seed + 7,
                ).items[0][0]
                # way w draws its K shots from its own slice of the pool
                class_supports = [
                    pool.items[w * k : (w + 1) * k] for w in range(n)
                ]
                for name, model in models.items():
                    if isinstance(model, (StudentModel, MulticlassStudent)):
                        ways = getattr(model, "num_classes", 1)
                        if ways != n:
                            raise ValueError(
                                f"student '{name}' has {ways} class heads; "
                                f"rebuild it to bench N={n}"
                            )
                        fn = lambda m=model: m(query)
                        flops = complexity.student_forward_flops(model, image_size)
                    else:
                        class_ids = [
                            (w % pool_classes) + 1 for w in range(n)
                        ]
                        entries = [
                            class_supports[w] for w in range(n)
                        ]

                        def fn(m=model, e=entries, ids=class_ids):
                            probs = []
                            for way, part in zip(ids, e):
                                _, logits = m.forward_class(
                                    query, part, way, support_batch=support_batch
                                )
                                probs.append(torch.sigmoid(logits))
                            return torch.stack(probs)

                        flops = complexity.teacher_forward_flops(
                            model, image_size, k_shots=k, n_ways=n,
                            support_batch=support_batch,
                        )
                    with torch.no_grad():
                        for _ in range(warmup):
                            fn()
                        timings = []
                        for _ in range(repeats):
                            start = time.perf_counter()
                            fn()
                            timings.append((time.perf_counter() - start) * 1000.0)
                        peak = measure_peak_bytes(fn)
                    records.append(
                        BenchRecord(
                            model=name,
                            k=k,
                            n=n,
                            image_size=image_size,
                            latency_ms_median=statistics.median(timings),
                            peak_bytes=peak,
                            flops=flops,
                        )
                    )
    finally:
        torch.set_num_threads(old_threads)
    return records


def emit_report(
    records: Sequence[BenchRecord],
    miou_by_shots: Optional[Sequence[tuple[int, float]]] = None,
    output_dir: str | Path = "report",
) -> list[Path]:
    """Write the benchmark CSV and static plots; returns the written paths.

    The CSV is byte-identical across reruns with the same inputs. Plots are
    emitted only when there is something to draw.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = output_dir / "benchmarks.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(
                [
                    r.model,
                    r.k,
                    r.n,
                    r.image_size,
                    f"{r.latency_ms_median:.3f}",
                    r.peak_bytes,
                    r.flops,
                ]
            )
    written.append(csv_path)

    if records:
        for attr, label, fname in (
            ("latency_ms_median", "median latency (ms)", "latency_vs_shots.png"),
            ("peak_bytes", "peak forward memory (bytes)", "memory_vs_shots.png"),
        ):
            fig, ax = plt.subplots(figsize=(6, 4))
            series: dict[tuple[str, int], list[BenchRecord]] = {}
            for r in records:
                series.setdefault((r.model, r.n), []).append(r)
            for (name, n), rs in sorted(series.items()):
                rs = sorted(rs, key=lambda r: r.k)
                ax.plot(
                    [r.k for r in rs],
                    [getattr(r, attr) for r in rs],
                    marker="o",
                    label=f"{name} (N={n})",
                )
            ax.set_xlabel("support shots K")
            ax.set_ylabel(label)
            ax.legend()
            fig.tight_layout()
            path = output_dir / fname
            fig.savefig(path)
            plt.close(fig)
            written.append(path)

    if miou_by_shots:
        fig, ax = plt.subplots(figsize=(6, 4))
        pairs = sorted(miou_by_shots)
        ax.plot([m for m, _ in pairs], [v for _, v in pairs], marker="o")
        ax.set_xlabel("support size M")
        ax.set_ylabel("test mIoU")
        fig.tight_layout()
        path = output_dir / "miou_vs_shots.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    return written
