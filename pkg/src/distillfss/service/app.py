"""FastAPI service exposing the full pipeline.

Every endpoint wraps one core operation, echoes the resolved configuration in
its response and embeds it in the artifacts it writes. Work runs
synchronously in the request: at desk scale each stage finishes in seconds
to a few minutes.
"""

from __future__ import annotations

import base64
import io
import json
import os
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from PIL import Image

from .. import __version__
from ..checkpoint import load_checkpoint, read_manifest, save_checkpoint
from ..datasets import SegDataset, build_support_set, load_dataset, save_dataset, synth_shapes
from ..evaluation import bench_inference, emit_report, evaluate
from ..student import MulticlassStudent, StudentModel
from ..teacher import TeacherModel
from ..training import TrainConfig, UnfreezePolicy, distill_fss, train_base, transfer_fss
from ..backbone import ModelConfig
from . import schemas

DEVICE_ENV = "DISTILLFSS_DEVICE"


def service_device() -> torch.device:
    return torch.device(os.environ.get(DEVICE_ENV, "cpu"))


def config_text(resolved: dict) -> str:
    lines = [f"{key} = {resolved[key]}" for key in sorted(resolved)]
    return "\n".join(lines) + "\n"


def _move_dataset(dataset: SegDataset, device: torch.device) -> SegDataset:
    if device.type == "cpu":
        return dataset
    items = tuple(
        (image.to(device), type(mask)(grid=mask.grid.to(device), num_classes=mask.num_classes))
        for image, mask in dataset.items
    )
    return SegDataset(split=dataset.split, items=items, num_classes=dataset.num_classes)


def _load_support(req, num_classes: int, device: torch.device):
    ds = load_dataset(req.support_dir, num_classes=num_classes, split="support")
    ds = _move_dataset(ds, device)
    return build_support_set(ds, req.support_size, seed=req.support_seed)


def create_app() -> FastAPI:
    app = FastAPI(
        title="distillfss",
        version=__version__,
        description="Few-shot segmentation pipeline: synthesize data, train the "
        "attention teacher, fine-tune it on a support set and distill it into a "
        "support-free student.",
    )
    device = service_device()
    student_cache: dict[tuple[str, float], MulticlassStudent | StudentModel] = {}

    def fail(exc: Exception) -> HTTPException:
        return HTTPException(status_code=400, detail=str(exc))

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(
            status="ok", version=__version__, device=str(device)
        )

    @app.post("/datasets/synth", response_model=schemas.SynthResponse)
    def synth(req: schemas.SynthRequest):
        resolved = req.model_dump()
        out = Path(req.out_dir)
        try:
            train = synth_shapes(
                req.num_train, req.image_size, req.num_classes, seed=req.seed,
                split="train",
            )
            test = synth_shapes(
                req.num_test, req.image_size, req.num_classes, seed=req.seed + 1,
                split="test",
            )
            save_dataset(train, out / "train")
            save_dataset(test, out / "test")
            (out / "synth_config.txt").write_text(config_text(resolved))
        except ValueError as exc:
            raise fail(exc)
        return schemas.SynthResponse(
            resolved_config=resolved,
            train_dir=str(out / "train"),
            test_dir=str(out / "test"),
            train_items=len(train.items),
            test_items=len(test.items),
        )

    @app.post("/train/base", response_model=schemas.TrainResponse)
    def train_base_endpoint(req: schemas.TrainBaseRequest):
        resolved = req.model_dump()
        try:
            dataset = load_dataset(req.data_dir, num_classes=req.num_classes, split="train")
            dataset = _move_dataset(dataset, device)
            model = TeacherModel(ModelConfig(num_classes=req.num_classes, seed=req.seed)).to(device)
            cfg = TrainConfig(
                learning_rate=req.learning_rate,
                gamma=req.gamma,
                alpha=req.alpha,
                epochs=req.epochs,
                patience=req.patience,
                seed=req.seed,
            )
            model, history = train_base(model, dataset, cfg, shots=req.shots)
            save_checkpoint(
                model, req.out, config_text(resolved), history.to_jsonable()
            )
        except (ValueError, FileNotFoundError) as exc:
            raise fail(exc)
        return schemas.TrainResponse(
            resolved_config=resolved,
            checkpoint=req.out,
            best_epoch=history.best_epoch,
            best_miou=history.best_miou,
            epochs_run=len(history.records) - 1,
        )

    @app.post("/train/transfer", response_model=schemas.TrainResponse)
    def transfer_endpoint(req: schemas.TransferRequest):
        resolved = req.model_dump()
        try:
            teacher = load_checkpoint(req.checkpoint, expect="teacher").to(device)
            support = _load_support(req, teacher.config.num_classes, device)
            cfg = TrainConfig(
                learning_rate=req.learning_rate,
                gamma=req.gamma,
                alpha=req.alpha,
                epochs=req.epochs,
                patience=req.patience,
                conditioning_count=req.conditioning_count,
                seed=req.seed,
            )
            policy = UnfreezePolicy.parse(req.policy)
            tuned, history = transfer_fss(teacher, support, policy, cfg)
            save_checkpoint(tuned, req.out, config_text(resolved), history.to_jsonable())
        except (ValueError, FileNotFoundError) as exc:
            raise fail(exc)
        return schemas.TrainResponse(
            resolved_config=resolved,
            checkpoint=req.out,
            best_epoch=history.best_epoch,
            best_miou=history.best_miou,
            epochs_run=len(history.records) - 1,
        )

    @app.post("/train/distill", response_model=schemas.TrainResponse)
    def distill_endpoint(req: schemas.DistillRequest):
        resolved = req.model_dump()
        try:
            teacher = load_checkpoint(req.teacher_checkpoint, expect="teacher").to(device)
            support = _load_support(req, teacher.config.num_classes, device)
            cfg = TrainConfig(
                learning_rate=req.learning_rate,
                gamma=req.gamma,
                alpha=req.alpha,
                epochs=req.epochs,
                patience=req.patience,
                conditioning_count=req.conditioning_count,
                seed=req.seed,
            )
            policy = UnfreezePolicy.parse(req.policy)
            student, history = distill_fss(
                teacher, support, cfg, use_dist_loss=req.use_dist_loss, policy=policy
            )
            save_checkpoint(student, req.out, config_text(resolved), history.to_jsonable())
        except (ValueError, FileNotFoundError) as exc:
            raise fail(exc)
        return schemas.TrainResponse(
            resolved_config=resolved,
            checkpoint=req.out,
            best_epoch=history.best_epoch,
            best_miou=history.best_miou,
            epochs_run=len(history.records) - 1,
        )

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_endpoint(req: schemas.EvalRequest):
        resolved = req.model_dump()
        try:
            kind = read_manifest(req.checkpoint)["model"]
            model = load_checkpoint(req.checkpoint).to(device)
            test = load_dataset(
                req.test_dir, num_classes=model.config.num_classes, split="test"
            )
            test = _move_dataset(test, device)
            support = None
            if req.support_dir is not None:
                if kind != "teacher":
                    raise ValueError(
                        "student checkpoints are support-free; do not pass a support directory"
                    )
                support_ds = load_dataset(
                    req.support_dir, num_classes=model.config.num_classes, split="support"
                )
                support_ds = _move_dataset(support_ds, device)
                size = req.support_size or len(support_ds.items)
                support = build_support_set(support_ds, size, seed=req.support_seed)
            metrics = evaluate(model, test, support, support_batch=req.support_batch)
            metrics_path = None
            if req.out:
                out = Path(req.out)
                out.mkdir(parents=True, exist_ok=True)
                payload = {"resolved_config": resolved, **metrics.to_jsonable()}
                metrics_path = out / "metrics.json"
                metrics_path.write_text(json.dumps(payload, indent=1, sort_keys=True))
        except (ValueError, FileNotFoundError) as exc:
            raise fail(exc)
        return schemas.EvalResponse(
            resolved_config=resolved,
            miou=metrics.miou,
            per_class_iou={str(k): v for k, v in metrics.per_class_iou.items()},
            excluded_classes=metrics.excluded_classes,
            metrics_path=str(metrics_path) if metrics_path else None,
        )

    @app.post("/bench", response_model=schemas.BenchResponse)
    def bench_endpoint(req: schemas.BenchRequest):
        resolved = req.model_dump()
        try:
            models = {
                label: load_checkpoint(path).to(device)
                for label, path in req.checkpoints.items()
            }
            n_values = req.n_values
            if n_values is None:
                ways = {
                    m.num_classes
                    for m in models.values()
                    if isinstance(m, (MulticlassStudent,))
                }
                if len(ways) > 1:
                    raise ValueError(
                        f"student checkpoints disagree on way count {sorted(ways)}; "
                        "pass n_values explicitly"
                    )
                n_values = [ways.pop()] if ways else [1]
            records = bench_inference(
                models,
                k_values=req.k_values,
                n_values=n_values,
                image_size=req.image_size,
                repeats=req.repeats,
                warmup=req.warmup,
                support_batch=req.support_batch,
                seed=req.seed,
            )
            files = emit_report(records, output_dir=req.out)
            config_path = Path(req.out) / "run_config.txt"
            config_path.write_text(config_text(resolved))
            files.append(config_path)
        except (ValueError, FileNotFoundError) as exc:
            raise fail(exc)
        return schemas.BenchResponse(
            resolved_config=resolved,
            records=[schemas.BenchRecordModel(**vars(r)) for r in records],
            files=[str(f) for f in files],
        )

    @app.post("/segment", response_model=schemas.SegmentResponse)
    def segment(req: schemas.SegmentRequest):
        resolved = {"checkpoint": req.checkpoint, "image_png_base64": "<image>"}
        try:
            path = Path(req.checkpoint)
            kind = read_manifest(path)["model"]
            if kind == "teacher":
                raise ValueError(
                    "the segmentation endpoint serves support-free student checkpoints"
                )
            key = (str(path), path.stat().st_mtime)
            if key not in student_cache:
                student_cache.clear()
                student_cache[key] = load_checkpoint(path).to(device)
            model = student_cache[key]
            raw = base64.b64decode(req.image_png_base64)
            with Image.open(io.BytesIO(raw)) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            image = torch.from_numpy(np.moveaxis(arr, -1, 0).copy()).to(device)
            with torch.no_grad():
                _, pred = model(image)
            grid = pred.grid.cpu().numpy().astype(np.uint8)
            buf = io.BytesIO()
            Image.fromarray(grid, mode="L").save(buf, format="PNG")
        except (ValueError, FileNotFoundError) as exc:
            raise fail(exc)
        return schemas.SegmentResponse(
            resolved_config=resolved,
            mask_png_base64=base64.b64encode(buf.getvalue()).decode(),
            classes_present=pred.classes_present(),
        )

    return app
