"""Command-line client for the pipeline service.

Every subcommand talks to a running service (start one with
``distillfss serve``); the service address comes from ``--server`` or the
``DISTILLFSS_SERVER`` environment variable. Commands echo their resolved
configuration, print the result and exit nonzero on any error.
"""

from __future__ import annotations

import base64
import sys
from pathlib import Path

import click
from click.core import ParameterSource

from .client import DEFAULT_SERVER, ServiceClient, ServiceError, format_detail
from .config import coerce, load_run_config


@click.group()
@click.option(
    "--server",
    envvar="DISTILLFSS_SERVER",
    default=DEFAULT_SERVER,
    show_default=True,
    help="Base URL of the pipeline service.",
)
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Run-config file ([section] key = value); flags override it.",
)
@click.pass_context
def main(ctx, server, config_path):
    ctx.ensure_object(dict)
    ctx.obj["server"] = server
    ctx.obj["file_config"] = load_run_config(config_path) if config_path else {}


def resolve(ctx, section: str, values: dict) -> dict:
    """Merge config-file values under ``[section]`` with explicit flags."""
    file_values = ctx.obj.get("file_config", {}).get(section, {})
    merged = {}
    for key, value in values.items():
        from_file = key in file_values
        explicit = ctx.get_parameter_source(key) == ParameterSource.COMMANDLINE
        merged[key] = coerce(file_values[key]) if from_file and not explicit else value
    return merged


def echo_config(resolved: dict) -> None:
    for key in sorted(resolved):
        click.echo(f"{key} = {resolved[key]}")


def call(ctx, method_name: str, payload: dict) -> dict:
    with ServiceClient(ctx.obj["server"]) as client:
        try:
            response = getattr(client, method_name)(**payload)
        except ServiceError as exc:
            raise click.ClickException(format_detail(exc.detail))
    echo_config(response.get("resolved_config", {}))
    return response


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8421, show_default=True)
def serve(host, port):
    """Run the pipeline service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port, log_level="info")


@main.command()
@click.option("--out", required=True, help="Directory for train/ and test/ splits.")
@click.option("--num-train", default=40, show_default=True)
@click.option("--num-test", default=20, show_default=True)
@click.option("--image-size", default=64, show_default=True)
@click.option("--num-classes", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def synth(ctx, out, num_train, num_test, image_size, num_classes, seed):
    """Generate the synthetic-shapes corpus on disk."""
    payload = resolve(
        ctx,
        "synth",
        dict(
            out_dir=out,
            num_train=num_train,
            num_test=num_test,
            image_size=image_size,
            num_classes=num_classes,
            seed=seed,
        ),
    )
    response = call(ctx, "synth", payload)
    click.echo(
        f"wrote {response['train_items']} train / {response['test_items']} test "
        f"items under {payload['out_dir']}"
    )


@main.command(name="train-base")
@click.argument("data_dir")
@click.option("--out", required=True, help="Checkpoint path to write.")
@click.option("--num-classes", default=2, show_default=True)
@click.option("--epochs", default=12, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--gamma", default=2.0, show_default=True)
@click.option("--alpha", default=1.0, show_default=True)
@click.option("--patience", default=4, show_default=True)
@click.option("--shots", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def train_base(ctx, data_dir, out, num_classes, epochs, lr, gamma, alpha, patience, shots, seed):
    """Episodic training of the attention teacher on a source dataset."""
    payload = resolve(
        ctx,
        "train-base",
        dict(
            data_dir=data_dir,
            out=out,
            num_classes=num_classes,
            epochs=epochs,
            learning_rate=lr,
            gamma=gamma,
            alpha=alpha,
            patience=patience,
            shots=shots,
            seed=seed,
        ),
    )
    response = call(ctx, "train_base", payload)
    click.echo(
        f"checkpoint {response['checkpoint']} "
        f"(best epoch {response['best_epoch']}, miou {response['best_miou']:.4f})"
    )


@main.command()
@click.argument("checkpoint")
@click.argument("support_dir")
@click.option("--out", required=True)
@click.option("--policy", default="conv_mapper", show_default=True)
@click.option("--support-size", default=10, show_default=True)
@click.option("--support-seed", default=0, show_default=True)
@click.option("--epochs", default=20, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--gamma", default=2.0, show_default=True)
@click.option("--alpha", default=1.0, show_default=True)
@click.option("--patience", default=6, show_default=True)
@click.option("--conditioning-count", default=None, type=int)
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def transfer(ctx, checkpoint, support_dir, out, policy, support_size, support_seed,
             epochs, lr, gamma, alpha, patience, conditioning_count, seed):
    """Fine-tune teacher blocks on the target support set."""
    payload = resolve(
        ctx,
        "transfer",
        dict(
            checkpoint=checkpoint,
            support_dir=support_dir,
            out=out,
            policy=policy,
            support_size=support_size,
            support_seed=support_seed,
            epochs=epochs,
            learning_rate=lr,
            gamma=gamma,
            alpha=alpha,
            patience=patience,
            conditioning_count=conditioning_count,
            seed=seed,
        ),
    )
    response = call(ctx, "transfer", payload)
    click.echo(
        f"checkpoint {response['checkpoint']} "
        f"(best epoch {response['best_epoch']}, support miou {response['best_miou']:.4f})"
    )


@main.command()
@click.argument("teacher_checkpoint")
@click.argument("support_dir")
@click.option("--out", required=True)
@click.option("--no-dist-loss", is_flag=True, default=False,
              help="Train without the distillation term (ablation).")
@click.option("--policy", default="classifier,conv_mapper,conv_merge,conv_skip,mixer",
              show_default=True, help="Decoder blocks trainable during distillation.")
@click.option("--support-size", default=10, show_default=True)
@click.option("--support-seed", default=0, show_default=True)
@click.option("--epochs", default=20, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--gamma", default=2.0, show_default=True)
@click.option("--alpha", default=1.0, show_default=True)
@click.option("--patience", default=6, show_default=True)
@click.option("--conditioning-count", default=None, type=int)
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def distill(ctx, teacher_checkpoint, support_dir, out, no_dist_loss, policy,
            support_size, support_seed, epochs, lr, gamma, alpha, patience,
            conditioning_count, seed):
    """Distill the teacher into a support-free student checkpoint."""
    payload = resolve(
        ctx,
        "distill",
        dict(
            teacher_checkpoint=teacher_checkpoint,
            support_dir=support_dir,
            out=out,
            use_dist_loss=not no_dist_loss,
            policy=policy,
            support_size=support_size,
            support_seed=support_seed,
            epochs=epochs,
            learning_rate=lr,
            gamma=gamma,
            alpha=alpha,
            patience=patience,
            conditioning_count=conditioning_count,
            seed=seed,
        ),
    )
    response = call(ctx, "distill", payload)
    click.echo(
        f"checkpoint {response['checkpoint']} "
        f"(best epoch {response['best_epoch']}, support miou {response['best_miou']:.4f})"
    )


@main.command(name="eval")
@click.argument("checkpoint")
@click.argument("test_dir")
@click.option("--support-dir", default=None,
              help="Support directory (teacher checkpoints only).")
@click.option("--support-size", default=None, type=int)
@click.option("--support-seed", default=0, show_default=True)
@click.option("--support-batch", default=10, show_default=True)
@click.option("--out", default=None, help="Directory for metrics.json.")
@click.pass_context
def eval_command(ctx, checkpoint, test_dir, support_dir, support_size, support_seed,
                 support_batch, out):
    """Evaluate a checkpoint on a test split (fixed-support protocol)."""
    payload = resolve(
        ctx,
        "eval",
        dict(
            checkpoint=checkpoint,
            test_dir=test_dir,
            support_dir=support_dir,
            support_size=support_size,
            support_seed=support_seed,
            support_batch=support_batch,
            out=out,
        ),
    )
    response = call(ctx, "evaluate", payload)
    click.echo(f"miou = {response['miou']:.4f}")
    for class_id, iou in sorted(response["per_class_iou"].items()):
        click.echo(f"iou[class {class_id}] = {iou:.4f}")
    if response.get("metrics_path"):
        click.echo(f"metrics written to {response['metrics_path']}")


@main.command()
@click.option("--ckpt", "checkpoints", multiple=True, required=True,
              help="label=path; repeat for several models.")
@click.option("--k-values", default="1,5,10,25,50", show_default=True)
@click.option("--n-values", default=None, help="Comma-separated way counts.")
@click.option("--image-size", default=64, show_default=True)
@click.option("--repeats", default=20, show_default=True)
@click.option("--warmup", default=3, show_default=True)
@click.option("--support-batch", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default="report", show_default=True)
@click.pass_context
def bench(ctx, checkpoints, k_values, n_values, image_size, repeats, warmup,
          support_batch, seed, out):
    """Latency/memory/FLOP scaling benchmark over a (shots, ways) grid."""
    labelled = {}
    for item in checkpoints:
        if "=" not in item:
            raise click.ClickException(f"--ckpt wants label=path, got {item!r}")
        label, path = item.split("=", 1)
        labelled[label] = path
    payload = resolve(
        ctx,
        "bench",
        dict(
            checkpoints=labelled,
            k_values=[int(v) for v in str(k_values).split(",")],
            n_values=[int(v) for v in str(n_values).split(",")] if n_values else None,
            image_size=image_size,
            repeats=repeats,
            warmup=warmup,
            support_batch=support_batch,
            seed=seed,
            out=out,
        ),
    )
    response = call(ctx, "bench", payload)
    for record in response["records"]:
        click.echo(
            f"{record['model']}: K={record['k']} N={record['n']} "
            f"latency={record['latency_ms_median']:.1f}ms "
            f"peak={record['peak_bytes']} flops={record['flops']}"
        )
    for path in response["files"]:
        click.echo(f"wrote {path}")


@main.command()
@click.argument("checkpoint")
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, help="Path for the predicted mask PNG.")
@click.pass_context
def segment(ctx, checkpoint, image, out):
    """Segment one image with a support-free student checkpoint."""
    with ServiceClient(ctx.obj["server"]) as client:
        try:
            response = client.segment(checkpoint, image)
        except ServiceError as exc:
            raise click.ClickException(format_detail(exc.detail))
    mask_bytes = base64.b64decode(response["mask_png_base64"])
    Path(out).write_bytes(mask_bytes)
    click.echo(f"classes present: {response['classes_present']}")
    click.echo(f"mask written to {out}")


if __name__ == "__main__":
    main(auto_envvar_prefix="DISTILLFSS")
