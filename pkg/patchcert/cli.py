#!/usr/bin/env python3
"""
Patch Certification Toolkit - Unified CLI

Provides one command-line interface for the whole workflow:
- Train certifiably robust classifiers
- Certify checkpoints against patch and sparse threats
- Attack checkpoints (optionally behind LGS) for empirical bounds
- Sweep patch shapes and tune the LGS defense
"""

import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Tuple

import click
from rich.panel import Panel
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from patchcert import __version__
from patchcert.attacks import AttackConfig, LGSParams, empirical_adversarial_accuracy, tune_lgs
from patchcert.certifier import certified_accuracy
from patchcert.checkpoint import load_checkpoint, save_checkpoint
from patchcert.config import (
    group_list,
    list_presets,
    load_config_file,
    load_preset,
    merge,
    train_config_from,
)
from patchcert.datasets import Dataset, load_dataset
from patchcert.errors import ConfigError, PatchCertError
from patchcert.logs import configure_logging, console
from patchcert.models import ARCHITECTURES, build_network
from patchcert.network import Network
from patchcert.reports import ReportWriter, write_manifest
from patchcert.threats import (
    RECTANGLE_MENU,
    SHAPE_KINDS,
    ThreatModel,
    bundled_shape_files,
    load_shape_file,
    make_shape,
    shape_variants,
)
from patchcert.training import stages_from_groups, train

TRANSFER_KINDS = ("square", "rectangle", "line", "diamond", "parallelogram")
BUILTIN_SHAPES = tuple(k for k in SHAPE_KINDS if k != "custom")

dataset_option = click.option(
    "--dataset", type=click.Choice(["mnist", "cifar10"]), default=None, help="Dataset kind"
)
data_dir_option = click.option(
    "--data-dir",
    type=click.Path(file_okay=False, path_type=Path),
    envvar="PATCHCERT_DATA",
    default="data",
    show_default=True,
    help="Directory holding the raw dataset files (env: PATCHCERT_DATA)",
)
limit_option = click.option("--limit", type=int, default=None, help="Use at most N images")
seed_option = click.option("--seed", type=int, default=None, help="Random seed")


@contextmanager
def progress_bar(description: str, total: int) -> Iterator[Any]:
    """Rich progress bar; yields a callback taking the number of items done."""
    with Progress(
        TextColumn("[cyan]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    ) as progress:
        task = progress.add_task(description, total=total)
        yield lambda done: progress.update(task, completed=done)


def _load_network(ckpt: Path, dataset: Optional[str]) -> Tuple[Network, str]:
    """Classifier from a checkpoint, plus the dataset kind to evaluate it on.

    Without an explicit ``--dataset`` the kind recorded at training time is
    used, falling back to the input shape for checkpoints without one.
    """
    checkpoint = load_checkpoint(ckpt)
    net = checkpoint.model
    if not isinstance(net, Network):
        raise ConfigError(f"{ckpt} holds a margin predictor, not a classifier")
    kind = dataset or checkpoint.metadata.get("dataset")
    if kind is None:
        kind = "cifar10" if tuple(net.input_shape) == (3, 32, 32) else "mnist"
    return net, kind


def _sample(dataset: Dataset, limit: Optional[int], seed: Optional[int]) -> Dataset:
    """First N images, or a seeded random sample when a seed is given."""
    if seed is None:
        return dataset.take(limit)
    return dataset.sample(limit, seed)


def _build_threat(
    patch_size: int,
    shape: str,
    pixels: Optional[int],
    shape_file: Optional[Path],
    sparse: Optional[int],
) -> ThreatModel:
    if sparse is not None:
        return ThreatModel(kind="sparse", k=sparse)
    if shape_file is not None:
        return ThreatModel(mask=load_shape_file(shape_file))
    count = pixels if pixels is not None else patch_size * patch_size
    return ThreatModel(mask=make_shape(shape, count))


def _summary_table(title: str, rows: Dict[str, Any]) -> Table:
    table = Table(title=title, show_header=False, box=None)
    table.add_column("Key", style="cyan")
    table.add_column("Value", style="white")
    for key, value in rows.items():
        if isinstance(value, float):
            value = f"{value:.4f}"
        table.add_row(key, "-" if value is None else str(value))
    return table


@click.group()
@click.version_option(version=__version__, prog_name="patchcert")
@click.option("--verbose", "-v", is_flag=True, help="Show debug log records")
@click.option("--quiet", "-q", is_flag=True, help="Only show warnings and errors")
@click.pass_context
def cli(ctx, verbose, quiet):
    """
    Patch Certification Toolkit

    Certified training, certification and patch attacks for small image
    classifiers.
    """
    ctx.ensure_object(dict)
    configure_logging(verbose=verbose, quiet=quiet)


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------


@cli.command(name="train")
@click.option("--config", "config_file", type=click.Path(exists=True, path_type=Path), help="Config file (key = value)")
@click.option("--preset", help="Bundled preset name (see `patchcert info`)")
@dataset_option
@data_dir_option
@click.option("--arch", help="Registered architecture name")
@click.option("--strategy", type=click.Choice(["all", "random", "guided", "pooled"]), default=None)
@click.option("--patches", "count", type=int, default=None, help="Placements per image (random/guided)")
@click.option("--patch-size", type=int, default=None, help="Square patch side")
@click.option("--epochs", type=int, default=None)
@click.option("--warmup", type=int, default=None, help="Warm-up epochs of the perturbation ramp")
@click.option("--lr", type=float, default=None, help="Initial learning rate")
@click.option("--batch-size", type=int, default=None)
@seed_option
@click.option("--pool-groups", multiple=True, help="Pooling block GxG; repeat for later stages")
@click.option("--sparse", "sparse_k", type=int, default=None, help="Train against K-pixel sparse attacks")
@click.option("--eval-size", type=int, default=None, help="Held-out images for per-epoch accuracy")
@limit_option
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Checkpoint path")
@click.option("--metrics", type=click.Path(dir_okay=False, path_type=Path), help="Per-epoch metrics (JSON lines)")
def train_cmd(config_file, preset, dataset, data_dir, arch, strategy, count, patch_size, epochs, warmup,
              lr, batch_size, seed, pool_groups, sparse_k, eval_size, limit, out, metrics):
    """Train a classifier with a certificate loss."""
    flags = {
        "dataset": dataset,
        "arch": arch,
        "strategy": strategy,
        "count": count,
        "patch_size": patch_size,
        "epochs": epochs,
        "warmup": warmup,
        "lr": lr,
        "batch_size": batch_size,
        "seed": seed,
        "pool_groups": list(pool_groups) or None,
        "sparse_k": sparse_k,
        "eval_size": eval_size,
    }
    values = merge(
        load_preset(preset) if preset else None,
        load_config_file(config_file) if config_file else None,
        flags,
    )
    config = train_config_from(values)
    kind = values.get("dataset", "mnist")
    arch_name = values.get("arch", "mlp255")

    console.print(Panel.fit(
        f"[bold cyan]Certified training[/bold cyan]: {arch_name} on {kind}, "
        f"strategy {config.strategy if not config.sparse_k else f'sparse-k{config.sparse_k}'}",
        border_style="cyan",
    ))

    train_set = load_dataset(kind, data_dir, "train").take(limit)
    eval_set = load_dataset(kind, data_dir, "test").take(config.eval_size)
    net = build_network(arch_name, train_set.image_shape, train_set.num_labels, seed=config.seed)
    groups = group_list(values.get("pool_groups"))
    if groups:
        config.pool_stages = stages_from_groups(net, groups)
    config.validate()

    metrics_path = metrics or out.with_name(out.name + ".metrics.jsonl")
    with ReportWriter(metrics_path) as writer:
        result = train(net, train_set, config, eval_set, on_epoch=lambda m: writer.write(m.to_dict()))

    last = result.history[-1]
    metadata = {
        "dataset": kind,
        "arch": arch_name,
        "config": config.to_dict(),
        "epoch": last.epoch,
        "eps": last.eps,
        "seed": config.seed,
    }
    save_checkpoint(result.net, out, metadata)
    if result.predictor is not None:
        save_checkpoint(result.predictor, out.with_name(out.name + ".predictor"), metadata)
    write_manifest(out, "train", dict(values, out=out), config.seed, out, last.to_dict())

    console.print(_summary_table("Training finished", {
        "checkpoint": out,
        "epochs": len(result.history),
        "final loss": last.loss,
        "clean accuracy": last.clean_acc,
        "certified accuracy (sample)": last.cert_acc_sample,
        "metrics": metrics_path,
    }))


# ----------------------------------------------------------------------
# certify
# ----------------------------------------------------------------------


@cli.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@dataset_option
@data_dir_option
@click.option("--split", type=click.Choice(["train", "test"]), default="test", show_default=True)
@click.option("--patch-size", type=int, default=2, show_default=True)
@click.option("--shape", type=click.Choice(BUILTIN_SHAPES), default="square", show_default=True)
@click.option("--pixels", type=int, default=None, help="Pixel count (defaults to patch-size squared)")
@click.option("--shape-file", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Custom 'row col' cell file")
@click.option("--sparse", type=int, default=None, help="Certify against K-pixel sparse attacks")
@limit_option
@seed_option
@click.option("--report", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--no-early-exit", is_flag=True, help="Sweep every placement even once refuted")
def certify(ckpt, dataset, data_dir, split, patch_size, shape, pixels, shape_file, sparse, limit, seed,
            report, no_early_exit):
    """Certified accuracy of a checkpoint."""
    net, data_kind = _load_network(ckpt, dataset)
    threat = _build_threat(patch_size, shape, pixels, shape_file, sparse)
    sample = _sample(load_dataset(data_kind, data_dir, split), limit, seed)

    console.print(Panel.fit(
        f"[bold cyan]Certifying[/bold cyan] {ckpt.name} against {threat.description} "
        f"on {len(sample)} images",
        border_style="cyan",
    ))

    kwargs = {} if threat.kind == "sparse" else {"early_exit": not no_early_exit}
    with ReportWriter(report) as writer, progress_bar("certifying", len(sample)) as advance:
        summary = certified_accuracy(net, sample, threat, on_result=writer, progress=advance, **kwargs)
        results = {
            "threat": threat.description,
            "images": summary.count,
            "clean_accuracy": summary.clean_accuracy,
            "certified_accuracy": summary.certified_accuracy,
            "seconds": round(summary.elapsed, 3),
        }
        writer.summary(**results)

    write_manifest(report, "certify", {"ckpt": ckpt, "dataset": data_kind, "limit": limit, "split": split},
                   seed, ckpt, results)
    console.print(_summary_table("Certification", results))


# ----------------------------------------------------------------------
# attack
# ----------------------------------------------------------------------


def _attack_config(steps, step_size, restarts, defense, lgs_lambda, lgs_window, lgs_threshold,
                   defense_aware, locations, stride, seed) -> AttackConfig:
    config = AttackConfig(
        steps=steps,
        step_size=step_size,
        restarts=restarts,
        locations=locations,
        stride=stride,
        defense=defense,
        lgs=LGSParams(lgs_lambda, lgs_window, lgs_threshold),
        defense_aware=defense_aware,
        seed=seed or 0,
    )
    config.validate()
    return config


@cli.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@dataset_option
@data_dir_option
@click.option("--patch-size", type=int, default=2, show_default=True)
@click.option("--shape", type=click.Choice(BUILTIN_SHAPES), default="square", show_default=True)
@click.option("--pixels", type=int, default=None)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--step-size", type=float, default=0.05, show_default=True)
@click.option("--restarts", type=int, default=1, show_default=True)
@click.option("--defense", type=click.Choice(["none", "lgs"]), default="none", show_default=True)
@click.option("--lgs-lambda", type=float, default=4.0, show_default=True)
@click.option("--lgs-window", type=int, default=4, show_default=True)
@click.option("--lgs-threshold", type=float, default=0.1, show_default=True)
@click.option("--defense-aware", is_flag=True, help="Differentiate through the LGS step")
@click.option("--locations", type=click.Choice(["all", "corners"]), default="all", show_default=True)
@click.option("--stride", type=int, default=1, show_default=True, help="Subsample placement anchors")
@click.option("--certify/--no-certify", "with_certificates", default=True, help="Also report certified accuracy")
@limit_option
@seed_option
@click.option("--report", type=click.Path(dir_okay=False, path_type=Path), required=True)
def attack(ckpt, dataset, data_dir, patch_size, shape, pixels, steps, step_size, restarts, defense,
           lgs_lambda, lgs_window, lgs_threshold, defense_aware, locations, stride, with_certificates,
           limit, seed, report):
    """Empirical adversarial accuracy under IFGSM patch attacks."""
    net, data_kind = _load_network(ckpt, dataset)
    threat = _build_threat(patch_size, shape, pixels, None, None)
    config = _attack_config(steps, step_size, restarts, defense, lgs_lambda, lgs_window,
                            lgs_threshold, defense_aware, locations, stride, seed)
    sample = _sample(load_dataset(data_kind, data_dir, "test"), limit, seed)

    console.print(Panel.fit(
        f"[bold cyan]Attacking[/bold cyan] {ckpt.name}: {threat.description}, "
        f"{steps} steps, defense {defense}{' (aware)' if defense_aware else ''}",
        border_style="cyan",
    ))

    certified = None
    if with_certificates and defense == "none":
        certified = certified_accuracy(net, sample, threat, early_exit=True).certified_accuracy

    with ReportWriter(report) as writer, progress_bar("attacking", len(sample)) as advance:
        summary = empirical_adversarial_accuracy(net, sample, threat, config, writer, advance)
        results = {
            "threat": threat.description,
            "images": summary.count,
            "placements": summary.placements,
            "stride": config.stride,
            "clean_accuracy": summary.clean_accuracy,
            "certified_accuracy": certified,
            "empirical_accuracy": summary.adversarial_accuracy,
        }
        writer.summary(**results, attack=config.to_dict())

    write_manifest(report, "attack", dict(config.to_dict(), ckpt=ckpt, limit=limit), seed, ckpt, results)
    console.print(_summary_table("Attack", results))


# ----------------------------------------------------------------------
# transfer / tune-lgs
# ----------------------------------------------------------------------


@cli.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@dataset_option
@data_dir_option
@click.option("--pixels", type=click.Choice(["4", "16", "25"]), required=True)
@limit_option
@seed_option
@click.option("--report", type=click.Path(dir_okay=False, path_type=Path), required=True)
def transfer(ckpt, dataset, data_dir, pixels, limit, seed, report):
    """Certify one checkpoint against every shape with the same pixel count."""
    net, data_kind = _load_network(ckpt, dataset)
    count = int(pixels)
    sample = _sample(load_dataset(data_kind, data_dir, "test"), limit, seed)

    table = Table(title=f"Shape transfer, {count} pixels", header_style="bold magenta")
    table.add_column("Shape", style="cyan")
    table.add_column("Mask", style="white")
    table.add_column("Certified", style="green", justify="right")

    results: Dict[str, Optional[float]] = {}
    with ReportWriter(report) as writer:
        for kind in TRANSFER_KINDS:
            try:
                variants = shape_variants(kind, count)
            except ConfigError:
                writer.write({"shape": kind, "pixels": count, "skipped": True})
                results[kind] = None
                table.add_row(kind, "-", "-")
                continue
            worst: Optional[float] = None
            for mask in variants:
                summary = certified_accuracy(net, sample, ThreatModel(mask=mask), early_exit=True)
                accuracy = summary.certified_accuracy
                writer.write({"shape": kind, "mask": mask.name, "pixels": mask.pixel_count,
                              "certified_accuracy": accuracy, "images": summary.count})
                table.add_row(kind, mask.name, f"{accuracy:.4f}")
                worst = accuracy if worst is None else min(worst, accuracy)
            results[kind] = worst
        writer.summary(pixels=count, images=len(sample), **results)

    write_manifest(report, "transfer", {"ckpt": ckpt, "pixels": count, "limit": limit}, seed, ckpt, results)
    console.print(table)


@cli.command(name="tune-lgs")
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@dataset_option
@data_dir_option
@click.option("--patch-size", type=int, default=5, show_default=True)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--step-size", type=float, default=0.05, show_default=True)
@click.option("--locations", type=click.Choice(["all", "corners"]), default="corners", show_default=True)
@click.option("--stride", type=int, default=1, show_default=True)
@limit_option
@seed_option
@click.option("--report", type=click.Path(dir_okay=False, path_type=Path), required=True)
def tune_lgs_cmd(ckpt, dataset, data_dir, patch_size, steps, step_size, locations, stride, limit, seed, report):
    """Grid-search LGS parameters against the defense-unaware attack."""
    net, data_kind = _load_network(ckpt, dataset)
    threat = _build_threat(patch_size, "square", None, None, None)
    config = _attack_config(steps, step_size, 1, "lgs", 4.0, 4, 0.1, False, locations, stride, seed)
    sample = _sample(load_dataset(data_kind, data_dir, "test"), limit, seed)

    console.print(Panel.fit(
        f"[bold cyan]Tuning LGS[/bold cyan] on {len(sample)} images, {threat.description}",
        border_style="cyan",
    ))
    tuning = tune_lgs(net, sample, threat, config)

    with ReportWriter(report) as writer:
        for row in tuning.table:
            writer.write(row)
        writer.summary(
            best={"lam": tuning.best.lam, "window": tuning.best.window, "threshold": tuning.best.threshold},
            adversarial_accuracy=tuning.best_accuracy,
        )
    write_manifest(report, "tune-lgs", dict(config.to_dict(), ckpt=ckpt, limit=limit), seed, ckpt,
                   {"best_accuracy": tuning.best_accuracy})

    console.print(_summary_table("Best LGS parameters", {
        "lambda": tuning.best.lam,
        "window": tuning.best.window,
        "threshold": tuning.best.threshold,
        "adversarial accuracy": tuning.best_accuracy,
    }))


# ----------------------------------------------------------------------
# info / version
# ----------------------------------------------------------------------


@cli.command()
def info():
    """List architectures, shapes and presets."""
    console.print(Panel.fit(
        "[bold cyan]Patch Certification Toolkit[/bold cyan]\n"
        f"Version: [green]{__version__}[/green]",
        border_style="cyan",
    ))

    table = Table(show_header=False, box=None)
    table.add_column("Key", style="cyan")
    table.add_column("Value", style="white")
    table.add_row("Architectures", ", ".join(sorted(ARCHITECTURES)))
    table.add_row("Shapes", ", ".join(BUILTIN_SHAPES))
    table.add_row("Shape files", ", ".join(p.stem for p in bundled_shape_files()) or "-")
    table.add_row("Rectangle menus", ", ".join(str(k) for k in sorted(RECTANGLE_MENU)))
    table.add_row("Presets", ", ".join(list_presets()) or "-")
    table.add_row("Python Version", f"{sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}")
    console.print(table)

    console.print("\n💡 [yellow]Quick Start:[/yellow]")
    console.print("  [cyan]patchcert train --preset mnist-smoke --out runs/mlp.pcrt[/cyan]")
    console.print("  [cyan]patchcert certify --ckpt runs/mlp.pcrt --report runs/cert.jsonl[/cyan]")


@cli.command()
def version():
    """Show version information."""
    console.print(Panel.fit(
        f"[bold cyan]Patch Certification Toolkit[/bold cyan]\n"
        f"Version: [green]{__version__}[/green]",
        border_style="cyan",
    ))


def main():
    """Main entry point for the CLI."""
    try:
        cli()
    except KeyboardInterrupt:
        console.print("\n\n⚠️  [yellow]Operation cancelled by user[/yellow]")
        sys.exit(130)
    except PatchCertError as e:
        console.print(f"\n❌ [red]Error: {str(e)}[/red]")
        sys.exit(1)


if __name__ == '__main__':
    main()
