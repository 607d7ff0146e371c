"""Command-line entry point for data generation, training, ablations and evaluation.

Usage:
    mapo gen-data config.yaml
    mapo warmup config.yaml --epochs 20
    mapo train-mapo config.yaml --from runs/warmup/checkpoint --strategy dropout --strategy threshold
    mapo baseline config.yaml --from runs/warmup/checkpoint
    mapo ablate-tau config.yaml --from runs/warmup/checkpoint --taus "0.1 0.2 0.3 0.4 0.5"
    mapo eval runs/mapo/dropout/checkpoint data --split test
    mapo variance-map runs/warmup/checkpoint data --sample blobs-00003

Each command writes into its own directory under ``output.dir`` (or ``--out``),
refuses a non-empty directory unless ``--force`` is given, and writes
``resolved_config.yaml`` before computing anything.

Exit codes: 0 success, 1 invalid config or arguments, 2 data or runtime error.
"""

from __future__ import annotations

import re
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import typer
from loguru import logger

from mapo_tools.common import prepare_output_dir, write_csv
from mapo_tools.config import RunConfig, echo_config, load_config
from mapo_tools.constants import EXIT_RUNTIME, EXIT_VALIDATION, P5_MAXVAL
from mapo_tools.errors import ConfigError, MapoError
from mapo_tools.logging_utils import setup_logging
from mapo_tools.preference import DropoutGrid, PreferenceSet, generate_candidates, variance_map
from mapo_tools.segnet import ModelState, init_params, load_checkpoint, save_checkpoint
from mapo_tools.synth import Sample, generate_dataset, load_dataset, save_dataset, select_split, write_pgm
from mapo_tools.trainer import (
    EvalTable,
    TrainConfig,
    evaluate,
    online_loop,
    supervised_continue,
    warmup_train,
    write_eval_table,
    write_round_logs,
)

app = typer.Typer(help="Preference-optimised segmentation workbench.", no_args_is_help=True)

STRATEGIES = ("dropout", "threshold", "noise")
COMPARISON_COLUMNS = (
    "strategy",
    "test_dice_mean",
    "test_dice_std",
    "test_asd_mean",
    "test_asd_std",
    "asd_undefined",
    "round1_pixel_variance",
)
ABLATION_COLUMNS = (
    "tau",
    "test_dice_mean",
    "test_dice_std",
    "test_asd_mean",
    "test_asd_std",
    "asd_undefined",
    "mean_pairs_found",
)


@contextmanager
def _exit_codes() -> Iterator[None]:
    try:
        yield
    except ConfigError as e:
        logger.error(str(e))
        raise typer.Exit(EXIT_VALIDATION)
    except (MapoError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        raise typer.Exit(EXIT_RUNTIME)


def _start(name: str, out_dir: Path, force: bool) -> Path:
    prepare_output_dir(out_dir, force)
    setup_logging(name, out_dir)
    return out_dir


def _command_dir(cfg: RunConfig, out: Optional[Path], default: str) -> Path:
    return out if out is not None else cfg.output_dir / default


def _load_samples(cfg: RunConfig) -> list[Sample]:
    if (cfg.data_path / "manifest.tsv").exists():
        spec, samples = load_dataset(cfg.data_path)
        if spec.image_size != cfg.data.image_size:
            raise ConfigError(
                f"Dataset at {cfg.data_path} holds {spec.image_size} images, "
                f"data.image_size is {cfg.data.image_size}"
            )
        if spec != cfg.data:
            logger.warning(f"Dataset at {cfg.data_path} was generated from {spec}, not the configured task")
        return samples
    logger.info(f"No dataset at {cfg.data_path}; generating it in memory")
    return generate_dataset(cfg.data)


def _require_image_shape(state: ModelState, samples: list[Sample], checkpoint: Path) -> None:
    expected = state.spec.input_shape[1:]
    if samples and samples[0].gt.shape != expected:
        raise ConfigError(
            f"Checkpoint {checkpoint} expects {expected} images, the dataset holds {samples[0].gt.shape}"
        )


def _load_warm(path: Path, cfg: RunConfig, samples: list[Sample]) -> ModelState:
    state = load_checkpoint(path, trainable=True)
    _require_image_shape(state, samples, path)
    if state.spec != cfg.model:
        logger.warning(f"Checkpoint {path} holds {state.spec}; using it instead of the configured model")
    return state


def _aggregate(table: EvalTable) -> tuple:
    return (table.mean_dice, table.std_dice, table.mean_asd, table.std_asd, table.asd_undefined)


def _report_test(state: ModelState, samples: list[Sample], out_dir: Path) -> EvalTable:
    table = evaluate(state, select_split(samples, "test"))
    write_eval_table(table, out_dir / "test_metrics.csv")
    logger.info(
        f"Test Dice {table.mean_dice:.4f} ± {table.std_dice:.4f}, "
        f"ASD {table.mean_asd}, undefined ASD {table.asd_undefined}"
    )
    return table


def _parse_taus(raw: list[str]) -> list[float]:
    taus = []
    for chunk in raw:
        for token in re.split(r"[\s,]+", chunk.strip()):
            if not token:
                continue
            try:
                value = float(token)
            except ValueError:
                raise ConfigError(f"--taus: {token!r} is not a number") from None
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"--taus: {value} lies outside [0, 1]")
            taus.append(value)
    if not taus:
        raise ConfigError("--taus needs at least one value")
    return taus


ConfigArg = typer.Argument(..., help="YAML run config.")
OutOption = typer.Option(None, "--out", help="Output directory. Defaults to a subdirectory of output.dir.")
ForceOption = typer.Option(False, "--force", help="Write into a non-empty output directory.")


@app.command("gen-data")
def gen_data(
    config: Path = ConfigArg,
    force: bool = ForceOption,
):
    """Render the synthetic dataset described by the ``data`` section."""
    with _exit_codes():
        cfg = load_config(config)
        out_dir = _start("gen_data", cfg.data_path, force)
        echo_config(out_dir, "gen-data", cfg)
        save_dataset(generate_dataset(cfg.data), cfg.data, out_dir)


@app.command()
def warmup(
    config: Path = ConfigArg,
    epochs: Optional[int] = typer.Option(None, "--epochs", min=0, help="Override train.warmup_epochs."),
    out: Optional[Path] = OutOption,
    force: bool = ForceOption,
):
    """Supervised warm-up with dropout; saves the best-validation checkpoint."""
    with _exit_codes():
        cfg = load_config(config)
        out_dir = _start("warmup", _command_dir(cfg, out, "warmup"), force)
        epochs = cfg.train.warmup_epochs if epochs is None else epochs
        echo_config(out_dir, "warmup", cfg, {"epochs": epochs})
        samples = _load_samples(cfg)
        state = init_params(cfg.model, cfg.train.seeds.init)
        best, logs = warmup_train(state, samples, cfg.train, epochs=epochs)
        save_checkpoint(best, out_dir / "checkpoint")
        write_round_logs(logs, out_dir / "warmup_log.csv")
        _report_test(best, samples, out_dir)


def _train_strategy(
    warm: ModelState, samples: list[Sample], train_cfg: TrainConfig, out_dir: Path
) -> tuple[ModelState, list[PreferenceSet]]:
    rounds: list[PreferenceSet] = []
    best, logs = online_loop(
        warm, samples, train_cfg, cache_dir=out_dir / "preferences", on_round=rounds.append
    )
    save_checkpoint(best, out_dir / "checkpoint")
    write_round_logs(logs, out_dir / "mapo_log.csv")
    return best, rounds


@app.command("train-mapo")
def train_mapo(
    config: Path = ConfigArg,
    from_: Path = typer.Option(..., "--from", help="Warm-up checkpoint directory."),
    strategy: Optional[list[str]] = typer.Option(
        None, "--strategy", help="dropout, threshold or noise. Repeat to compare strategies."
    ),
    out: Optional[Path] = OutOption,
    force: bool = ForceOption,
):
    """Online preference training from a warm checkpoint, one run per strategy."""
    with _exit_codes():
        cfg = load_config(config)
        strategies = strategy or [cfg.train.strategy]
        unknown = [s for s in strategies if s not in STRATEGIES]
        if unknown:
            raise ConfigError(f"--strategy: unknown strategy {unknown[0]!r}")
        out_dir = _start("train_mapo", _command_dir(cfg, out, "mapo"), force)
        echo_config(out_dir, "train-mapo", cfg, {"from": str(from_), "strategies": strategies})
        samples = _load_samples(cfg)
        warm = _load_warm(from_, cfg, samples)

        comparison = []
        for name in strategies:
            logger.info(f"Training with {name} candidates from {from_}")
            strategy_dir = out_dir / name
            best, rounds = _train_strategy(warm, samples, replace(cfg.train, strategy=name), strategy_dir)
            table = _report_test(best, samples, strategy_dir)
            comparison.append((name, *_aggregate(table), rounds[0].mean_pixel_variance))
        write_csv(out_dir / "strategy_comparison.csv", COMPARISON_COLUMNS, comparison)


@app.command()
def baseline(
    config: Path = ConfigArg,
    from_: Path = typer.Option(..., "--from", help="Warm-up checkpoint directory."),
    epochs: Optional[int] = typer.Option(
        None, "--epochs", min=1, help="Defaults to train.dpo_epochs, matching preference training."
    ),
    out: Optional[Path] = OutOption,
    force: bool = ForceOption,
):
    """Continued supervised training from a warm checkpoint."""
    with _exit_codes():
        cfg = load_config(config)
        out_dir = _start("baseline", _command_dir(cfg, out, "baseline"), force)
        epochs = cfg.train.dpo_epochs if epochs is None else epochs
        echo_config(out_dir, "baseline", cfg, {"from": str(from_), "epochs": epochs})
        samples = _load_samples(cfg)
        best, logs = supervised_continue(_load_warm(from_, cfg, samples), samples, cfg.train, epochs)
        save_checkpoint(best, out_dir / "checkpoint")
        write_round_logs(logs, out_dir / "baseline_log.csv")
        _report_test(best, samples, out_dir)


@app.command("ablate-tau")
def ablate_tau(
    config: Path = ConfigArg,
    taus: list[str] = typer.Option(
        ..., "--taus", help='Dice-gap thresholds, e.g. --taus "0.1 0.2 0.3" or repeated.'
    ),
    from_: Optional[Path] = typer.Option(
        None, "--from", help="Warm-up checkpoint. Without it a warm-up runs first."
    ),
    out: Optional[Path] = OutOption,
    force: bool = ForceOption,
):
    """One preference-training run per tau from a shared warm checkpoint."""
    with _exit_codes():
        cfg = load_config(config)
        values = _parse_taus(taus)
        out_dir = _start("ablate_tau", _command_dir(cfg, out, "ablate_tau"), force)
        echo_config(
            out_dir, "ablate-tau", cfg, {"from": None if from_ is None else str(from_), "taus": values}
        )
        samples = _load_samples(cfg)
        if from_ is None:
            warm, logs = warmup_train(init_params(cfg.model, cfg.train.seeds.init), samples, cfg.train)
            save_checkpoint(warm, out_dir / "warmup" / "checkpoint")
            write_round_logs(logs, out_dir / "warmup" / "warmup_log.csv")
        else:
            warm = _load_warm(from_, cfg, samples)

        summary = []
        for tau in values:
            logger.info(f"Ablation run with tau={tau}")
            run_dir = out_dir / f"tau_{tau:g}"
            best, rounds = _train_strategy(warm, samples, replace(cfg.train, tau=tau), run_dir)
            table = _report_test(best, samples, run_dir)
            pairs = float(np.mean([r.pairs_found for r in rounds]))
            summary.append((tau, *_aggregate(table), pairs))
        write_csv(out_dir / "tau_ablation.csv", ABLATION_COLUMNS, summary)


@app.command("eval")
def eval_(
    checkpoint: Path = typer.Argument(..., help="Checkpoint directory."),
    dataset: Path = typer.Argument(..., help="Dataset directory written by gen-data."),
    split: str = typer.Option("test", "--split", help="train, val or test."),
    out: Path = typer.Option(Path("eval"), "--out", help="Output directory."),
    force: bool = ForceOption,
):
    """Per-sample Dice and ASD with aggregate rows."""
    with _exit_codes():
        if split not in ("train", "val", "test"):
            raise ConfigError(f"--split: expected train, val or test, got {split!r}")
        out_dir = _start("eval", out, force)
        echo_config(
            out_dir, "eval", extra={"checkpoint": str(checkpoint), "dataset": str(dataset), "split": split}
        )
        state = load_checkpoint(checkpoint, trainable=False)
        _, samples = load_dataset(dataset)
        _require_image_shape(state, samples, checkpoint)
        table = evaluate(state, select_split(samples, split))
        write_eval_table(table, out_dir / f"{split}_metrics.csv")
        logger.info(f"{split}: Dice {table.mean_dice:.4f}, undefined ASD {table.asd_undefined}")


@app.command("variance-map")
def variance_map_(
    checkpoint: Path = typer.Argument(..., help="Checkpoint directory."),
    dataset: Path = typer.Argument(..., help="Dataset directory written by gen-data."),
    sample: str = typer.Option(..., "--sample", help="Sample id."),
    strategy: str = typer.Option("dropout", "--strategy", help="dropout, threshold or noise."),
    grid: str = typer.Option("2d", "--grid", help="Dropout grid preset: 2d or 3d."),
    seed: int = typer.Option(2, "--seed", min=0, help="Sampling seed."),
    out: Path = typer.Option(Path("variance"), "--out", help="Output directory."),
    force: bool = ForceOption,
):
    """Pixel-wise variance of one sample's candidates, written as a 16-bit greymap."""
    with _exit_codes():
        if strategy not in STRATEGIES:
            raise ConfigError(f"--strategy: unknown strategy {strategy!r}")
        if grid not in ("2d", "3d"):
            raise ConfigError(f"--grid: expected 2d or 3d, got {grid!r}")
        out_dir = _start("variance_map", out, force)
        echo_config(
            out_dir,
            "variance-map",
            extra={
                "checkpoint": str(checkpoint),
                "dataset": str(dataset),
                "sample": sample,
                "strategy": strategy,
                "grid": grid,
                "seed": seed,
            },
        )
        state = load_checkpoint(checkpoint, trainable=False)
        _, samples = load_dataset(dataset)
        _require_image_shape(state, samples, checkpoint)
        matches = [s for s in samples if s.id == sample]
        if not matches:
            raise ConfigError(f"--sample: no sample {sample!r} in {dataset}")
        target = matches[0]
        cands = generate_candidates(
            strategy, state, target.image, target.gt, DropoutGrid.preset(grid), seed, target.id
        )
        variance = variance_map(cands)
        # Binary candidates have variance at most 0.25.
        levels = np.round(variance / 0.25 * P5_MAXVAL).astype(np.uint16)
        write_pgm(out_dir / f"{sample}_variance.pgm", levels)
        logger.info(f"Mean pixel variance for {sample}: {float(variance.mean()):.5f}")


if __name__ == "__main__":
    app()
