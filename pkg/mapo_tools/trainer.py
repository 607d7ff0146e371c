"""Warm-up, preference optimisation rounds, online refresh and evaluation.

A full run goes through four stages:

1. ``warmup_train``: supervised Dice+BCE with dropout active, keeping the
   checkpoint with the best validation Dice.
2. ``build_preference_set``: candidates from a frozen snapshot of the current
   model, reduced to one preference pair per training sample (or none).
3. ``dpo_round``: preference loss against the frozen reference plus the
   weighted supervised terms, with dropout disabled in every forward.
4. ``online_loop``: ``dpo_epochs / refresh_interval`` rounds of 2 and 3, each
   starting from a fresh snapshot.

One thread owns and updates the parameters. Candidate generation may fan out
over worker threads on an immutable snapshot and joins before training resumes.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from beartype import beartype
from loguru import logger

from mapo_tools.autodiff import Tape, no_grad
from mapo_tools.common import derive_seed, write_csv
from mapo_tools.constants import (
    DEFAULT_LR,
    DEFAULT_WARMUP_DROPOUT,
    DESK_SCHEDULE,
    GRAD_CLIP_NORM,
    LOG_CSV_COLUMNS,
    FULL_SCHEDULE,
)
from mapo_tools.errors import ContractViolation, NonFiniteGradientError
from mapo_tools.losses import (
    DpoConfig,
    SupervisedKind,
    bce_loss,
    combined_loss,
    dice_loss,
    supervised_loss,
)
from mapo_tools.metrics import asd, binarize, dice_score
from mapo_tools.optim import Optimizer, OptimizerKind, adam_step
from mapo_tools.preference import (
    DropoutGrid,
    PreferenceSet,
    Strategy,
    build_preference_set,
    save_preference_set,
)
from mapo_tools.segnet import ModelState, clone_frozen, forward, snapshot
from mapo_tools.synth import Sample, select_split

__all__ = [
    "EvalRow",
    "EvalTable",
    "RoundLog",
    "Seeds",
    "TrainConfig",
    "adam_step",
    "dpo_round",
    "evaluate",
    "online_loop",
    "supervised_continue",
    "warmup_train",
    "write_eval_table",
    "write_round_logs",
]

Stage = Literal["warmup", "supervised", "dpo"]

# Separates the DPO shuffling stream from the supervised one.
_DPO_STREAM = 1


@dataclass(frozen=True)
class Seeds:
    init: int = 0
    data: int = 1
    sampling: int = 2

    def __post_init__(self) -> None:
        if min(self.init, self.data, self.sampling) < 0:
            raise ContractViolation(f"Seeds must be non-negative, got {self}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = DEFAULT_LR
    beta: float = 0.1
    tau: float = 0.3
    lam: float = 0.5
    warmup_epochs: int = DESK_SCHEDULE[0]
    dpo_epochs: int = DESK_SCHEDULE[1]
    refresh_interval: int = DESK_SCHEDULE[2]
    warmup_dropout: float = DEFAULT_WARMUP_DROPOUT
    strategy: Strategy = "dropout"
    grid: DropoutGrid = field(default_factory=DropoutGrid)
    seeds: Seeds = field(default_factory=Seeds)
    batch_size: int = 8
    optimizer: OptimizerKind = "adam"
    weight_decay: float = 0.01
    grad_clip: float | None = GRAD_CLIP_NORM
    supervised_loss: SupervisedKind = "dice_bce"
    refresh_reference: bool = True
    workers: int = 1

    def __post_init__(self) -> None:
        # Validates beta, tau and lam.
        self.dpo()
        if not self.lr > 0:
            raise ContractViolation(f"lr must be positive, got {self.lr}")
        if self.warmup_epochs < 0:
            raise ContractViolation(f"warmup_epochs must be non-negative, got {self.warmup_epochs}")
        if self.dpo_epochs <= 0 or self.refresh_interval <= 0:
            raise ContractViolation("dpo_epochs and refresh_interval must be positive")
        if self.dpo_epochs % self.refresh_interval:
            raise ContractViolation(
                f"refresh_interval {self.refresh_interval} does not divide dpo_epochs {self.dpo_epochs}"
            )
        if not 0.0 <= self.warmup_dropout < 1.0:
            raise ContractViolation(f"warmup_dropout must lie in [0, 1), got {self.warmup_dropout}")
        if self.strategy not in ("dropout", "threshold", "noise"):
            raise ContractViolation(f"Unknown strategy {self.strategy!r}")
        if self.batch_size <= 0 or self.workers <= 0:
            raise ContractViolation("batch_size and workers must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ContractViolation(f"grad_clip must be positive, got {self.grad_clip}")

    @classmethod
    def full_scale(cls, **overrides) -> TrainConfig:
        warmup, dpo, refresh = FULL_SCHEDULE
        return cls(
            **{"warmup_epochs": warmup, "dpo_epochs": dpo, "refresh_interval": refresh, **overrides}
        )

    @property
    def rounds(self) -> int:
        return self.dpo_epochs // self.refresh_interval

    def dpo(self) -> DpoConfig:
        return DpoConfig(beta=self.beta, tau=self.tau, lam=self.lam)

    def optimizer_for(self, state: ModelState) -> Optimizer:
        return Optimizer(
            state,
            self.lr,
            kind=self.optimizer,
            weight_decay=self.weight_decay,
            clip_norm=self.grad_clip,
        )


@dataclass(frozen=True)
class RoundLog:
    epoch: int
    stage: Stage
    train_loss: float
    val_loss: float
    val_dice: float
    val_asd: float | None
    pairs_found: int = 0
    pairs_skipped: int = 0
    reference_version: int | None = None

    def as_row(self) -> tuple:
        val_asd = math.nan if self.val_asd is None else self.val_asd
        return (
            self.epoch,
            self.stage,
            self.train_loss,
            self.val_loss,
            self.val_dice,
            val_asd,
            self.pairs_found,
            self.pairs_skipped,
            self.reference_version,
        )


@dataclass(frozen=True)
class EvalRow:
    sample_id: str
    dice: float
    asd: float | None
    loss: float


@dataclass(frozen=True)
class EvalTable:
    rows: tuple[EvalRow, ...]

    def _defined_asd(self) -> list[float]:
        return [r.asd for r in self.rows if r.asd is not None]

    @property
    def mean_dice(self) -> float:
        return float(np.mean([r.dice for r in self.rows]))

    @property
    def std_dice(self) -> float:
        return float(np.std([r.dice for r in self.rows]))

    @property
    def mean_asd(self) -> float | None:
        values = self._defined_asd()
        return float(np.mean(values)) if values else None

    @property
    def std_asd(self) -> float | None:
        values = self._defined_asd()
        return float(np.std(values)) if values else None

    @property
    def asd_undefined(self) -> int:
        return len(self.rows) - len(self._defined_asd())

    @property
    def mean_loss(self) -> float:
        return float(np.mean([r.loss for r in self.rows]))


@beartype
def evaluate(state: ModelState, samples: list[Sample]) -> EvalTable:
    """Per-sample Dice, ASD and Dice+BCE loss with dropout off, binarised at 0.5."""
    rows = []
    with no_grad():
        for s in samples:
            probs = forward(state, s.image)
            mask = binarize(probs)
            loss = (dice_loss(probs, s.gt) + bce_loss(probs, s.gt)).item()
            rows.append(EvalRow(s.id, dice_score(mask, s.gt), asd(mask, s.gt), loss))
    return EvalTable(tuple(rows))


def _split(samples: list[Sample]) -> tuple[list[Sample], list[Sample]]:
    train, val = select_split(samples, "train"), select_split(samples, "val")
    if not train:
        raise ContractViolation("Training split is empty")
    if not val:
        raise ContractViolation("Validation split is empty")
    return train, val


def _batches(n: int, batch_size: int, seed: int) -> list[np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class _BestTracker:
    """Keeps a snapshot of the state with the highest validation Dice (first wins ties)."""

    def __init__(self) -> None:
        self.state: ModelState | None = None
        self.dice = -math.inf

    def offer(self, state: ModelState, log: RoundLog) -> None:
        if log.val_dice > self.dice:
            self.state = snapshot(state)
            self.dice = log.val_dice


def _supervised_epoch(
    state: ModelState,
    optimizer: Optimizer,
    train: list[Sample],
    cfg: TrainConfig,
    epoch: int,
) -> float:
    total = 0.0
    try:
        for b, batch in enumerate(_batches(len(train), cfg.batch_size, derive_seed(cfg.seeds.data, epoch))):
            weight = 1.0 / len(batch)
            for j in batch:
                s = train[int(j)]
                seed = derive_seed(cfg.seeds.data, epoch, b, int(j))
                with Tape() as tape:
                    probs = forward(state, s.image, cfg.warmup_dropout, seed, stochastic=True)
                    loss = supervised_loss(cfg.supervised_loss, probs, s.gt)
                    tape.backward(loss * weight)
                total += loss.item()
            optimizer.step()
            logger.debug(f"epoch {epoch} batch {b}: grad norm {optimizer.last_grad_norm:.4f}")
    except NonFiniteGradientError as e:
        logger.error(f"Aborting epoch {epoch}: {e}")
        state.zero_grad()
    return total / len(train)


def _log_epoch(log: RoundLog) -> None:
    val_asd = "undefined" if log.val_asd is None else f"{log.val_asd:.3f}"
    extra = ""
    if log.stage == "dpo":
        extra = f", pairs {log.pairs_found}/{log.pairs_found + log.pairs_skipped}, ref v{log.reference_version}"
    logger.info(
        f"[{log.stage}] epoch {log.epoch}: train {log.train_loss:.4f}, val loss {log.val_loss:.4f}, "
        f"val Dice {log.val_dice:.4f}, val ASD {val_asd}{extra}"
    )


@beartype
def warmup_train(
    state: ModelState,
    samples: list[Sample],
    cfg: TrainConfig,
    epochs: int | None = None,
    stage: Stage = "warmup",
) -> tuple[ModelState, list[RoundLog]]:
    """Supervised training with dropout active; returns the best-validation checkpoint."""
    train, val = _split(samples)
    epochs = cfg.warmup_epochs if epochs is None else epochs
    if epochs < 0:
        raise ContractViolation(f"epochs must be non-negative, got {epochs}")
    if epochs == 0:
        return state, []
    optimizer = cfg.optimizer_for(state)
    best = _BestTracker()
    logs: list[RoundLog] = []
    for epoch in range(1, epochs + 1):
        train_loss = _supervised_epoch(state, optimizer, train, cfg, epoch)
        table = evaluate(state, val)
        log = RoundLog(epoch, stage, train_loss, table.mean_loss, table.mean_dice, table.mean_asd)
        _log_epoch(log)
        logs.append(log)
        best.offer(state, log)
    assert best.state is not None
    best.state.lineage = (*state.lineage, f"{stage}:{epochs}:data{cfg.seeds.data}")
    logger.info(f"[{stage}] best val Dice {best.dice:.4f}")
    return best.state, logs


@beartype
def supervised_continue(
    state: ModelState, samples: list[Sample], cfg: TrainConfig, epochs: int
) -> tuple[ModelState, list[RoundLog]]:
    """Continued supervised training from a warm checkpoint, the baseline for preference training."""
    return warmup_train(state, samples, cfg, epochs=epochs, stage="supervised")


EpochCallback = Callable[[ModelState, RoundLog], None]


@beartype
def dpo_round(
    state: ModelState,
    reference: ModelState,
    pref_set: PreferenceSet,
    samples: list[Sample],
    cfg: TrainConfig,
    epochs: int,
    optimizer: Optimizer | None = None,
    start_epoch: int = 1,
    on_epoch: EpochCallback | None = None,
) -> tuple[ModelState, list[RoundLog]]:
    """Train *state* on the preference pairs of one round with dropout disabled."""
    if not reference.frozen:
        raise ContractViolation("The reference model must be frozen")
    if pref_set.reference_version != reference.version:
        raise ContractViolation(
            f"Preference set expects reference v{pref_set.reference_version}, got v{reference.version}"
        )
    if pref_set.model_version != state.version:
        raise ContractViolation(
            f"Preference set was generated by model v{pref_set.model_version}, training v{state.version}"
        )
    train, val = _split(samples)
    pairs = pref_set.pairs_by_id()
    if set(pairs) != {s.id for s in train}:
        raise ContractViolation("Preference set does not cover the training split")
    dpo_cfg = cfg.dpo()
    with no_grad():
        ref_maps = {s.id: forward(reference, s.image) for s in train if pairs[s.id] is not None}
    optimizer = optimizer or cfg.optimizer_for(state)

    logs: list[RoundLog] = []
    for epoch in range(start_epoch, start_epoch + epochs):
        total = 0.0
        seed = derive_seed(cfg.seeds.data, _DPO_STREAM, epoch)
        try:
            for b, batch in enumerate(_batches(len(train), cfg.batch_size, seed)):
                weight = 1.0 / len(batch)
                contributed = False
                for j in batch:
                    s = train[int(j)]
                    pair = pairs[s.id]
                    if pair is None and cfg.lam == 0:
                        continue
                    with Tape() as tape:
                        probs = forward(state, s.image)
                        if pair is None:
                            loss = (dice_loss(probs, s.gt) + bce_loss(probs, s.gt)) * cfg.lam
                        else:
                            loss = combined_loss(probs, ref_maps[s.id], s.gt, pair.pos, pair.neg, dpo_cfg)
                        tape.backward(loss * weight)
                    total += loss.item()
                    contributed = True
                if contributed:
                    optimizer.step()
        except NonFiniteGradientError as e:
            logger.error(f"Aborting epoch {epoch}: {e}")
            state.zero_grad()
        table = evaluate(state, val)
        log = RoundLog(
            epoch,
            "dpo",
            total / len(train),
            table.mean_loss,
            table.mean_dice,
            table.mean_asd,
            pref_set.pairs_found,
            pref_set.pairs_skipped,
            reference.version,
        )
        _log_epoch(log)
        logs.append(log)
        if on_epoch is not None:
            on_epoch(state, log)
    return state, logs


@beartype
def online_loop(
    warm_state: ModelState,
    samples: list[Sample],
    cfg: TrainConfig,
    cache_dir: Path | None = None,
    on_round: Callable[[PreferenceSet], None] | None = None,
) -> tuple[ModelState, list[RoundLog]]:
    """Rounds of regeneration and preference training; returns the best checkpoint overall."""
    train, _ = _split(samples)
    state = snapshot(warm_state)
    optimizer = cfg.optimizer_for(state)
    best = _BestTracker()
    reference: ModelState | None = None
    logs: list[RoundLog] = []
    for r in range(1, cfg.rounds + 1):
        state.version += 1
        current = clone_frozen(state)
        if reference is None or cfg.refresh_reference:
            reference = current
            logger.info(f"Round {r}: new reference snapshot v{reference.version}")
        pref_set = build_preference_set(
            current,
            train,
            cfg.strategy,
            cfg.grid,
            cfg.tau,
            cfg.seeds.sampling,
            r,
            reference_version=reference.version,
            workers=cfg.workers,
        )
        if cache_dir is not None:
            save_preference_set(pref_set, cache_dir / f"round_{r:02d}.yaml")
        if on_round is not None:
            on_round(pref_set)
        state.lineage = (*state.lineage, f"dpo:{cfg.strategy}:round{r}")
        _, round_logs = dpo_round(
            state,
            reference,
            pref_set,
            samples,
            cfg,
            cfg.refresh_interval,
            optimizer=optimizer,
            start_epoch=(r - 1) * cfg.refresh_interval + 1,
            on_epoch=best.offer,
        )
        logs.extend(round_logs)
    assert best.state is not None
    logger.info(f"[dpo] best val Dice {best.dice:.4f} after {cfg.rounds} rounds")
    return best.state, logs


@beartype
def write_round_logs(logs: list[RoundLog], path: Path) -> Path:
    return write_csv(path, LOG_CSV_COLUMNS, (log.as_row() for log in logs))


EVAL_COLUMNS = ("sample_id", "dice", "asd", "loss")


@beartype
def write_eval_table(table: EvalTable, path: Path) -> Path:
    """Per-sample rows followed by ``mean``, ``std`` and ``asd_undefined`` aggregate rows."""
    rows: list[tuple] = [
        (r.sample_id, r.dice, math.nan if r.asd is None else r.asd, r.loss) for r in table.rows
    ]
    nan = math.nan
    rows.append(("mean", table.mean_dice, nan if table.mean_asd is None else table.mean_asd, table.mean_loss))
    rows.append(("std", table.std_dice, nan if table.std_asd is None else table.std_asd, None))
    rows.append(("asd_undefined", None, table.asd_undefined, None))
    return write_csv(path, EVAL_COLUMNS, rows)
