"""Prediction candidates, preference-pair selection and pixel-variance diagnostics.

Three candidate strategies are available:

- ``dropout``: one stochastic forward per rate of a ``DropoutGrid``, with
  seed ``seed_base ^ rate_index``.
- ``threshold``: one deterministic forward binarised at 11 thresholds
  0.375, 0.400, ..., 0.625.
- ``noise``: 11 deterministic forwards on the image plus Gaussian pixel noise
  with sigma 0, 0.005, ..., 0.05.

Selection keeps the best candidate by Dice as the preferred mask and the worst
candidate whose Dice gap to the best is at least ``tau`` as the rejected mask.
Ties go to the lowest candidate index. When no candidate is far enough below
the best, the sample has no pair for the round.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from beartype import beartype
from loguru import logger

from mapo_tools.autodiff import Tensor, no_grad
from mapo_tools.common import derive_seed
from mapo_tools.constants import GRID_2D, GRID_3D, NOISE_SIGMAS, THRESHOLDS
from mapo_tools.errors import CheckpointError, ContractViolation
from mapo_tools.metrics import BinaryMask, binarize, dice_ratio, to_mask
from mapo_tools.segnet import ModelState, forward
from mapo_tools.synth import Sample

Strategy = Literal["dropout", "threshold", "noise"]

CACHE_FORMAT = "mapo-preferences/1"


@dataclass(frozen=True)
class DropoutGrid:
    rates: tuple[float, ...] = GRID_2D

    def __post_init__(self) -> None:
        if not self.rates:
            raise ContractViolation("Dropout grid must contain at least one rate")
        if any(not 0.0 <= r < 1.0 for r in self.rates):
            raise ContractViolation(f"Dropout rates must lie in [0, 1), got {self.rates}")
        if any(b <= a for a, b in zip(self.rates, self.rates[1:])):
            raise ContractViolation(f"Dropout rates must be strictly increasing, got {self.rates}")

    @classmethod
    def preset(cls, name: Literal["2d", "3d"]) -> DropoutGrid:
        return cls(GRID_2D if name == "2d" else GRID_3D)


@dataclass(frozen=True)
class CandidateSource:
    kind: Strategy
    # dropout rate, threshold or noise sigma
    value: float
    seed: int | None = None


@dataclass(frozen=True)
class Candidate:
    mask: BinaryMask
    dice_vs_gt: float
    source: CandidateSource
    # exact ratio behind dice_vs_gt when the candidate was scored against a mask
    dice_exact: Fraction | None = None

    @property
    def exact_dice(self) -> Fraction:
        return self.dice_exact if self.dice_exact is not None else Fraction(repr(self.dice_vs_gt))


@dataclass(frozen=True)
class CandidateSet:
    sample_id: str
    candidates: tuple[Candidate, ...]

    def __len__(self) -> int:
        return len(self.candidates)

    def stack(self) -> np.ndarray:
        return np.stack([c.mask for c in self.candidates])


@dataclass(frozen=True)
class PreferencePair:
    pos: BinaryMask
    neg: BinaryMask
    k_pos: int
    k_neg: int
    dice_pos: float
    dice_neg: float
    tau: float


def _candidate(probs: Tensor, gt: BinaryMask, source: CandidateSource, threshold: float = 0.5) -> Candidate:
    mask = binarize(probs, threshold)
    exact = dice_ratio(mask, gt)
    return Candidate(mask=mask, dice_vs_gt=float(exact), source=source, dice_exact=exact)


@beartype
def generate_candidates_dropout(
    state: ModelState,
    image: Tensor,
    gt: BinaryMask,
    grid: DropoutGrid,
    seed_base: int,
    sample_id: str = "",
) -> CandidateSet:
    cands = []
    with no_grad():
        for index, rate in enumerate(grid.rates):
            seed = seed_base ^ index
            probs = forward(state, image, rate, seed, stochastic=True)
            cands.append(_candidate(probs, gt, CandidateSource("dropout", rate, seed)))
    return CandidateSet(sample_id, tuple(cands))


@beartype
def generate_candidates_threshold(
    state: ModelState, image: Tensor, gt: BinaryMask, sample_id: str = ""
) -> CandidateSet:
    with no_grad():
        probs = forward(state, image)
    cands = [
        _candidate(probs, gt, CandidateSource("threshold", t), threshold=t) for t in THRESHOLDS
    ]
    return CandidateSet(sample_id, tuple(cands))


@beartype
def generate_candidates_noise(
    state: ModelState,
    image: Tensor,
    gt: BinaryMask,
    seed_base: int,
    sample_id: str = "",
) -> CandidateSet:
    cands = []
    with no_grad():
        for index, sigma in enumerate(NOISE_SIGMAS):
            noisy = image
            if sigma > 0:
                rng = np.random.default_rng([seed_base, index])
                noisy = Tensor(image.data + rng.normal(0.0, sigma, size=image.shape))
            probs = forward(state, noisy)
            cands.append(_candidate(probs, gt, CandidateSource("noise", sigma, seed_base)))
    return CandidateSet(sample_id, tuple(cands))


@beartype
def generate_candidates(
    strategy: Strategy,
    state: ModelState,
    image: Tensor,
    gt: BinaryMask,
    grid: DropoutGrid,
    seed_base: int,
    sample_id: str = "",
) -> CandidateSet:
    match strategy:
        case "dropout":
            return generate_candidates_dropout(state, image, gt, grid, seed_base, sample_id)
        case "threshold":
            return generate_candidates_threshold(state, image, gt, sample_id)
        case "noise":
            return generate_candidates_noise(state, image, gt, seed_base, sample_id)


@beartype
def select_pair(cands: CandidateSet, gt: BinaryMask, tau: float) -> PreferencePair | None:
    """Best-by-Dice versus the worst candidate at least *tau* below it.

    The gap is compared on exact ratios, so a gap of exactly *tau* qualifies.
    """
    if len(cands) == 0:
        raise ContractViolation("Cannot select a pair from an empty candidate set")
    if cands.candidates[0].mask.shape != gt.shape:
        raise ContractViolation(
            f"Candidate shape {cands.candidates[0].mask.shape} != gt shape {gt.shape}"
        )
    exact = [c.exact_dice for c in cands.candidates]
    k_pos = max(range(len(exact)), key=lambda k: (exact[k], -k))
    gap = Fraction(repr(tau))
    valid = [k for k, d in enumerate(exact) if exact[k_pos] - d >= gap]
    if not valid:
        return None
    k_neg = min(valid, key=lambda k: (exact[k], k))
    return PreferencePair(
        pos=cands.candidates[k_pos].mask,
        neg=cands.candidates[k_neg].mask,
        k_pos=k_pos,
        k_neg=k_neg,
        dice_pos=cands.candidates[k_pos].dice_vs_gt,
        dice_neg=cands.candidates[k_neg].dice_vs_gt,
        tau=tau,
    )


@beartype
def variance_map(cands: CandidateSet) -> np.ndarray:
    """Per-pixel population variance of the binary candidates, in [0, 0.25]."""
    if len(cands) < 2:
        raise ContractViolation(f"variance_map needs at least 2 candidates, got {len(cands)}")
    return cands.stack().astype(np.float64).var(axis=0)


@dataclass(frozen=True)
class PreferenceRecord:
    sample_id: str
    pair: PreferencePair | None


@dataclass
class PreferenceSet:
    round: int
    strategy: Strategy
    grid: tuple[float, ...]
    tau: float
    sampling_seed: int
    model_version: int
    reference_version: int
    mask_shape: tuple[int, int]
    mean_pixel_variance: float
    records: list[PreferenceRecord] = field(default_factory=list)

    @property
    def pairs_found(self) -> int:
        return sum(r.pair is not None for r in self.records)

    @property
    def pairs_skipped(self) -> int:
        return len(self.records) - self.pairs_found

    def pairs_by_id(self) -> dict[str, PreferencePair | None]:
        return {r.sample_id: r.pair for r in self.records}


def _perturbation_values(strategy: Strategy, grid: DropoutGrid) -> tuple[float, ...]:
    return {"dropout": grid.rates, "threshold": THRESHOLDS, "noise": NOISE_SIGMAS}[strategy]


@beartype
def build_preference_set(
    generator: ModelState,
    samples: list[Sample],
    strategy: Strategy,
    grid: DropoutGrid,
    tau: float,
    sampling_seed: int,
    round_index: int,
    reference_version: int,
    workers: int = 1,
) -> PreferenceSet:
    """Generate candidates for every sample on a frozen snapshot and select pairs."""
    if not generator.frozen:
        raise ContractViolation("Candidates must be generated from a frozen snapshot")
    if not samples:
        raise ContractViolation("Cannot build a preference set for zero samples")

    def one(item: tuple[int, Sample]) -> tuple[PreferenceRecord, float]:
        index, sample = item
        seed_base = derive_seed(sampling_seed, round_index, index)
        cands = generate_candidates(
            strategy, generator, sample.image, sample.gt, grid, seed_base, sample.id
        )
        spread = float(variance_map(cands).mean()) if len(cands) > 1 else 0.0
        return PreferenceRecord(sample.id, select_pair(cands, sample.gt, tau)), spread

    items = list(enumerate(samples))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(item) for item in items]

    h, w = samples[0].gt.shape
    pset = PreferenceSet(
        round=round_index,
        strategy=strategy,
        grid=_perturbation_values(strategy, grid),
        tau=tau,
        sampling_seed=sampling_seed,
        model_version=generator.version,
        reference_version=reference_version,
        mask_shape=(h, w),
        mean_pixel_variance=float(np.mean([spread for _, spread in results])),
        records=[record for record, _ in results],
    )
    logger.info(
        f"Round {round_index} ({strategy}): {pset.pairs_found} pairs, "
        f"{pset.pairs_skipped} skipped, mean pixel variance {pset.mean_pixel_variance:.5f}"
    )
    return pset


def _pack(mask: BinaryMask) -> str:
    return np.packbits(mask.ravel()).tobytes().hex()


def _unpack(text: str, shape: tuple[int, int]) -> BinaryMask:
    bits = np.unpackbits(np.frombuffer(bytes.fromhex(text), dtype=np.uint8), count=shape[0] * shape[1])
    return to_mask(bits.reshape(shape))


@beartype
def save_preference_set(pset: PreferenceSet, path: Path) -> Path:
    records = []
    for record in pset.records:
        pair = record.pair
        records.append(
            {
                "id": record.sample_id,
                "pair": None
                if pair is None
                else {
                    "k_pos": pair.k_pos,
                    "k_neg": pair.k_neg,
                    "dice_pos": pair.dice_pos,
                    "dice_neg": pair.dice_neg,
                    "pos": _pack(pair.pos),
                    "neg": _pack(pair.neg),
                },
            }
        )
    document = {
        "format": CACHE_FORMAT,
        "round": pset.round,
        "strategy": pset.strategy,
        "grid": list(pset.grid),
        "tau": pset.tau,
        "seeds": {"sampling": pset.sampling_seed},
        "model_version": pset.model_version,
        "reference_version": pset.reference_version,
        "mask_shape": list(pset.mask_shape),
        "mean_pixel_variance": pset.mean_pixel_variance,
        "records": records,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(document, sort_keys=False), encoding="utf-8")
    logger.debug(f"Wrote preference cache {path}")
    return path


@beartype
def load_preference_set(path: Path) -> PreferenceSet:
    try:
        document = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise CheckpointError(f"Cannot read preference cache {path}: {e}") from e
    if not isinstance(document, dict) or document.get("format") != CACHE_FORMAT:
        raise CheckpointError(f"{path} is not a {CACHE_FORMAT} file")
    try:
        shape = (int(document["mask_shape"][0]), int(document["mask_shape"][1]))
        tau = document["tau"]
        records = []
        for entry in document["records"]:
            raw = entry["pair"]
            pair = None
            if raw is not None:
                pair = PreferencePair(
                    pos=_unpack(raw["pos"], shape),
                    neg=_unpack(raw["neg"], shape),
                    k_pos=raw["k_pos"],
                    k_neg=raw["k_neg"],
                    dice_pos=raw["dice_pos"],
                    dice_neg=raw["dice_neg"],
                    tau=tau,
                )
            records.append(PreferenceRecord(entry["id"], pair))
        return PreferenceSet(
            round=document["round"],
            strategy=document["strategy"],
            grid=tuple(document["grid"]),
            tau=tau,
            sampling_seed=document["seeds"]["sampling"],
            model_version=document["model_version"],
            reference_version=document["reference_version"],
            mask_shape=shape,
            mean_pixel_variance=document["mean_pixel_variance"],
            records=records,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Malformed preference cache {path}: {e}") from e

