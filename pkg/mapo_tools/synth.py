"""Deterministic synthetic binary-segmentation tasks.

Three task kinds stand in for real segmentation data:

- ``blobs``: one to three filled ellipses (lesion-like regions).
- ``rings``: an annulus (thin organ boundary).
- ``curves``: one or two thin sinusoidal curves (vessel-like structures).

Each shape is rendered from a signed distance field with a one-pixel
anti-aliased edge. Background intensity is 0.25, foreground 0.75. The ground
truth is the clean rendering thresholded at the intensity midpoint, taken
before boundary blur and Gaussian noise are applied. Images are quantised to
16 bits so they survive a save/load round trip unchanged.

Splits: ``n_val = n_test = max(1, floor(0.15 * count))`` and the rest is
train. A seeded permutation of sample indices assigns the first ``n_train``
to train, the next ``n_val`` to val and the remainder to test.

On disk a dataset directory holds ``manifest.tsv``, ``images/<id>.pgm`` and
``masks/<id>.pgm``. Images and masks are binary greymaps (P5) with
maxval 65535, big-endian samples; masks store {0, 65535}. The manifest starts
with ``# <field>\\t<value>...`` lines for the generating TaskSpec, then a
header row ``id  image_path  mask_path  split`` and one tab-separated row per
sample.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from beartype import beartype
from loguru import logger
from scipy.ndimage import gaussian_filter

from mapo_tools.autodiff import Tensor
from mapo_tools.constants import P5_MAXVAL
from mapo_tools.errors import ContractViolation, DatasetError
from mapo_tools.metrics import BinaryMask

TaskKind = Literal["blobs", "rings", "curves"]
Split = Literal["train", "val", "test"]

BACKGROUND = 0.25
FOREGROUND = 0.75
MIDPOINT_LEVEL = 32768
MANIFEST_NAME = "manifest.tsv"
MANIFEST_HEADER = ("id", "image_path", "mask_path", "split")
MAX_SHAPE_ATTEMPTS = 100
_SPLIT_STREAM = 7919


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind = "blobs"
    image_size: tuple[int, int] = (32, 32)
    count: int = 100
    noise_std: float = 0.03
    boundary_blur: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("blobs", "rings", "curves"):
            raise ContractViolation(f"Unknown task kind {self.kind!r}")
        if self.count < 3:
            raise ContractViolation(f"count must be at least 3 (one per split), got {self.count}")
        h, w = self.image_size
        if not (8 <= h <= 128 and 8 <= w <= 128):
            raise ContractViolation(f"image_size must lie in [8, 128]^2, got {self.image_size}")
        if self.noise_std < 0 or self.boundary_blur < 0:
            raise ContractViolation("noise_std and boundary_blur must be non-negative")
        if self.seed < 0:
            raise ContractViolation(f"seed must be non-negative, got {self.seed}")


@dataclass(frozen=True)
class Sample:
    id: str
    image: Tensor
    gt: BinaryMask
    split: Split


@beartype
def split_sizes(count: int) -> tuple[int, int, int]:
    n_val = max(1, math.floor(0.15 * count))
    n_test = max(1, math.floor(0.15 * count))
    return count - n_val - n_test, n_val, n_test


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:h, 0:w].astype(np.float64) + 0.5


def _blobs_sdf(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = _grid(h, w)
    side = min(h, w)
    sdf = np.full((h, w), np.inf)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w
        a, b = rng.uniform(0.1, 0.25, size=2) * side
        angle = rng.uniform(0.0, math.pi)
        u = (xx - cx) * math.cos(angle) + (yy - cy) * math.sin(angle)
        v = -(xx - cx) * math.sin(angle) + (yy - cy) * math.cos(angle)
        radial = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        sdf = np.minimum(sdf, (radial - 1.0) * min(a, b))
    return sdf


def _rings_sdf(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = _grid(h, w)
    side = min(h, w)
    cy, cx = rng.uniform(0.4, 0.6) * h, rng.uniform(0.4, 0.6) * w
    radius = rng.uniform(0.2, 0.32) * side
    thickness = max(1.5, rng.uniform(0.06, 0.12) * side)
    return np.abs(np.hypot(yy - cy, xx - cx) - radius) - thickness / 2.0


def _curves_sdf(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = _grid(h, w)
    pixels = np.stack([yy.ravel(), xx.ravel()], axis=1)
    sdf = np.full(h * w, np.inf)
    for _ in range(int(rng.integers(1, 3))):
        xs = np.linspace(0.0, w, 4 * w)
        centre = rng.uniform(0.3, 0.7) * h
        amplitude = rng.uniform(0.1, 0.25) * h
        freq = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        ys = centre + amplitude * np.sin(2.0 * math.pi * freq * xs / w + phase)
        points = np.stack([ys, xs], axis=1)
        dist = np.sqrt(((pixels[:, None, :] - points[None, :, :]) ** 2).sum(-1)).min(axis=1)
        width = rng.uniform(1.2, 2.0)
        sdf = np.minimum(sdf, dist - width / 2.0)
    return sdf.reshape(h, w)


_RENDERERS = {"blobs": _blobs_sdf, "rings": _rings_sdf, "curves": _curves_sdf}


def _quantise(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * P5_MAXVAL).astype(np.uint16)


@beartype
def render_sample(spec: TaskSpec, index: int) -> tuple[np.ndarray, BinaryMask]:
    """Render one (image, gt) pair; the image is float64 on the 16-bit grid."""
    h, w = spec.image_size
    rng = np.random.default_rng([spec.seed, index])
    for _ in range(MAX_SHAPE_ATTEMPTS):
        coverage = np.clip(0.5 - _RENDERERS[spec.kind](rng, h, w), 0.0, 1.0)
        clean = _quantise(BACKGROUND + (FOREGROUND - BACKGROUND) * coverage)
        gt = (clean >= MIDPOINT_LEVEL).astype(np.uint8)
        if 0 < gt.sum() < gt.size:
            break
    else:
        raise ContractViolation(f"Could not render a non-trivial {spec.kind} mask for sample {index}")

    image = clean.astype(np.float64) / P5_MAXVAL
    if spec.boundary_blur > 0:
        image = gaussian_filter(image, sigma=spec.boundary_blur, mode="nearest")
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    return _quantise(image).astype(np.float64) / P5_MAXVAL, gt


@beartype
def generate_dataset(spec: TaskSpec) -> list[Sample]:
    n_train, n_val, _ = split_sizes(spec.count)
    order = np.random.default_rng([spec.seed, _SPLIT_STREAM]).permutation(spec.count)
    splits: dict[int, Split] = {}
    for rank, index in enumerate(order.tolist()):
        splits[index] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"

    samples = []
    for index in range(spec.count):
        image, gt = render_sample(spec, index)
        h, w = spec.image_size
        samples.append(
            Sample(
                id=f"{spec.kind}-{index:05d}",
                image=Tensor(image.reshape(1, h, w)),
                gt=gt,
                split=splits[index],
            )
        )
    logger.info(
        f"Generated {spec.count} {spec.kind} samples ({n_train}/{n_val}/{spec.count - n_train - n_val})"
    )
    return samples


@beartype
def select_split(samples: list[Sample], split: Split) -> list[Sample]:
    return [s for s in samples if s.split == split]


@beartype
def write_pgm(path: Path, values: np.ndarray) -> None:
    """Write a 16-bit binary greymap."""
    h, w = values.shape
    header = f"P5\n{w} {h}\n{P5_MAXVAL}\n".encode("ascii")
    path.write_bytes(header + values.astype(">u2").tobytes())


_TOKEN_RE = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


@beartype
def read_pgm(path: Path) -> tuple[np.ndarray, int]:
    """Read a binary greymap, returning (samples as uint16 [H,W], maxval)."""
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"Cannot read {path}: {e}") from e
    tokens: list[bytes] = []
    pos = 0
    for _ in range(4):
        match = _TOKEN_RE.match(raw, pos)
        if match is None:
            raise DatasetError(f"{path}: truncated greymap header")
        tokens.append(match.group(1))
        pos = match.end()
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary greymap (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise DatasetError(f"{path}: malformed greymap header") from e
    if w <= 0 or h <= 0 or not 0 < maxval <= P5_MAXVAL:
        raise DatasetError(f"{path}: invalid greymap header {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    dtype = ">u2" if maxval > 255 else "u1"
    expected = w * h * np.dtype(dtype).itemsize
    body = raw[pos:]
    if len(body) != expected:
        raise DatasetError(f"{path}: raster holds {len(body)} bytes, expected {expected}")
    return np.frombuffer(body, dtype=dtype).astype(np.uint16).reshape(h, w), maxval


@beartype
def save_dataset(samples: list[Sample], spec: TaskSpec, path: Path) -> Path:
    (path / "images").mkdir(parents=True, exist_ok=True)
    (path / "masks").mkdir(parents=True, exist_ok=True)
    lines = [
        f"# kind\t{spec.kind}",
        f"# image_size\t{spec.image_size[0]}\t{spec.image_size[1]}",
        f"# count\t{spec.count}",
        f"# noise_std\t{spec.noise_std!r}",
        f"# boundary_blur\t{spec.boundary_blur!r}",
        f"# seed\t{spec.seed}",
        "\t".join(MANIFEST_HEADER),
    ]
    for sample in samples:
        image_rel = f"images/{sample.id}.pgm"
        mask_rel = f"masks/{sample.id}.pgm"
        write_pgm(path / image_rel, _quantise(sample.image.data[0]))
        write_pgm(path / mask_rel, sample.gt.astype(np.uint16) * P5_MAXVAL)
        lines.append("\t".join((sample.id, image_rel, mask_rel, sample.split)))
    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Saved {len(samples)} samples to {path}")
    return path


def _parse_task_spec(fields: dict[str, list[str]], manifest: Path) -> TaskSpec:
    try:
        return TaskSpec(
            kind=fields["kind"][0],
            image_size=(int(fields["image_size"][0]), int(fields["image_size"][1])),
            count=int(fields["count"][0]),
            noise_std=float(fields["noise_std"][0]),
            boundary_blur=float(fields["boundary_blur"][0]),
            seed=int(fields["seed"][0]),
        )
    except (KeyError, IndexError, ValueError, ContractViolation) as e:
        raise DatasetError(f"{manifest}: invalid task spec header ({e})") from e


@beartype
def load_dataset(path: Path) -> tuple[TaskSpec, list[Sample]]:
    manifest = path / MANIFEST_NAME
    try:
        lines = manifest.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"Cannot read manifest {manifest}: {e}") from e

    fields: dict[str, list[str]] = {}
    rows: list[list[str]] = []
    header_seen = False
    for lineno, line in enumerate(lines, start=1):
        if not line:
            continue
        if line.startswith("# "):
            key, *values = line[2:].split("\t")
            fields[key] = values
        elif not header_seen:
            if tuple(line.split("\t")) != MANIFEST_HEADER:
                raise DatasetError(f"{manifest}:{lineno}: unexpected header {line!r}")
            header_seen = True
        else:
            row = line.split("\t")
            if len(row) != 4 or row[3] not in ("train", "val", "test"):
                raise DatasetError(f"{manifest}:{lineno}: malformed entry {line!r}")
            rows.append(row)
    spec = _parse_task_spec(fields, manifest)
    if len(rows) != spec.count:
        raise DatasetError(f"{manifest}: lists {len(rows)} samples, task spec says {spec.count}")

    h, w = spec.image_size
    samples = []
    for sample_id, image_rel, mask_rel, split in rows:
        image, image_max = read_pgm(path / image_rel)
        mask, mask_max = read_pgm(path / mask_rel)
        for name, values, maxval in ((image_rel, image, image_max), (mask_rel, mask, mask_max)):
            if values.shape != (h, w) or maxval != P5_MAXVAL:
                raise DatasetError(
                    f"{path / name}: expected {w}x{h} with maxval {P5_MAXVAL} for entry {sample_id}"
                )
        if not np.isin(mask, (0, P5_MAXVAL)).all():
            raise DatasetError(f"{path / mask_rel}: mask values must be 0 or {P5_MAXVAL}")
        samples.append(
            Sample(
                id=sample_id,
                image=Tensor((image.astype(np.float64) / P5_MAXVAL).reshape(1, h, w)),
                gt=(mask == P5_MAXVAL).astype(np.uint8),
                split=split,
            )
        )
    logger.info(f"Loaded {len(samples)} samples from {path}")
    return spec, samples
