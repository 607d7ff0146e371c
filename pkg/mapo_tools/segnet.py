"""Architecture-agnostic segmentation models.

Every model maps an image ``[C,H,W]`` to a probability map ``[H,W]`` through a
final logistic activation, and accepts a per-call dropout rate and seed. Two
concrete models ship:

- ``tiny-unet``: two down and two up levels with skip connections.
  Hidden layers (dropout sites) are enc1, enc2, mid, dec2, dec1.
- ``pixel-mlp``: a 3x3 context layer followed by two 1x1 layers, i.e. an MLP on
  per-pixel features with a small receptive field. Hidden layers are l0, l1, l2.

Convolutions use 3x3 kernels unless a level is smaller than 3 pixels, where a
1x1 kernel keeps the same-padding contract valid (tiny inputs such as 4x4).

Checkpoints are directories holding ``manifest.yaml`` and ``params.bin``
(little-endian float64 arrays concatenated in declared parameter order).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
import yaml
from beartype import beartype
from loguru import logger

from mapo_tools.autodiff import (
    Tensor,
    clamp,
    concat_channels,
    conv2d,
    dropout_apply,
    max_pool2,
    relu,
    reshape,
    sigmoid,
    upsample2,
)
from mapo_tools.common import derive_seed
from mapo_tools.errors import CheckpointError, ContractViolation

ModelKind = Literal["tiny-unet", "pixel-mlp"]

CHECKPOINT_FORMAT = "mapo-checkpoint/1"
INIT_GAIN = math.sqrt(2.0)

_HIDDEN_LAYERS: dict[str, tuple[str, ...]] = {
    "tiny-unet": ("enc1", "enc2", "mid", "dec2", "dec1"),
    "pixel-mlp": ("l0", "l1", "l2"),
}


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind = "tiny-unet"
    channels: tuple[int, ...] = (8, 16, 16)
    input_shape: tuple[int, int, int] = (1, 32, 32)
    # None means every hidden layer.
    dropout_sites: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in _HIDDEN_LAYERS:
            raise ContractViolation(f"Unknown model kind {self.kind!r}")
        n_hidden = len(_HIDDEN_LAYERS[self.kind])
        if len(self.channels) != 3:
            raise ContractViolation(
                f"{self.kind} takes exactly 3 layer widths, got {self.channels}"
            )
        if any(c <= 0 for c in self.channels):
            raise ContractViolation(f"Layer widths must be positive, got {self.channels}")
        c, h, w = self.input_shape
        if c <= 0 or h <= 0 or w <= 0:
            raise ContractViolation(f"Invalid input shape {self.input_shape}")
        if self.kind == "tiny-unet" and (h % 4 or w % 4):
            raise ContractViolation(f"tiny-unet needs H and W divisible by 4, got {h}x{w}")
        if self.dropout_sites is not None:
            if not self.dropout_sites:
                raise ContractViolation("At least one dropout site is required")
            bad = [s for s in self.dropout_sites if not 0 <= s < n_hidden]
            if bad:
                raise ContractViolation(
                    f"Dropout sites {bad} out of range for {self.kind} ({n_hidden} hidden layers)"
                )

    @property
    def hidden_layers(self) -> tuple[str, ...]:
        return _HIDDEN_LAYERS[self.kind]

    @property
    def sites(self) -> frozenset[int]:
        if self.dropout_sites is None:
            return frozenset(range(len(self.hidden_layers)))
        return frozenset(self.dropout_sites)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "channels": list(self.channels),
            "input_shape": list(self.input_shape),
            "dropout_sites": None if self.dropout_sites is None else list(self.dropout_sites),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ModelSpec:
        sites = raw.get("dropout_sites")
        return cls(
            kind=raw["kind"],
            channels=tuple(int(c) for c in raw["channels"]),
            input_shape=tuple(int(s) for s in raw["input_shape"]),
            dropout_sites=None if sites is None else tuple(int(s) for s in sites),
        )


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict[str, Tensor]
    version: int = 0
    frozen: bool = False
    lineage: tuple[str, ...] = field(default_factory=tuple)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def _kernel(extent: int) -> int:
    return 3 if extent >= 3 else 1


@beartype
def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in declared order."""
    c_in, h, w = spec.input_shape
    c1, c2, c3 = spec.channels
    k0 = _kernel(min(h, w))
    if spec.kind == "pixel-mlp":
        layers = [("l0", c1, c_in, k0), ("l1", c2, c1, 1), ("l2", c3, c2, 1), ("head", 1, c3, 1)]
    else:
        k1 = _kernel(min(h, w) // 2)
        k2 = _kernel(min(h, w) // 4)
        layers = [
            ("enc1", c1, c_in, k0),
            ("enc2", c2, c1, k1),
            ("mid", c3, c2, k2),
            ("dec2", c2, c3 + c2, k1),
            ("dec1", c1, c2 + c1, k0),
            ("head", 1, c1, 1),
        ]
    shapes: dict[str, tuple[int, ...]] = {}
    for name, n_out, n_in, k in layers:
        shapes[f"{name}.w"] = (n_out, n_in, k, k)
        shapes[f"{name}.b"] = (n_out,)
    return shapes


@beartype
def init_params(spec: ModelSpec, seed: int) -> ModelState:
    """Fan-in-scaled uniform weights, U(-b, b) with b = gain * sqrt(3 / fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(spec).items():
        if any(extent == 0 for extent in shape):
            raise ContractViolation(f"Zero-width layer {name} with shape {shape}")
        if name.endswith(".b"):
            values = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = INIT_GAIN * math.sqrt(3.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(values, requires_grad=True, name=name)
    state = ModelState(spec=spec, params=params, lineage=(f"init:{seed}",))
    logger.debug(f"Initialised {spec.kind} with {state.n_params()} parameters (seed {seed})")
    return state


@beartype
def forward(
    state: ModelState,
    image: Tensor,
    dropout_rate: float = 0.0,
    seed: int = 0,
    stochastic: bool = False,
) -> Tensor:
    """Probability map ``[H,W]`` clamped to ``[PROB_MIN, PROB_MAX]``.

    With ``stochastic=False`` dropout is off and *dropout_rate* and *seed* are ignored.
    """
    if image.shape != state.spec.input_shape:
        raise ContractViolation(
            f"Image shape {image.shape} does not match model input {state.spec.input_shape}"
        )
    if not 0.0 <= dropout_rate < 1.0:
        raise ContractViolation(f"dropout rate must lie in [0, 1), got {dropout_rate}")
    sites = state.spec.sites
    p = state.params

    def hidden(x: Tensor, layer: int, name: str) -> Tensor:
        x = relu(conv2d(x, p[f"{name}.w"], p[f"{name}.b"]))
        if stochastic and dropout_rate > 0.0 and layer in sites:
            x = dropout_apply(x, dropout_rate, derive_seed(seed, layer))
        return x

    if state.spec.kind == "pixel-mlp":
        x = image
        for layer, name in enumerate(state.spec.hidden_layers):
            x = hidden(x, layer, name)
    else:
        e1 = hidden(image, 0, "enc1")
        e2 = hidden(max_pool2(e1), 1, "enc2")
        m = hidden(max_pool2(e2), 2, "mid")
        d2 = hidden(concat_channels(upsample2(m), e2), 3, "dec2")
        x = hidden(concat_channels(upsample2(d2), e1), 4, "dec1")

    logits = conv2d(x, p["head.w"], p["head.b"])
    _, h, w = state.spec.input_shape
    return reshape(clamp(sigmoid(logits)), (h, w))


def _copy_state(state: ModelState, frozen: bool) -> ModelState:
    params = {
        name: Tensor(t.data, requires_grad=not frozen, name=name)
        for name, t in state.params.items()
    }
    return ModelState(
        spec=state.spec,
        params=params,
        version=state.version,
        frozen=frozen,
        lineage=state.lineage,
    )


@beartype
def clone_frozen(state: ModelState) -> ModelState:
    """Deep, read-only copy usable as a reference policy."""
    return _copy_state(state, frozen=True)


@beartype
def snapshot(state: ModelState) -> ModelState:
    """Deep trainable copy, e.g. for best-checkpoint bookkeeping."""
    return _copy_state(state, frozen=False)


@beartype
def attach_gradients(state: ModelState) -> ModelState:
    """Mark every parameter as gradient-tracked. Frozen states refuse."""
    if state.frozen:
        raise ContractViolation("A frozen reference model cannot take gradients")
    for t in state.params.values():
        if not t.requires_grad:
            t.data = t.data.copy()
            t.requires_grad = True
    return state


@beartype
def save_checkpoint(state: ModelState, path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "spec": state.spec.to_dict(),
        "version": state.version,
        "frozen": state.frozen,
        "lineage": list(state.lineage),
        "params": [
            {"name": name, "shape": list(t.shape)} for name, t in state.params.items()
        ],
    }
    (path / "manifest.yaml").write_text(
        yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8"
    )
    blob = b"".join(t.data.astype("<f8").tobytes() for t in state.params.values())
    (path / "params.bin").write_bytes(blob)
    logger.info(f"Saved checkpoint v{state.version} to {path}")
    return path


@beartype
def load_checkpoint(path: Path, trainable: bool = True) -> ModelState:
    manifest_path = path / "manifest.yaml"
    blob_path = path / "params.bin"
    try:
        manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
        blob = blob_path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    except yaml.YAMLError as e:
        raise CheckpointError(f"Corrupt manifest {manifest_path}: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{manifest_path} is not a {CHECKPOINT_FORMAT} manifest")

    try:
        spec = ModelSpec.from_dict(manifest["spec"])
    except (KeyError, TypeError, ContractViolation) as e:
        raise CheckpointError(f"Invalid model spec in {manifest_path}: {e}") from e
    try:
        declared = {entry["name"]: tuple(entry["shape"]) for entry in manifest["params"]}
        version = int(manifest["version"])
        lineage = tuple(manifest.get("lineage", ()))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Invalid parameter layout in {manifest_path}: {e}") from e
    expected = param_shapes(spec)
    if declared != expected:
        raise CheckpointError(f"{manifest_path} parameter layout does not match {spec.kind}")
    total = sum(int(np.prod(s)) for s in expected.values())
    if len(blob) != total * 8:
        raise CheckpointError(
            f"{blob_path} holds {len(blob)} bytes, expected {total * 8}"
        )

    values = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    params: dict[str, Tensor] = {}
    offset = 0
    for name, shape in expected.items():
        n = int(np.prod(shape))
        params[name] = Tensor(
            values[offset : offset + n].reshape(shape), requires_grad=trainable, name=name
        )
        offset += n
    return ModelState(
        spec=spec,
        params=params,
        version=version,
        frozen=not trainable,
        lineage=lineage,
    )
