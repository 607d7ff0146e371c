from pathlib import Path

import numpy as np
import pytest
import yaml

from conftest import numeric_grad, relative_error
from mapo_tools.autodiff import Tape, Tensor, reduce
from mapo_tools.constants import PROB_MAX, PROB_MIN
from mapo_tools.errors import CheckpointError, ContractViolation
from mapo_tools.segnet import (
    ModelSpec,
    attach_gradients,
    clone_frozen,
    forward,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
    snapshot,
)


@pytest.fixture(params=["unet", "mlp"])
def spec(request, unet_spec: ModelSpec, mlp_spec: ModelSpec) -> ModelSpec:
    return unet_spec if request.param == "unet" else mlp_spec


@pytest.fixture
def image() -> Tensor:
    return Tensor(np.random.default_rng(0).random((1, 8, 8)))


def test_forward_shape_and_range(spec: ModelSpec, image: Tensor):
    probs = forward(init_params(spec, seed=0), image)
    assert probs.shape == (8, 8)
    assert probs.data.min() >= PROB_MIN
    assert probs.data.max() <= PROB_MAX


def test_forward_rejects_wrong_image_shape(spec: ModelSpec):
    with pytest.raises(ContractViolation):
        forward(init_params(spec, seed=0), Tensor(np.zeros((1, 4, 8))))


def test_same_seed_gives_same_weights(spec: ModelSpec):
    a, b = init_params(spec, seed=7), init_params(spec, seed=7)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_init_scale_and_zero_bias(unet_spec: ModelSpec):
    state = init_params(unet_spec, seed=1)
    for name, t in state.params.items():
        if name.endswith(".b"):
            assert not t.data.any()
        else:
            fan_in = np.prod(t.shape[1:])
            assert np.abs(t.data).max() <= np.sqrt(2.0) * np.sqrt(3.0 / fan_in)


def test_deterministic_forward_ignores_dropout_arguments(spec: ModelSpec, image: Tensor):
    state = init_params(spec, seed=0)
    base = forward(state, image).data
    np.testing.assert_array_equal(forward(state, image, 0.5, seed=3).data, base)
    np.testing.assert_array_equal(forward(state, image, 0.0, seed=3, stochastic=True).data, base)


def test_stochastic_forward_is_a_function_of_seed(spec: ModelSpec, image: Tensor):
    state = init_params(spec, seed=0)
    a = forward(state, image, 0.3, seed=9, stochastic=True).data
    b = forward(state, image, 0.3, seed=9, stochastic=True).data
    c = forward(state, image, 0.3, seed=10, stochastic=True).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_dropout_sites_are_validated():
    with pytest.raises(ContractViolation):
        ModelSpec(kind="pixel-mlp", channels=(2, 2, 2), input_shape=(1, 8, 8), dropout_sites=(3,))
    with pytest.raises(ContractViolation):
        ModelSpec(kind="pixel-mlp", channels=(2, 2, 2), input_shape=(1, 8, 8), dropout_sites=())


def test_unet_needs_sizes_divisible_by_four():
    with pytest.raises(ContractViolation):
        ModelSpec(kind="tiny-unet", input_shape=(1, 10, 8))


def test_unknown_kind_is_rejected():
    with pytest.raises(ContractViolation):
        ModelSpec(kind="resnet")


def test_tiny_inputs_use_pointwise_kernels():
    shapes = param_shapes(ModelSpec(kind="tiny-unet", channels=(2, 2, 2), input_shape=(1, 4, 4)))
    assert shapes["enc1.w"] == (2, 1, 3, 3)
    assert shapes["enc2.w"] == (2, 2, 1, 1)
    assert shapes["dec2.w"] == (2, 4, 1, 1)
    assert shapes["dec1.w"] == (2, 4, 3, 3)


def test_model_gradient_matches_finite_differences(spec: ModelSpec, image: Tensor):
    state = init_params(spec, seed=2)
    target = Tensor(np.random.default_rng(1).random((8, 8)))
    name = "head.w" if spec.kind == "pixel-mlp" else "enc1.w"
    with Tape() as tape:
        tape.backward(reduce("sum", forward(state, image) * target))
    analytic = state.params[name].grad.copy()

    original = state.params[name].data.copy()

    def loss(values: np.ndarray) -> float:
        state.params[name].data[...] = values
        return reduce("sum", forward(state, image) * target).item()

    numeric = numeric_grad(loss, original)
    state.params[name].data[...] = original
    assert relative_error(analytic, numeric) < 1e-4


def test_frozen_clone_is_independent_and_read_only(unet_spec: ModelSpec):
    state = init_params(unet_spec, seed=0)
    frozen = clone_frozen(state)
    assert frozen.frozen
    assert all(not t.requires_grad for t in frozen.params.values())
    state.params["head.b"].data += 1.0
    assert not frozen.params["head.b"].data.any()
    with pytest.raises(ValueError):
        frozen.params["head.b"].data += 1.0
    with pytest.raises(ContractViolation):
        attach_gradients(frozen)


def test_snapshot_is_a_trainable_copy(unet_spec: ModelSpec):
    state = init_params(unet_spec, seed=0)
    copy = snapshot(state)
    assert not copy.frozen
    assert copy.params["head.w"] is not state.params["head.w"]
    copy.params["head.w"].data += 1.0
    assert not np.array_equal(copy.params["head.w"].data, state.params["head.w"].data)


def test_checkpoint_round_trip_is_byte_identical(tmp_path: Path, spec: ModelSpec):
    state = init_params(spec, seed=4)
    state.version = 3
    save_checkpoint(state, tmp_path / "a")
    loaded = load_checkpoint(tmp_path / "a")
    save_checkpoint(loaded, tmp_path / "b")
    for name in ("manifest.yaml", "params.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert loaded.version == 3
    assert loaded.lineage == state.lineage
    assert loaded.spec == spec


def test_load_frozen_checkpoint(tmp_path: Path, mlp_spec: ModelSpec):
    save_checkpoint(init_params(mlp_spec, seed=0), tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt", trainable=False)
    assert loaded.frozen


def test_truncated_params_are_reported(tmp_path: Path, mlp_spec: ModelSpec):
    path = save_checkpoint(init_params(mlp_spec, seed=0), tmp_path / "ckpt")
    blob = (path / "params.bin").read_bytes()
    (path / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="params.bin"):
        load_checkpoint(path)


def test_missing_checkpoint_is_reported(tmp_path: Path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope")


@pytest.mark.parametrize(
    "damage",
    [
        lambda m: m.pop("params"),
        lambda m: m.pop("version"),
        lambda m: m["params"][0].pop("name"),
        lambda m: m.update(params=7),
        lambda m: m.update(version="latest"),
    ],
)
def test_damaged_manifest_is_a_checkpoint_error(tmp_path: Path, mlp_spec: ModelSpec, damage):
    path = save_checkpoint(init_params(mlp_spec, seed=0), tmp_path / "ckpt")
    manifest = yaml.safe_load((path / "manifest.yaml").read_text())
    damage(manifest)
    (path / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))
    with pytest.raises(CheckpointError, match="manifest.yaml"):
        load_checkpoint(path)
