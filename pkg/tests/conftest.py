from collections.abc import Callable, Iterator

import numpy as np
import pytest
from loguru import logger

from mapo_tools.autodiff import Tensor, Tape, no_grad
from mapo_tools.logging_utils import PropagateHandler
from mapo_tools.segnet import ModelSpec
from mapo_tools.synth import Sample, TaskSpec, generate_dataset


@pytest.fixture
def log_capture(caplog) -> Iterator[pytest.LogCaptureFixture]:
    """Forward loguru records into caplog for tests that never call setup_logging."""
    handler_id = logger.add(PropagateHandler(), format="{message}")
    yield caplog
    logger.remove(handler_id)


@pytest.fixture
def unet_spec() -> ModelSpec:
    return ModelSpec(kind="tiny-unet", channels=(2, 3, 3), input_shape=(1, 8, 8))


@pytest.fixture
def mlp_spec() -> ModelSpec:
    return ModelSpec(kind="pixel-mlp", channels=(3, 3, 3), input_shape=(1, 8, 8))


@pytest.fixture
def task_spec() -> TaskSpec:
    return TaskSpec(kind="blobs", image_size=(8, 8), count=10, noise_std=0.02, boundary_blur=0.5, seed=3)


@pytest.fixture
def samples(task_spec: TaskSpec) -> list[Sample]:
    return generate_dataset(task_spec)


def make_sample(sample_id: str, image: np.ndarray, gt: np.ndarray, split: str) -> Sample:
    return Sample(id=sample_id, image=Tensor(image[None]), gt=gt.astype(np.uint8), split=split)


def random_mask(rng: np.random.Generator, shape: tuple[int, ...], p: float = 0.5) -> np.ndarray:
    return (rng.random(shape) < p).astype(np.uint8)


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of *x*."""
    grad = np.zeros_like(x)
    with no_grad():
        for i in np.ndindex(x.shape):
            up, down = x.copy(), x.copy()
            up[i] += eps
            down[i] -= eps
            grad[i] = (f(up) - f(down)) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_gradient(build: Callable[[Tensor], Tensor], x: np.ndarray, tol: float = 1e-4) -> None:
    """Assert that tape gradients of ``build(x)`` match central differences."""
    param = Tensor(x, requires_grad=True)
    with Tape() as tape:
        tape.backward(build(param))
    numeric = numeric_grad(lambda v: build(Tensor(v)).item(), x)
    assert relative_error(param.grad, numeric) < tol
