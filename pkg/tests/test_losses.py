import math

import numpy as np
import pytest

from conftest import check_gradient, random_mask
from mapo_tools.autodiff import Tensor
from mapo_tools.errors import ContractViolation
from mapo_tools.losses import (
    DpoConfig,
    bce_loss,
    combined_loss,
    dice_loss,
    dpo_loss,
    dpo_margin_loss,
    focal_loss,
    mask_loglik,
    supervised_loss,
)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


def random_probs(rng: np.random.Generator, shape=(6, 6)) -> np.ndarray:
    return rng.uniform(0.05, 0.95, size=shape)


def test_dpo_loss_is_ln2_when_policy_equals_reference(rng):
    cfg = DpoConfig()
    for _ in range(100):
        p = random_probs(rng)
        pos, neg = random_mask(rng, p.shape), random_mask(rng, p.shape)
        loss = dpo_loss(Tensor(p), Tensor(p), pos, neg, cfg).item()
        assert abs(loss - math.log(2.0)) < 1e-9


def test_mask_loglik_is_negative_bce(rng):
    for _ in range(20):
        p = Tensor(random_probs(rng))
        gt = random_mask(rng, p.shape)
        assert abs(mask_loglik(p, gt).item() + bce_loss(p, gt).item()) < 1e-12


def test_combined_loss_recomposes_exactly(rng):
    cfg = DpoConfig(beta=0.2, tau=0.3, lam=0.7)
    for _ in range(20):
        p, ref = Tensor(random_probs(rng)), Tensor(random_probs(rng))
        gt, pos, neg = (random_mask(rng, (6, 6)) for _ in range(3))
        total = combined_loss(p, ref, gt, pos, neg, cfg).item()
        parts = 0.7 * (dice_loss(p, gt).item() + bce_loss(p, gt).item()) + dpo_loss(p, ref, pos, neg, cfg).item()
        assert abs(total - parts) < 1e-12


def test_dice_loss_of_perfect_prediction_is_near_zero():
    gt = np.zeros((4, 4), dtype=np.uint8)
    gt[1:3, 1:3] = 1
    assert dice_loss(Tensor(gt.astype(float)), gt).item() == pytest.approx(0.0, abs=1e-6)


def test_dice_loss_of_empty_prediction_and_gt_is_zero():
    gt = np.zeros((3, 3), dtype=np.uint8)
    assert dice_loss(Tensor(np.zeros((3, 3))), gt).item() == pytest.approx(0.0)


def test_bce_clamps_certain_mistakes():
    gt = np.ones((2, 2), dtype=np.uint8)
    loss = bce_loss(Tensor(np.zeros((2, 2))), gt).item()
    assert loss == pytest.approx(-math.log(1e-7))


def test_focal_with_zero_gamma_is_bce(rng):
    p = Tensor(random_probs(rng))
    gt = random_mask(rng, p.shape)
    assert focal_loss(p, gt, gamma=0.0).item() == pytest.approx(bce_loss(p, gt).item(), rel=1e-12)


def test_focal_downweights_easy_pixels():
    gt = np.ones((2, 2), dtype=np.uint8)
    p = Tensor(np.full((2, 2), 0.9))
    assert focal_loss(p, gt).item() < bce_loss(p, gt).item()


@pytest.mark.parametrize("kind", ["dice_bce", "dice", "bce", "focal", "dice_focal"])
def test_supervised_loss_kinds_are_differentiable(kind, rng):
    gt = random_mask(rng, (5, 5))
    check_gradient(lambda t: supervised_loss(kind, t, gt), random_probs(rng, (5, 5)))


def test_margin_loss_sign():
    good, bad = Tensor(0.0), Tensor(-5.0)
    assert dpo_margin_loss(good, bad, beta=1.0).item() < math.log(2.0)
    assert dpo_margin_loss(bad, good, beta=1.0).item() > math.log(2.0)


def test_margin_loss_is_stable_for_large_gaps():
    assert dpo_margin_loss(Tensor(0.0), Tensor(1e4), beta=1.0).item() == pytest.approx(1e4)
    assert dpo_margin_loss(Tensor(1e4), Tensor(0.0), beta=1.0).item() == pytest.approx(0.0, abs=1e-12)


def test_combined_loss_gradient(rng):
    cfg = DpoConfig(beta=0.5, tau=0.3, lam=0.5)
    ref = Tensor(random_probs(rng, (4, 4)))
    gt, pos, neg = (random_mask(rng, (4, 4)) for _ in range(3))
    check_gradient(lambda t: combined_loss(t, ref, gt, pos, neg, cfg), random_probs(rng, (4, 4)))


def test_reference_must_not_carry_gradients(rng):
    p = Tensor(random_probs(rng))
    ref = Tensor(random_probs(rng), requires_grad=True)
    mask = random_mask(rng, (6, 6))
    with pytest.raises(ContractViolation):
        dpo_loss(p, ref, mask, mask, DpoConfig())


def test_shape_mismatch_is_rejected():
    with pytest.raises(ContractViolation):
        dice_loss(Tensor(np.full((2, 2), 0.5)), np.ones((3, 3), dtype=np.uint8))


@pytest.mark.parametrize("kwargs", [{"beta": 0.0}, {"tau": 1.5}, {"lam": -0.1}])
def test_dpo_config_validation(kwargs):
    with pytest.raises(ContractViolation):
        DpoConfig(**kwargs)


def test_margin_loss_worked_example():
    logratio_pos = Tensor(-0.2) - (-0.3)
    logratio_neg = Tensor(-0.8) - (-0.5)
    loss = dpo_margin_loss(logratio_pos, logratio_neg, beta=0.1).item()
    assert loss == pytest.approx(math.log1p(math.exp(-0.04)), abs=1e-12)
    assert loss == pytest.approx(0.673347, abs=1e-6)


def test_softplus_form_matches_negative_log_sigmoid():
    for delta in np.linspace(-30.0, 30.0, 601):
        expected = -math.log(1.0 / (1.0 + math.exp(-float(delta))))
        assert abs(dpo_margin_loss(Tensor(float(delta)), Tensor(0.0), beta=1.0).item() - expected) < 1e-10


def test_raising_probability_where_only_pos_is_set_never_increases_dpo_loss(rng):
    cfg = DpoConfig(beta=0.5)
    for _ in range(100):
        p = random_probs(rng)
        ref = Tensor(random_probs(rng))
        pos, neg = random_mask(rng, p.shape), random_mask(rng, p.shape)
        favoured = (pos == 1) & (neg == 0)
        raised = p.copy()
        raised[favoured] += rng.uniform(0.0, 0.04, size=int(favoured.sum()))
        before = dpo_loss(Tensor(p), ref, pos, neg, cfg).item()
        after = dpo_loss(Tensor(raised), ref, pos, neg, cfg).item()
        assert after <= before + 1e-15


def test_dice_loss_worked_example():
    p = Tensor(np.array([[1.0, 1.0, 0.0, 0.0]]))
    gt = np.array([[1, 0, 1, 0]], dtype=np.uint8)
    assert dice_loss(p, gt).item() == pytest.approx(1.0 - (2.0 + 1e-6) / (4.0 + 1e-6), abs=1e-15)
    assert dice_loss(p, gt).item() == pytest.approx(0.5, abs=1e-6)


def test_bce_and_loglik_worked_example():
    p = Tensor(np.array([[0.9, 0.2]]))
    gt = np.array([[1, 0]], dtype=np.uint8)
    expected = (-math.log(0.9) - math.log(0.8)) / 2
    assert bce_loss(p, gt).item() == pytest.approx(expected, abs=1e-12)
    assert bce_loss(p, gt).item() == pytest.approx(0.164252, abs=1e-6)
    assert mask_loglik(p, gt).item() == pytest.approx(-expected, abs=1e-12)


def test_bce_of_half_probability_is_ln2(rng):
    gt = random_mask(rng, (5, 5))
    assert bce_loss(Tensor(np.full((5, 5), 0.5)), gt).item() == pytest.approx(math.log(2.0), abs=1e-12)
