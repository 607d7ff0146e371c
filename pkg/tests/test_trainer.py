import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import mapo_tools.trainer as trainer
from conftest import make_sample, numeric_grad, relative_error
from mapo_tools.autodiff import Tape
from mapo_tools.errors import ContractViolation, NonFiniteGradientError
from mapo_tools.losses import combined_loss
from mapo_tools.optim import Optimizer
from mapo_tools.preference import DropoutGrid, PreferenceRecord, PreferenceSet, build_preference_set
from mapo_tools.segnet import ModelSpec, ModelState, clone_frozen, forward, init_params
from mapo_tools.synth import Sample, TaskSpec, generate_dataset, select_split
from mapo_tools.trainer import (
    Seeds,
    TrainConfig,
    dpo_round,
    evaluate,
    online_loop,
    supervised_continue,
    warmup_train,
    write_round_logs,
)

TINY = ModelSpec(kind="pixel-mlp", channels=(2, 2, 2), input_shape=(1, 4, 4))


@pytest.fixture
def tiny_dataset() -> list[Sample]:
    """Three 4x4 samples, one per split."""
    rng = np.random.default_rng(0)
    samples = []
    for index, split in enumerate(("train", "val", "test")):
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[index : index + 2, 1:3] = 1
        image = np.clip(0.25 + 0.5 * gt + rng.normal(0, 0.05, (4, 4)), 0.0, 1.0)
        samples.append(make_sample(f"tiny-{index}", image, gt, split))
    return samples


@pytest.fixture
def quick_cfg() -> TrainConfig:
    return TrainConfig(lr=1e-2, warmup_epochs=2, dpo_epochs=2, refresh_interval=1, batch_size=4)


def identity_model(spec: ModelSpec) -> ModelState:
    """A pixel-mlp whose probability map is ~1 where the image is 1 and ~0 where it is 0."""
    state = init_params(spec, seed=0)
    for t in state.params.values():
        t.data[...] = 0.0
    state.params["l0.w"].data[0, 0, 1, 1] = 1.0
    state.params["l1.w"].data[0, 0] = 1.0
    state.params["l2.w"].data[0, 0] = 1.0
    state.params["head.w"].data[0, 0] = 40.0
    state.params["head.b"].data[...] = -20.0
    return state


def half_model(spec: ModelSpec) -> ModelState:
    state = init_params(spec, seed=0)
    for t in state.params.values():
        t.data[...] = 0.0
    return state


def full_pref_set(reference: ModelState, samples: list[Sample], tau: float = 0.0) -> PreferenceSet:
    return build_preference_set(
        reference, select_split(samples, "train"), "dropout", DropoutGrid(), tau, 2, 1, reference.version
    )


def test_config_validation():
    with pytest.raises(ContractViolation):
        TrainConfig(dpo_epochs=40, refresh_interval=15)
    with pytest.raises(ContractViolation):
        TrainConfig(lr=0.0)
    with pytest.raises(ContractViolation):
        TrainConfig(tau=2.0)
    with pytest.raises(ContractViolation):
        Seeds(init=-1)
    full = TrainConfig.full_scale()
    assert (full.warmup_epochs, full.dpo_epochs, full.refresh_interval, full.rounds) == (100, 200, 50, 4)
    assert TrainConfig().rounds == 4


def test_zero_warmup_epochs_returns_input_state(samples, unet_spec, quick_cfg):
    state = init_params(unet_spec, seed=0)
    best, logs = warmup_train(state, samples, quick_cfg, epochs=0)
    assert best is state
    assert logs == []


def test_empty_dataset_is_rejected(quick_cfg):
    with pytest.raises(ContractViolation):
        warmup_train(init_params(TINY, seed=0), [], quick_cfg)


def test_warmup_keeps_best_validation_checkpoint(samples, unet_spec, quick_cfg):
    best, logs = warmup_train(init_params(unet_spec, seed=0), samples, replace(quick_cfg, warmup_epochs=3))
    assert [log.epoch for log in logs] == [1, 2, 3]
    assert all(log.stage == "warmup" for log in logs)
    assert all(log.pairs_found == 0 and log.reference_version is None for log in logs)
    best_dice = evaluate(best, select_split(samples, "val")).mean_dice
    assert best_dice == max(log.val_dice for log in logs)
    assert best.lineage[-1].startswith("warmup:3")


def test_warmup_is_deterministic(samples, unet_spec, quick_cfg, tmp_path: Path):
    for name in ("a", "b"):
        _, logs = warmup_train(init_params(unet_spec, seed=0), samples, quick_cfg)
        write_round_logs(logs, tmp_path / f"{name}.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_supervised_continue_labels_its_stage(samples, mlp_spec, quick_cfg):
    _, logs = supervised_continue(init_params(mlp_spec, seed=0), samples, quick_cfg, epochs=2)
    assert [log.stage for log in logs] == ["supervised", "supervised"]


def test_non_finite_gradient_aborts_the_epoch(samples, mlp_spec, quick_cfg, monkeypatch, log_capture):
    def explode(self):
        self.state.zero_grad()
        raise NonFiniteGradientError("l0.w")

    monkeypatch.setattr(Optimizer, "step", explode)
    state = init_params(mlp_spec, seed=0)
    before = {k: t.data.copy() for k, t in state.params.items()}
    _, logs = warmup_train(state, samples, quick_cfg, epochs=1)
    assert len(logs) == 1
    assert "Aborting epoch 1" in log_capture.text
    for k, t in state.params.items():
        np.testing.assert_array_equal(t.data, before[k])


def test_first_dpo_step_loss_is_ln2_per_pair(samples, mlp_spec):
    cfg = TrainConfig(lr=1e-3, lam=0.0, dpo_epochs=1, refresh_interval=1, batch_size=64)
    state = init_params(mlp_spec, seed=1)
    reference = clone_frozen(state)
    pset = full_pref_set(reference, samples)
    _, logs = dpo_round(state, reference, pset, samples, cfg, epochs=1)
    n_train = len(select_split(samples, "train"))
    assert pset.pairs_found == n_train
    assert logs[0].train_loss == pytest.approx(math.log(2.0), abs=1e-12)


def test_no_gradient_source_leaves_parameters_unchanged(samples, mlp_spec):
    cfg = TrainConfig(lam=0.0, dpo_epochs=1, refresh_interval=1)
    state = init_params(mlp_spec, seed=1)
    reference = clone_frozen(state)
    pset = full_pref_set(reference, samples)
    empty = replace(pset, records=[PreferenceRecord(r.sample_id, None) for r in pset.records])
    before = {k: t.data.copy() for k, t in state.params.items()}
    _, logs = dpo_round(state, reference, empty, samples, cfg, epochs=2)
    for k, t in state.params.items():
        np.testing.assert_array_equal(t.data, before[k])
    assert all(log.pairs_found == 0 and log.pairs_skipped == len(pset.records) for log in logs)


def test_reference_must_be_frozen(samples, mlp_spec, quick_cfg):
    state = init_params(mlp_spec, seed=1)
    pset = full_pref_set(clone_frozen(state), samples)
    with pytest.raises(ContractViolation):
        dpo_round(state, state, pset, samples, quick_cfg, epochs=1)


def test_stale_reference_is_rejected(samples, mlp_spec, quick_cfg):
    state = init_params(mlp_spec, seed=1)
    reference = clone_frozen(state)
    pset = full_pref_set(reference, samples)
    reference.version += 1
    with pytest.raises(ContractViolation):
        dpo_round(state, reference, pset, samples, quick_cfg, epochs=1)


def test_preferences_from_another_model_version_are_rejected(samples, mlp_spec, quick_cfg):
    state = init_params(mlp_spec, seed=1)
    reference = clone_frozen(state)
    pset = full_pref_set(reference, samples)
    assert pset.model_version == state.version
    state.version += 1
    with pytest.raises(ContractViolation, match="generated by model"):
        dpo_round(state, reference, pset, samples, quick_cfg, epochs=1)


def test_dpo_round_never_samples_dropout(samples, mlp_spec, quick_cfg, monkeypatch):
    calls = []

    def spy(state, image, dropout_rate=0.0, seed=0, stochastic=False):
        calls.append(stochastic)
        return forward(state, image, dropout_rate, seed, stochastic)

    state = init_params(mlp_spec, seed=1)
    reference = clone_frozen(state)
    pset = full_pref_set(reference, samples, tau=0.1)
    monkeypatch.setattr(trainer, "forward", spy)
    dpo_round(state, reference, pset, samples, quick_cfg, epochs=1)
    assert calls and not any(calls)


def test_total_objective_gradient_on_two_samples(mlp_spec):
    rng = np.random.default_rng(7)
    cfg = TrainConfig(beta=0.5, lam=0.5).dpo()
    state = init_params(mlp_spec, seed=3)
    reference = clone_frozen(init_params(mlp_spec, seed=4))
    micro = []
    for k in range(2):
        gt = (rng.random((8, 8)) < 0.4).astype(np.uint8)
        pos = gt.copy()
        neg = (rng.random((8, 8)) < 0.5).astype(np.uint8)
        micro.append((make_sample(f"m{k}", rng.random((8, 8)), gt, "train"), pos, neg))
    ref_maps = [forward(reference, s.image) for s, _, _ in micro]

    def objective():
        terms = [
            combined_loss(forward(state, s.image), ref, s.gt, pos, neg, cfg)
            for (s, pos, neg), ref in zip(micro, ref_maps)
        ]
        return (terms[0] + terms[1]) * 0.5

    with Tape() as tape:
        tape.backward(objective())
    for name in ("l0.w", "head.b"):
        analytic = state.params[name].grad
        original = state.params[name].data.copy()

        def value(v: np.ndarray) -> float:
            state.params[name].data[...] = v
            return objective().item()

        numeric = numeric_grad(value, original)
        state.params[name].data[...] = original
        assert relative_error(analytic, numeric) < 1e-4


def test_schedule_fidelity_at_full_scale(tiny_dataset, tmp_path: Path):
    cfg = TrainConfig.full_scale(lr=1e-2, tau=0.0)
    warm, warm_logs = warmup_train(init_params(TINY, seed=0), tiny_dataset, cfg)
    assert len(warm_logs) == 100

    rounds: list[PreferenceSet] = []
    _, logs = online_loop(warm, tiny_dataset, cfg, cache_dir=tmp_path / "prefs", on_round=rounds.append)
    assert len(rounds) == 4
    assert sorted(p.name for p in (tmp_path / "prefs").iterdir()) == [f"round_0{r}.yaml" for r in range(1, 5)]
    assert [p.reference_version for p in rounds] == [1, 2, 3, 4]
    assert len(logs) == 200
    assert [log.epoch for log in logs] == list(range(1, 201))
    assert sorted({log.reference_version for log in logs}) == [1, 2, 3, 4]
    assert all(log.pairs_found + log.pairs_skipped == 1 for log in logs)

    write_round_logs(logs, tmp_path / "a.csv")
    _, again = online_loop(warm, tiny_dataset, cfg)
    write_round_logs(again, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_refresh_equal_to_dpo_epochs_is_a_single_round(tiny_dataset):
    cfg = TrainConfig(lr=1e-2, dpo_epochs=3, refresh_interval=3)
    rounds: list[PreferenceSet] = []
    _, logs = online_loop(init_params(TINY, seed=0), tiny_dataset, cfg, on_round=rounds.append)
    assert len(rounds) == 1
    assert len(logs) == 3


def test_static_reference_mode_keeps_the_first_snapshot(tiny_dataset):
    cfg = TrainConfig(lr=1e-2, dpo_epochs=4, refresh_interval=2, refresh_reference=False)
    rounds: list[PreferenceSet] = []
    _, logs = online_loop(init_params(TINY, seed=0), tiny_dataset, cfg, on_round=rounds.append)
    assert {log.reference_version for log in logs} == {1}
    assert [(p.model_version, p.reference_version) for p in rounds] == [(1, 1), (2, 1)]


def test_online_loop_does_not_mutate_the_warm_state(tiny_dataset):
    warm = init_params(TINY, seed=0)
    before = {k: t.data.copy() for k, t in warm.params.items()}
    online_loop(warm, tiny_dataset, TrainConfig(lr=1e-2, dpo_epochs=2, refresh_interval=1))
    assert warm.version == 0
    for k, t in warm.params.items():
        np.testing.assert_array_equal(t.data, before[k])


def test_evaluate_perfect_model():
    spec = ModelSpec(kind="pixel-mlp", channels=(2, 2, 2), input_shape=(1, 8, 8))
    samples = []
    for k in range(3):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[k : k + 3, 2:6] = 1
        samples.append(make_sample(f"p{k}", gt.astype(float), gt, "test"))
    table = evaluate(identity_model(spec), samples)
    assert table.mean_dice == 1.0
    assert table.mean_asd == 0.0
    assert table.asd_undefined == 0


def test_evaluate_constant_half_output_predicts_everything(samples, mlp_spec):
    test = select_split(samples, "test") + select_split(samples, "val")
    table = evaluate(half_model(mlp_spec), test)
    for row, sample in zip(table.rows, test):
        g = int(sample.gt.sum())
        assert row.dice == pytest.approx(2 * g / (sample.gt.size + g), abs=1e-15)
    assert table == evaluate(half_model(mlp_spec), test)


def test_evaluate_counts_undefined_asd(mlp_spec):
    empty_gt = np.zeros((8, 8), dtype=np.uint8)
    table = evaluate(half_model(mlp_spec), [make_sample("e", np.zeros((8, 8)), empty_gt, "test")])
    assert table.rows[0].asd is None
    assert table.asd_undefined == 1
    assert table.mean_asd is None


def blobs_experiment(seed: int) -> tuple[list[Sample], TrainConfig, ModelSpec]:
    """The desk-scale blobs task: 200/42/42 samples of 32x32."""
    spec = TaskSpec(kind="blobs", image_size=(32, 32), count=284, noise_std=0.03, boundary_blur=1.0, seed=seed)
    data = generate_dataset(spec)
    cfg = TrainConfig(seeds=Seeds(init=seed, data=seed + 1, sampling=seed + 2), workers=4)
    return data, cfg, ModelSpec(kind="tiny-unet", input_shape=(1, 32, 32))


@pytest.mark.slow
def test_blobs_experiment_has_two_hundred_training_samples():
    data, _, _ = blobs_experiment(0)
    assert [len(select_split(data, split)) for split in ("train", "val", "test")] == [200, 42, 42]


@pytest.mark.slow
def test_warmup_reaches_dice_080_on_blobs():
    dice = []
    for seed in range(5):
        data, cfg, model = blobs_experiment(seed)
        _, logs = warmup_train(init_params(model, seed=seed), data, replace(cfg, lr=1e-3))
        assert len(logs) == 20
        dice.append(max(log.val_dice for log in logs))
    assert np.median(dice) >= 0.80


@pytest.mark.slow
def test_preference_training_does_not_lose_to_continued_supervision():
    gains = []
    for seed in range(5):
        data, cfg, model = blobs_experiment(seed)
        warm, _ = warmup_train(init_params(model, seed=seed), data, cfg)
        mapo, _ = online_loop(warm, data, cfg)
        base, _ = supervised_continue(warm, data, cfg, cfg.dpo_epochs)
        test = select_split(data, "test")
        gains.append((evaluate(mapo, test).mean_dice, evaluate(base, test).mean_dice))
    assert np.median([g[0] for g in gains]) >= np.median([g[1] for g in gains])


@pytest.mark.slow
def test_blobs_experiment_logs_repeat_byte_for_byte(tmp_path: Path):
    for name in ("a", "b"):
        data, cfg, model = blobs_experiment(0)
        out = tmp_path / name
        warm, warm_logs = warmup_train(init_params(model, seed=0), data, cfg)
        _, mapo_logs = online_loop(warm, data, cfg, cache_dir=out / "preferences")
        _, base_logs = supervised_continue(warm, data, cfg, cfg.dpo_epochs)
        write_round_logs(warm_logs, out / "warmup_log.csv")
        write_round_logs(mapo_logs, out / "mapo_log.csv")
        write_round_logs(base_logs, out / "baseline_log.csv")
    for name in ("warmup_log.csv", "mapo_log.csv", "baseline_log.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for cache in sorted((tmp_path / "a" / "preferences").iterdir()):
        assert cache.read_bytes() == (tmp_path / "b" / "preferences" / cache.name).read_bytes()


@pytest.mark.slow
def test_consecutive_rounds_select_different_pairs():
    changed = []
    for seed in range(5):
        spec = TaskSpec(kind="blobs", image_size=(32, 32), count=40, seed=seed)
        data = generate_dataset(spec)
        seeds = Seeds(init=seed, data=seed, sampling=seed)
        cfg = TrainConfig(lr=1e-3, warmup_epochs=5, dpo_epochs=20, refresh_interval=10, seeds=seeds)
        model = ModelSpec(kind="tiny-unet", input_shape=(1, 32, 32))
        warm, _ = warmup_train(init_params(model, seed=seed), data, cfg)
        rounds: list[PreferenceSet] = []
        online_loop(warm, data, cfg, on_round=rounds.append)
        first, second = (
            {r.sample_id: None if r.pair is None else (r.pair.k_pos, r.pair.k_neg) for r in p.records} for p in rounds
        )
        changed.append(sum(first[k] != second[k] for k in first))
    assert np.median(changed) >= 1


@pytest.mark.slow
def test_dropout_candidates_vary_more_than_thresholds():
    wins = 0
    for seed in range(5):
        spec = TaskSpec(kind="curves", image_size=(32, 32), count=40, seed=seed)
        data = generate_dataset(spec)
        cfg = TrainConfig(warmup_epochs=10, seeds=Seeds(init=seed, data=seed, sampling=seed))
        model = ModelSpec(kind="tiny-unet", input_shape=(1, 32, 32))
        warm, _ = warmup_train(init_params(model, seed=seed), data, cfg)
        frozen = clone_frozen(warm)
        train = select_split(data, "train")
        variance = {
            strategy: build_preference_set(frozen, train, strategy, DropoutGrid(), 0.3, seed, 1, 0).mean_pixel_variance
            for strategy in ("dropout", "threshold")
        }
        wins += variance["dropout"] > variance["threshold"]
    assert wins == 5
