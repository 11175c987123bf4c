#!/usr/bin/env python3
"""
Тесты цикла обучения: батчи, маршрутизация градиентов по группам,
детерминизм и продолжение обучения из чекпоинта
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src import tensor as T  # noqa: E402
from src.data_structures import Dataset, ModelConfig, TrainConfig  # noqa: E402
from src.errors import ConfigError, NumericalError  # noqa: E402
from src.full_encoder import FEParams, compute_losses, encode0, encode_latents, forward_full  # noqa: E402
from src.metrics import (  # noqa: E402
    latent_traversal, recon_error_per_level, stability_score, traversal_ranges,
)
from src.nonlinear_system import build_system, sample_dataset  # noqa: E402
from src.storage import load_checkpoint  # noqa: E402
from src.trainer import (  # noqa: E402
    history_to_frame, make_batches, make_optimizers, save_history_csv, train_run, train_step,
)

SLOW = pytest.mark.skipif(os.environ.get("FE_LAB_SLOW") != "1",
                          reason="долгий тест, включается FE_LAB_SLOW=1")


@pytest.fixture(scope="module")
def dataset():
    return sample_dataset(build_system(seed=0), 600, seed=1)


def small_train(**kwargs):
    values = dict(iterations=20, batch_size=50, eval_size=100, eval_every=10, log_every=1000, seed=3)
    values.update(kwargs)
    return TrainConfig(**values)


def _values(params):
    return {name: t.values.copy() for name, t in params.named_tensors().items()}


class TestBatches:

    def test_deterministic(self):
        a = make_batches(100, 10, np.random.default_rng(0))
        b = make_batches(100, 10, np.random.default_rng(0))
        for _ in range(5):
            np.testing.assert_array_equal(next(a), next(b))

    def test_shape_and_range(self):
        idx = next(make_batches(30, 500, np.random.default_rng(0)))
        assert idx.shape == (500,)
        assert idx.min() >= 0 and idx.max() < 30

    def test_every_row_drawn(self):
        batches = make_batches(10000, 500, np.random.default_rng(1))
        seen = np.zeros(10000, dtype=bool)
        for _ in range(10000):
            seen[next(batches)] = True
        assert seen.all()

    def test_empty_dataset(self):
        with pytest.raises(ConfigError):
            make_batches(0, 10, np.random.default_rng(0))


class TestTrainStep:

    def test_zero_gradient_step_keeps_params(self):
        params = FEParams.init(ModelConfig(n_latents=2), np.random.default_rng(0))
        before = _values(params)
        optimizers = make_optimizers(params, 1e-3)
        for optimizer in optimizers.values():
            optimizer.step()
        for name, t in params.named_tensors().items():
            np.testing.assert_array_equal(t.values, before[name])

    def test_only_routed_group_changes(self):
        params = FEParams.init(ModelConfig(n_latents=3), np.random.default_rng(0))
        rng = np.random.default_rng(1)
        x = rng.standard_normal((32, 48))
        groups = params.groups()
        optimizers = make_optimizers(params, 1e-3)
        before = {name: [t.values.copy() for t in tensors] for name, tensors in groups.items()}

        with T.Tape() as tape:
            losses = compute_losses(forward_full(params, x, rng=rng), x, None, params.config)
        T.backward(tape, losses["nn2"], params=groups["nn2"])
        for optimizer in optimizers.values():
            optimizer.step()

        for name, tensors in groups.items():
            changed = any(not np.array_equal(t.values, old) for t, old in zip(tensors, before[name]))
            assert changed == (name == "nn2"), name

    def test_step_reduces_decoder_loss(self, dataset):
        decreased = 0
        for seed in range(20):
            params = FEParams.init(ModelConfig(n_latents=2), np.random.default_rng(seed))
            optimizers = make_optimizers(params, 1e-4)
            x = dataset.X[:64]

            def decoder_loss():
                out = forward_full(params, x, rng=np.random.default_rng(seed))
                return compute_losses(out, x, None, params.config)["decoder"].item()

            before = decoder_loss()
            train_step(params, x, None, optimizers, np.random.default_rng(seed))
            decreased += decoder_loss() < before
        assert decreased > 10

    def test_nan_raises_numerical_error(self):
        params = FEParams.init(ModelConfig(n_latents=2), np.random.default_rng(0))
        x = np.full((8, 48), np.nan)
        with pytest.raises(NumericalError) as info:
            train_step(params, x, None, make_optimizers(params, 1e-3), np.random.default_rng(0), iteration=7)
        assert info.value.iteration == 7
        assert info.value.diagnostics()["iteration"] == 7

    def test_baseline_updates_both_groups(self, dataset):
        params = FEParams.init(ModelConfig.for_kind("vae", 3), np.random.default_rng(0))
        before = _values(params)
        values = train_step(params, dataset.X[:32], None, make_optimizers(params, 1e-3),
                            np.random.default_rng(0))
        assert set(values) == {"encoder", "decoder", "kl"}
        assert all(not np.array_equal(t.values, before[name])
                   for name, t in params.named_tensors().items() if name.endswith("weight"))


class TestTrainRun:

    def test_zero_iterations_returns_init(self, dataset):
        config = ModelConfig(n_latents=2)
        params, history = train_run(dataset, config, small_train(iterations=0), verbose=False)
        expected = FEParams.init(config, np.random.default_rng([3, 0]),
                                 output_mean=dataset.X[:-100].mean(axis=0))
        assert len(history) == 0
        for name, t in expected.named_tensors().items():
            np.testing.assert_array_equal(params.named_tensors()[name].values, t.values)

    def test_deterministic(self, dataset):
        config = ModelConfig(n_latents=2)
        p1, h1 = train_run(dataset, config, small_train(), verbose=False)
        p2, h2 = train_run(dataset, config, small_train(), verbose=False)
        assert h1.to_dict() == h2.to_dict()
        for name, t in p1.named_tensors().items():
            assert t.values.tobytes() == p2.named_tensors()[name].values.tobytes()

    def test_history_iterations(self, dataset):
        _, history = train_run(dataset, ModelConfig(n_latents=2), small_train(iterations=25), verbose=False)
        assert [r.iteration for r in history.records] == [10, 20, 25]
        assert all(len(r.re) == 3 for r in history.records)

    def test_resume_matches_uninterrupted(self, dataset, tmp_path):
        config = ModelConfig(n_latents=2)
        ckpt = tmp_path / "ckpt.fec"
        train_run(dataset, config, small_train(iterations=20, checkpoint_path=str(ckpt)), verbose=False)
        resumed, h_resumed = train_run(dataset, config, small_train(iterations=40), resume_from=ckpt,
                                       verbose=False)
        straight, h_straight = train_run(dataset, config, small_train(iterations=40), verbose=False)
        assert h_resumed.to_dict() == h_straight.to_dict()
        for name, t in straight.named_tensors().items():
            assert t.values.tobytes() == resumed.named_tensors()[name].values.tobytes()

    def test_resume_rejects_changed_protocol(self, dataset, tmp_path):
        config = ModelConfig(n_latents=2)
        ckpt = tmp_path / "ckpt.fec"
        train_run(dataset, config, small_train(checkpoint_path=str(ckpt)), verbose=False)
        with pytest.raises(ConfigError):
            train_run(dataset, config, small_train(iterations=40, lr=0.01), resume_from=ckpt, verbose=False)
        with pytest.raises(ConfigError):
            train_run(dataset, ModelConfig(n_latents=3), small_train(iterations=40), resume_from=ckpt,
                      verbose=False)

    def test_checkpoint_records_dataset(self, dataset, tmp_path):
        ckpt = tmp_path / "ckpt.fec"
        train_run(dataset, ModelConfig(n_latents=1), small_train(checkpoint_path=str(ckpt)), verbose=False)
        checkpoint = load_checkpoint(ckpt)
        assert checkpoint.dataset_digest == dataset.digest()
        assert checkpoint.iteration == 20

    def test_supervised_needs_factors(self, dataset):
        bare = Dataset(S=np.zeros((dataset.n, 0)), X=dataset.X)
        with pytest.raises(ConfigError):
            train_run(bare, ModelConfig.for_kind("supervised-fe", 5), small_train(), verbose=False)

    def test_batch_larger_than_train_split(self, dataset):
        with pytest.raises(ConfigError):
            train_run(dataset, ModelConfig(n_latents=1), small_train(batch_size=550), verbose=False)

    def test_supervised_runs(self, dataset):
        _, history = train_run(dataset, ModelConfig.for_kind("supervised-fe", 5), small_train(),
                               verbose=False)
        assert history.levels == list(range(6))

    def test_training_reduces_error(self, dataset):
        config = ModelConfig(n_latents=1)
        train = small_train(iterations=300, batch_size=100, eval_every=100)
        untrained, _ = train_run(dataset, config, small_train(iterations=0), verbose=False)
        initial = recon_error_per_level(untrained, dataset.X[-100:])
        params, _ = train_run(dataset, config, train, verbose=False)
        final = recon_error_per_level(params, dataset.X[-100:])
        assert final[0] < initial[0]
        assert final[1] < 0.9 * initial[1]

    def test_untrained_error_is_data_variance(self, dataset):
        params, _ = train_run(dataset, ModelConfig(n_latents=3), small_train(iterations=0), verbose=False)
        holdout = dataset.X[-100:]
        variance = float(np.mean(holdout.var(axis=0)))
        for re in recon_error_per_level(params, holdout):
            assert re == pytest.approx(variance, rel=0.15)

    def test_history_csv(self, dataset, tmp_path):
        _, history = train_run(dataset, ModelConfig(n_latents=2), small_train(), verbose=False)
        frame = history_to_frame(history)
        assert list(frame.columns[:5]) == ["iteration", "re_0", "re_1", "re_2", "kl"]
        assert "loss_nn2" in frame.columns
        assert save_history_csv(history, tmp_path / "history.csv").exists()


# --- долгие проверки на игрушечной системе (масштаб desk: 4000 строк + 1000 отложенных) ---

DESK_SEEDS = (0, 1, 2)


def desk_train(seed, iterations=5000, eval_every=250):
    return TrainConfig(iterations=iterations, batch_size=500, eval_size=1000, eval_every=eval_every,
                       log_every=max(1, iterations), seed=seed)


@pytest.fixture(scope="module")
def toy_system():
    return build_system(seed=0)


@pytest.fixture(scope="module")
def desk_data(toy_system):
    return sample_dataset(toy_system, 5000, seed=1)


@pytest.fixture(scope="module")
def fe6_runs(desk_data):
    """FE с 6 латентами, три сида: сид -> (параметры, история)"""
    return {seed: train_run(desk_data, ModelConfig(n_latents=6), desk_train(seed), verbose=False)
            for seed in DESK_SEEDS}


@pytest.fixture(scope="module")
def vae6_runs(desk_data):
    return {seed: train_run(desk_data, ModelConfig.for_kind("vae", 6), desk_train(seed), verbose=False)
            for seed in DESK_SEEDS[:2]}


@SLOW
class TestLongTraining:
    """Свойства обученных моделей (минуты обучения)"""

    def test_single_latent_learns(self, desk_data):
        config = ModelConfig(n_latents=1)
        untrained, _ = train_run(desk_data, config, desk_train(0, iterations=0), verbose=False)
        params, _ = train_run(desk_data, config, desk_train(0), verbose=False)
        holdout = desk_data.X[-1000:]
        initial = recon_error_per_level(untrained, holdout)
        final = recon_error_per_level(params, holdout)
        assert final[0] < 0.85 * initial[0]
        assert final[1] < 0.6 * initial[1]
        mu0, _ = encode0(params, holdout)
        assert mu0.values.std() > 0.2

    def test_refinement_is_monotone(self, fe6_runs):
        _, history = fe6_runs[0]
        records = [r for r in history.records if r.iteration >= 1000]
        assert records
        for record in records:
            assert all(b <= a + 0.01 for a, b in zip(record.re, record.re[1:])), record.iteration

    def test_plateau_after_true_dimension(self, fe6_runs):
        re = np.array([history.records[-1].re for _, history in fe6_runs.values()])
        gain_5 = np.mean(re[:, 4] - re[:, 5])
        gain_6 = np.mean(re[:, 5] - re[:, 6])
        assert gain_6 < 0.5 * gain_5

    def test_latents_stable_across_seeds(self, fe6_runs, vae6_runs, desk_data):
        holdout = desk_data.X[-1000:]

        def mean_score(runs):
            (a, _), (b, _) = runs[0], runs[1]
            return stability_score(encode_latents(a, holdout)[0], encode_latents(b, holdout)[0])[1]

        fe_score = mean_score(fe6_runs)
        assert fe_score >= 0.8
        assert mean_score(vae6_runs) < fe_score

    def test_redundant_latent_is_flat(self, fe6_runs, toy_system):
        params, _ = fe6_runs[0]
        ranges = traversal_ranges(latent_traversal(params, toy_system))
        assert ranges["L6"] < 0.25 * ranges["L1"]

    def test_higher_patchers_stay_near_zero(self, fe6_runs, desk_data):
        params, _ = fe6_runs[0]
        out = forward_full(params, desk_data.X[-1000:], training=False)
        stds = np.array([p1.values.std() for p1 in out.p1])
        assert stds[-1] < stds[0]
        assert np.polyfit(np.arange(1, len(stds) + 1), stds, 1)[0] < 0


@SLOW
class TestFullBudgetOrdering:
    """Обычный VAE лучше реконструирует при полном бюджете в 20000 итераций"""

    def test_vae_reconstructs_best(self, desk_data):
        wins = 0
        for seed in DESK_SEEDS:
            final = {}
            for kind in ("fe", "beta-fe", "vae"):
                _, history = train_run(desk_data, ModelConfig.for_kind(kind, 6),
                                       desk_train(seed, iterations=20000, eval_every=5000), verbose=False)
                final[kind] = history.records[-1].re[-1]
            wins += final["vae"] < final["beta-fe"] and final["vae"] < final["fe"]
        assert wins >= 2
