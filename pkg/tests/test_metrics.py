#!/usr/bin/env python3
"""
Тесты метрик: KSG против аналитической MI гауссовых пар,
стабильность, PCA оракул, углы между подпространствами и данные рисунков
"""

import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.data_structures import ModelConfig  # noqa: E402
from src.errors import ConfigError, DomainError, ShapeError  # noqa: E402
from src.full_encoder import FEParams  # noqa: E402
from src.metrics import (  # noqa: E402
    HIST_BINS, anomaly_scores, histogram_frame, ksg_mi, mi_matrix, pca_oracle,
    principal_angles, recon_error_from_reconstructions, recon_error_per_level,
    reconstruction_subspace, run_report, stability_score, traversal_ranges,
)
from src.nonlinear_system import build_system, evaluate, sample_dataset  # noqa: E402


def gaussian_pair(rho, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(n)
    b = rho * a + np.sqrt(1 - rho ** 2) * rng.standard_normal(n)
    return a, b


class TestKSG:

    @pytest.mark.parametrize("rho", [0.0, 0.5, 0.9])
    def test_gaussian_closed_form(self, rho):
        a, b = gaussian_pair(rho, 5000, seed=int(rho * 10))
        expected = -0.5 * np.log(1 - rho ** 2)
        assert ksg_mi(a, b).raw == pytest.approx(expected, abs=0.05)

    def test_independent_uniform(self):
        rng = np.random.default_rng(1)
        result = ksg_mi(rng.uniform(size=2000), rng.uniform(size=2000))
        assert abs(result.raw) < 0.05
        assert result.mi >= 0.0

    def test_deterministic_relation(self):
        a = np.random.default_rng(2).standard_normal(2000)
        assert ksg_mi(a, 2 * a + 1).mi > 2.0

    def test_constant_column_is_degenerate(self):
        result = ksg_mi(np.ones(100), np.arange(100.0))
        assert result.degenerate
        assert result.mi == 0.0

    def test_reproducible(self):
        a, b = gaussian_pair(0.5, 500, seed=3)
        assert ksg_mi(a, b).raw == ksg_mi(a, b).raw

    def test_too_few_points(self):
        with pytest.raises(ConfigError):
            ksg_mi(np.arange(4.0), np.arange(4.0), k=3)

    def test_mi_matrix_finds_copied_factor(self):
        rng = np.random.default_rng(4)
        factors = rng.standard_normal((1000, 3))
        latents = np.column_stack([factors[:, 2] ** 3, rng.standard_normal(1000)])
        mi, raw = mi_matrix(latents, factors)
        assert mi.shape == (2, 3)
        assert np.argmax(mi[0]) == 2
        assert mi[0, 2] > 1.0
        assert np.all(mi[1] < 0.1)
        assert np.all(mi >= 0) and np.all(mi >= raw)


class TestStability:

    def test_self_and_sign_flip(self):
        latents = np.random.default_rng(0).standard_normal((500, 4))
        scores, mean = stability_score(latents, latents)
        np.testing.assert_allclose(scores, 1.0)
        flipped = latents.copy()
        flipped[:, 1] *= -1
        flipped[:, 3] = np.exp(flipped[:, 3])
        _, mean_flipped = stability_score(latents, flipped)
        assert mean == pytest.approx(1.0)
        assert mean_flipped == pytest.approx(1.0)

    def test_independent_runs(self):
        rng = np.random.default_rng(1)
        scores, _ = stability_score(rng.standard_normal((2000, 5)), rng.standard_normal((2000, 5)))
        assert np.all(scores < 0.1)

    def test_constant_latent_scores_zero(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((100, 2))
        b = a.copy()
        b[:, 0] = 0.0
        scores, _ = stability_score(a, b)
        assert scores[0] == 0.0 and scores[1] == pytest.approx(1.0)

    def test_mismatched_runs(self):
        with pytest.raises(ConfigError):
            stability_score(np.zeros((10, 3)), np.zeros((10, 4)))
        with pytest.raises(ShapeError):
            stability_score(np.zeros((10, 3)), np.zeros((11, 3)))


class TestPCA:

    def test_isotropic_truncation_error(self):
        X = np.random.default_rng(0).standard_normal((20000, 10))
        result = pca_oracle(X, 3)
        assert result.truncation_error == pytest.approx(0.7, rel=0.05)

    def test_rank_one_data(self):
        rng = np.random.default_rng(1)
        direction = rng.standard_normal(6)
        X = np.outer(rng.standard_normal(300), direction)
        result = pca_oracle(X, 1)
        assert result.truncation_error < 1e-12
        assert principal_angles(result.components, direction[:, None])[0] < 1e-6

    def test_components_orthonormal_and_error_nonincreasing(self):
        X = np.random.default_rng(2).standard_normal((500, 8)) @ np.diag(np.arange(1.0, 9.0))
        errors = []
        for k in range(1, 9):
            result = pca_oracle(X, k)
            np.testing.assert_allclose(result.components.T @ result.components, np.eye(k), atol=1e-10)
            errors.append(result.truncation_error)
        assert all(b <= a for a, b in zip(errors, errors[1:]))
        assert errors[-1] == pytest.approx(0.0, abs=1e-12)

    def test_invalid_k(self):
        with pytest.raises(ConfigError):
            pca_oracle(np.zeros((10, 3)), 4)

    def test_reconstruction_subspace(self):
        rng = np.random.default_rng(3)
        basis = np.linalg.qr(rng.standard_normal((10, 2)))[0]
        x_hat = rng.standard_normal((200, 2)) @ basis.T + 5.0
        angles = principal_angles(reconstruction_subspace(x_hat, 2), basis)
        assert np.max(angles) < 1e-6


class TestPrincipalAngles:

    def test_known_angles(self):
        e1, e2 = np.eye(3)[:, :1], np.eye(3)[:, 1:2]
        assert principal_angles(e1, e1)[0] == pytest.approx(0.0, abs=1e-6)
        assert principal_angles(e1, e2)[0] == pytest.approx(90.0)
        assert principal_angles(e1, (e1 + e2) / np.sqrt(2))[0] == pytest.approx(45.0)

    def test_degenerate_basis(self):
        with pytest.raises(DomainError):
            principal_angles(np.zeros((3, 1)), np.eye(3)[:, :1])


class TestReconstructionMetrics:

    def test_noise_floor(self):
        spec = build_system(seed=0)
        data = sample_dataset(spec, 10000, seed=1)
        (re,) = recon_error_from_reconstructions(data.X, [evaluate(spec, data.S)])
        assert re == pytest.approx(0.125 ** 2, rel=0.05)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            recon_error_from_reconstructions(np.zeros((3, 2)), [np.zeros((2, 3))])

    def test_anomaly_scores_average_to_recon_error(self):
        params = FEParams.init(ModelConfig(n_latents=2), np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((40, 48))
        scores = anomaly_scores(params, x)
        assert scores.shape == (40, 3)
        np.testing.assert_allclose(scores.mean(axis=0), recon_error_per_level(params, x))


@pytest.fixture(scope="module")
def untrained_report_inputs():
    spec = build_system(seed=0)
    holdout = sample_dataset(spec, 120, seed=2)
    params = FEParams.init(ModelConfig(n_latents=2), np.random.default_rng(0))
    return params, holdout, spec


class TestReportData:

    def test_histogram_counts_conserved(self, untrained_report_inputs):
        params, holdout, _ = untrained_report_inputs
        frame = histogram_frame(params, holdout.X)
        totals = frame.groupby(['level', 'code_kind'])['count'].sum()
        assert (totals == holdout.n * params.config.median_dim).all()
        assert len(frame) == (3 + 2 * 2) * HIST_BINS

    def test_run_report(self, untrained_report_inputs):
        params, holdout, spec = untrained_report_inputs
        report = run_report(params, holdout, spec, seed=4)
        assert report.levels == [0, 1, 2]
        assert report.latent_labels == ["L1", "L2", "L3"]
        assert report.mi.shape == (3, 5)
        assert np.all(report.mi >= 0)
        assert len(report.traversal) == 3 * 5 * 41
        assert report.latent_responses.shape == (120, 3)

    def test_traversal_ranges(self):
        frame = pd.DataFrame({
            'latent': ["L1"] * 4 + ["L2"] * 4,
            'factor': ["S1", "S1", "S2", "S2"] * 2,
            'grid_value': [0.0, 1.0] * 4,
            'latent_response': [0.0, 2.0, 0.0, 0.5, 1.0, 1.0, 0.0, 0.1],
        })
        ranges = traversal_ranges(frame)
        assert ranges["L1"] == pytest.approx(2.0)
        assert ranges["L2"] == pytest.approx(0.1)
