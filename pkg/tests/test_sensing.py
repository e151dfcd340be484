import numpy as np
import pytest

from covdiff.datamodel import make_partitions, sample_gaussian_data
from covdiff.errors import DimensionError, ValidationError
from covdiff.linalg import frobenius_norm
from covdiff.sensing import (
    SensingConfig,
    compressed_sample_cov,
    draw_projections,
    exact_measurements,
    load_ensemble,
    measure_dataset,
    measure_partition,
    save_ensemble,
    single_projection,
)


class TestSensingConfig:
    def test_paper_geometry(self):
        cfg = SensingConfig(l=32, m=9, p=256, sigma_n=0.01)
        assert (cfg.l, cfg.m, cfg.p) == (32, 9, 256)

    def test_m_must_be_below_l(self):
        with pytest.raises(ValidationError):
            SensingConfig(l=8, m=8, p=1)

    def test_negative_noise_rejected(self):
        with pytest.raises(ValidationError):
            SensingConfig(l=8, m=3, p=1, sigma_n=-0.1)


class TestDrawProjections:
    def test_paper_shapes(self):
        ens = draw_projections(SensingConfig(l=32, m=9, p=256), seed=0)
        assert ens.matrices.shape == (256, 32, 9)

    def test_single(self):
        ens = draw_projections(SensingConfig(l=8, m=3, p=1), seed=0)
        assert ens.matrices.shape == (1, 8, 3)

    def test_column_norm_statistic(self):
        # entries are N(0, 1/m) so E||column||^2 = l/m
        l, m = 16, 4
        ens = draw_projections(SensingConfig(l=l, m=m, p=1000), seed=5)
        sq = np.sum(ens.matrices**2, axis=1)  # (p, m) squared column norms
        assert np.mean(sq) == pytest.approx(l / m, rel=0.05)

    def test_full_column_rank(self):
        ens = draw_projections(SensingConfig(l=12, m=5, p=50), seed=2)
        smin = np.linalg.svd(ens.matrices, compute_uv=False)[:, -1]
        assert smin.min() > 1e-8

    def test_deterministic(self):
        a = draw_projections(SensingConfig(l=8, m=3, p=5), seed=9)
        b = draw_projections(SensingConfig(l=8, m=3, p=5), seed=9)
        assert np.array_equal(a.matrices, b.matrices)


class TestMeasurePartition:
    def test_selection_projection(self, gen):
        x = gen.standard_normal((6, 10))
        p_i = np.eye(6)[:, :3]
        y = measure_partition(x, p_i, sigma_n=0.0, seed=0)
        assert np.array_equal(y, x[:3])

    def test_noise_variance(self):
        y = measure_partition(np.zeros((20, 600)), np.eye(20), sigma_n=1.0, seed=4)
        assert np.var(y) == pytest.approx(1.0, rel=0.1)

    def test_reproducible(self, gen):
        x = gen.standard_normal((6, 4))
        p_i = gen.standard_normal((6, 2))
        a = measure_partition(x, p_i, 0.5, seed=7)
        b = measure_partition(x, p_i, 0.5, seed=7)
        assert np.array_equal(a, b)

    def test_dimension_mismatch(self, gen):
        with pytest.raises(DimensionError):
            measure_partition(gen.standard_normal((5, 4)),
                              gen.standard_normal((6, 2)), 0.0, seed=0)


class TestCompressedSampleCov:
    def test_identity_block(self):
        out = compressed_sample_cov(np.eye(4))
        assert np.allclose(out, np.eye(4) / 4.0)

    def test_single_column_rank_one(self, gen):
        y = gen.standard_normal(5)
        out = compressed_sample_cov(y)
        assert np.allclose(out, np.outer(y, y))

    def test_expectation_oracle(self, toeplitz16):
        # average S~ over many partitions approaches P.T Sigma P + sigma_n^2 I
        l, m, b, sigma_n = 16, 6, 64, 0.3
        proj = single_projection(l, m, seed=3).matrices[0]
        trials = 2000
        acc = np.zeros((m, m))
        gen = np.random.default_rng(10)
        for _ in range(trials):
            x = np.linalg.cholesky(toeplitz16) @ gen.standard_normal((l, b))
            y = proj.T @ x + sigma_n * gen.standard_normal((m, b))
            acc += compressed_sample_cov(y)
        mean = acc / trials
        expected = proj.T @ toeplitz16 @ proj + sigma_n**2 * np.eye(m)
        # 3-sigma Monte-Carlo band on the Frobenius deviation
        per_entry_std = np.sqrt(
            (np.outer(np.diag(expected), np.diag(expected)) + expected**2) / b
        ) / np.sqrt(trials)
        assert frobenius_norm(mean - expected) <= 3.0 * frobenius_norm(per_entry_std)


class TestMeasureDataset:
    def test_identity_projection_recovers_sample_cov(self, gen, toeplitz16):
        # sigma_n = 0 and P_i = I reproduce the plain per-block covariance
        n, p = 64, 4
        x = sample_gaussian_data(toeplitz16, n, seed=3)
        plan = make_partitions(n, p, seed=1)
        from covdiff.sensing import ProjectionEnsemble

        ens = ProjectionEnsemble(matrices=np.stack([np.eye(16)] * p))
        meas = measure_dataset(x, plan, ens, sigma_n=0.0, seed=0)
        for i in range(p):
            block = x[:, plan.index_sets[i]]
            assert np.allclose(meas.s_tilde[i], block @ block.T / plan.b, atol=1e-12)

    def test_measurement_budget_constant_in_p(self):
        # p * m * b = m * n regardless of the partition count
        n, m = 4096, 9
        for p in (4, 64, 256):
            b = n // p
            assert p * m * b == m * n

    def test_deterministic(self, toeplitz16):
        x = sample_gaussian_data(toeplitz16, 32, seed=5)
        plan = make_partitions(32, 4, seed=2)
        ens = draw_projections(SensingConfig(l=16, m=5, p=4, sigma_n=0.1), seed=8)
        a = measure_dataset(x, plan, ens, 0.1, seed=4)
        b = measure_dataset(x, plan, ens, 0.1, seed=4)
        assert np.array_equal(a.s_tilde, b.s_tilde)

    def test_psd_within_tolerance(self, toeplitz16):
        x = sample_gaussian_data(toeplitz16, 64, seed=6)
        plan = make_partitions(64, 8, seed=3)
        ens = draw_projections(SensingConfig(l=16, m=5, p=8, sigma_n=0.05), seed=1)
        meas = measure_dataset(x, plan, ens, 0.05, seed=2)
        for s in meas.s_tilde:
            assert np.linalg.eigvalsh(s).min() >= -1e-10


class TestExactMeasurements:
    def test_matches_definition(self, gen, toeplitz16):
        ens = draw_projections(SensingConfig(l=16, m=5, p=3), seed=4)
        meas = exact_measurements(toeplitz16, ens, sigma_n=0.2)
        for i in range(3):
            p_i = ens.matrices[i]
            expected = p_i.T @ toeplitz16 @ p_i + 0.04 * np.eye(5)
            assert np.allclose(meas.s_tilde[i], expected, atol=1e-12)


class TestEnsemblePersistence:
    def test_roundtrip(self, tmp_path):
        ens = draw_projections(SensingConfig(l=8, m=3, p=5), seed=12)
        path = tmp_path / "proj.cgdm"
        save_ensemble(path, ens)
        back = load_ensemble(path)
        assert np.array_equal(back.matrices, ens.matrices)

    def test_tensor_names(self, tmp_path):
        from covdiff.container import load_tensors

        ens = draw_projections(SensingConfig(l=8, m=3, p=3), seed=12)
        path = tmp_path / "proj.cgdm"
        save_ensemble(path, ens)
        assert list(load_tensors(path).keys()) == ["P/0", "P/1", "P/2"]
