import numpy as np
import pytest

from covdiff.errors import DimensionError, ValidationError
from covdiff.evalreport import (
    EvalReport,
    MethodResult,
    aligned_eigenvector_count,
    emit_heatmap,
    mse,
    read_report_csv,
    run_comparison,
    write_report_csv,
)
from covdiff.linalg import sym_eigendecompose

from conftest import random_orthonormal, random_pd, random_symmetric


class TestMse:
    def test_equal_matrices(self, gen):
        a = random_pd(gen, 6)
        assert mse(a, a) == 0.0

    def test_identity_shift(self):
        a = np.array([[1.0, 0.2], [0.2, 2.0]])
        assert mse(a + np.eye(2), a) == pytest.approx(0.5)  # (1+0+0+1)/4

    def test_shifted_by_full_identity_l2(self):
        a = np.zeros((2, 2))
        assert mse(a + np.eye(2) * np.sqrt(2), a) == pytest.approx(1.0)

    def test_matches_double_loop_oracle(self, gen):
        a = random_symmetric(gen, 7)
        b = random_symmetric(gen, 7)
        acc = 0.0
        for i in range(7):
            for j in range(7):
                acc += (a[i, j] - b[i, j]) ** 2
        assert mse(a, b) == pytest.approx(acc / 49.0, rel=1e-12)

    def test_rotation_invariance(self, gen):
        a = random_symmetric(gen, 8)
        b = random_symmetric(gen, 8)
        for _ in range(10):
            q = random_orthonormal(gen, 8, 8)
            assert mse(q @ a @ q.T, q @ b @ q.T) == pytest.approx(
                mse(a, b), abs=1e-9
            )

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            mse(np.eye(3), np.eye(4))


class TestAlignedEigenvectors:
    def test_identical_matrices_count_all(self, gen, toeplitz16):
        assert aligned_eigenvector_count(toeplitz16, toeplitz16, 0.9) == 16

    def test_small_perturbation_keeps_alignment(self, toeplitz16):
        # Davis-Kahan style: a 1e-6 perturbation cannot rotate eigenvectors
        # of a matrix with well separated eigenvalues
        gen = np.random.default_rng(3)
        pert = random_symmetric(gen, 16) * 1e-6
        assert aligned_eigenvector_count(toeplitz16 + pert, toeplitz16, 0.9) == 16

    def test_prefix_rule(self, gen):
        # construct an estimate whose 3rd eigenvector is rotated away while
        # later ones agree: the count must stop at the first failure
        base = np.diag(np.arange(16, 0, -1).astype(float))
        spec = sym_eigendecompose(base)
        v = spec.eigenvectors.copy()
        theta = np.deg2rad(60.0)
        c, s = np.cos(theta), np.sin(theta)
        v2 = v.copy()
        v2[:, 2], v2[:, 3] = c * v[:, 2] + s * v[:, 3], -s * v[:, 2] + c * v[:, 3]
        rotated = (v2 * spec.eigenvalues) @ v2.T
        assert aligned_eigenvector_count(rotated, base, 0.9) == 2

    def test_monotone_in_threshold(self, gen, toeplitz16):
        pert = random_symmetric(gen, 16) * 0.35
        est = toeplitz16 + pert
        counts = [
            aligned_eigenvector_count(est, toeplitz16, t)
            for t in (0.5, 0.7, 0.9, 0.99)
        ]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_threshold_validation(self, toeplitz16):
        with pytest.raises(ValidationError):
            aligned_eigenvector_count(toeplitz16, toeplitz16, 1.5)


class TestReportCsv:
    def _report(self):
        rep = EvalReport()
        rep.rows.append(MethodResult("identity", 0, 0.5, 0.3, 2, 100, 12.5))
        rep.rows.append(MethodResult("diffusion", 0, 0.25, 0.2, 4, 50, 30.25))
        rep.rows.append(MethodResult("identity", 1, 0.4, 0.28, 3, 90, 11.0))
        rep.rows.append(MethodResult("diffusion", 1, 0.1, 0.1, 5, 40, 29.0))
        return rep

    def test_roundtrip_byte_exact(self, tmp_path):
        rep = self._report()
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_report_csv(p1, rep)
        write_report_csv(p2, read_report_csv(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_schema(self, tmp_path):
        path = tmp_path / "r.csv"
        write_report_csv(path, self._report())
        first = path.read_text().split("\n", 1)[0]
        assert first == "method,seed,mse,rel_fro,aligned_eigs,iters,millis"

    def test_median_ratio_paired(self):
        rep = self._report()
        # per-seed ratios: 0.5 and 0.25 -> median 0.375
        assert rep.median_mse_ratio("diffusion", "identity") == pytest.approx(0.375)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("method,seed,mse\nidentity,0,1.0\n")
        with pytest.raises(ValidationError):
            read_report_csv(path)


class TestHeatmap:
    def test_zero_matrix_single_color(self, tmp_path):
        path = tmp_path / "h.svg"
        emit_heatmap(np.zeros((4, 4)), path)
        text = path.read_text()
        fills = {line.split('fill="')[1].split('"')[0]
                 for line in text.splitlines() if "fill=" in line}
        assert len(fills) == 1

    def test_identical_calls_byte_identical(self, gen, tmp_path):
        a = random_symmetric(gen, 6)
        p1, p2 = tmp_path / "a.svg", tmp_path / "b.svg"
        emit_heatmap(a, p1, scale=(-1.0, 1.0))
        emit_heatmap(a, p2, scale=(-1.0, 1.0))
        assert p1.read_bytes() == p2.read_bytes()

    def test_comparison_set_shares_annotated_scale(self, gen, tmp_path):
        mats = [random_pd(gen, 5) for _ in range(3)]
        hi = max(float(np.max(m)) for m in mats)
        paths = []
        for i, m in enumerate(mats):
            p = tmp_path / f"{i}.svg"
            emit_heatmap(m, p, scale=(0.0, hi))
            paths.append(p)
        scales = set()
        for p in paths:
            line = [ln for ln in p.read_text().splitlines() if "scale [" in ln][0]
            scales.add(line)
        assert len(scales) == 1

    def test_non_finite_rejected(self, tmp_path):
        bad = np.full((3, 3), np.nan)
        with pytest.raises(ValidationError):
            emit_heatmap(bad, tmp_path / "x.svg")


class TestRunComparison:
    def test_paired_duplicate_methods_identical(self, gen, toeplitz16):
        from covdiff.datamodel import make_partitions, sample_gaussian_data
        from covdiff.objective import ObjectiveConfig
        from covdiff.optimizer import SolverConfig, backprojection_init
        from covdiff.sensing import SensingConfig, draw_projections, measure_dataset

        def build(seed):
            x = sample_gaussian_data(toeplitz16, 64, seed=seed)
            plan = make_partitions(64, 4, seed)
            ens = draw_projections(SensingConfig(l=16, m=6, p=4, sigma_n=0.01), seed)
            meas = measure_dataset(x, plan, ens, 0.01, seed)
            return meas, ens, ObjectiveConfig(), backprojection_init(meas, ens)

        solver = SolverConfig(max_iters=15)
        rep = run_comparison(
            build,
            ["identity", "identity_dup"],
            lambda m: solver,
            toeplitz16,
            seeds=[0, 1],
        )
        a = rep.metric("identity", "mse")
        b = rep.metric("identity_dup", "mse")
        assert np.array_equal(a, b)

    def test_missing_solver_skips_with_note(self, gen, toeplitz16):
        from covdiff.datamodel import make_partitions, sample_gaussian_data
        from covdiff.objective import ObjectiveConfig
        from covdiff.optimizer import SolverConfig, backprojection_init
        from covdiff.sensing import SensingConfig, draw_projections, measure_dataset

        def build(seed):
            x = sample_gaussian_data(toeplitz16, 64, seed=seed)
            plan = make_partitions(64, 4, seed)
            ens = draw_projections(SensingConfig(l=16, m=6, p=4, sigma_n=0.01), seed)
            meas = measure_dataset(x, plan, ens, 0.01, seed)
            return meas, ens, ObjectiveConfig(), backprojection_init(meas, ens)

        rep = run_comparison(
            build,
            ["identity", "diffusion"],
            lambda m: SolverConfig(max_iters=5) if m == "identity" else None,
            toeplitz16,
            seeds=[0],
        )
        assert rep.methods() == ["identity"]
        assert any("diffusion" in note for note in rep.notes)
