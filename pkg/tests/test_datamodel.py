import json

import numpy as np
import pytest

from covdiff.datamodel import (
    CovarianceSpec,
    load_cube,
    make_partitions,
    read_cube_raw,
    sample_gaussian_data,
    synth_covariance,
    write_cube,
)
from covdiff.errors import (
    DataError,
    DefinitenessError,
    DivisibilityError,
    FormatError,
    SizeError,
    ValidationError,
)
from covdiff.linalg import frobenius_norm


class TestSynthCovariance:
    def test_toeplitz_zero_is_identity(self):
        out = synth_covariance(CovarianceSpec(kind="toeplitz", l=4, rho=0.0))
        assert np.array_equal(out, np.eye(4))

    def test_toeplitz_half(self):
        out = synth_covariance(CovarianceSpec(kind="toeplitz", l=2, rho=0.5))
        assert np.array_equal(out, np.array([[1.0, 0.5], [0.5, 1.0]]))

    def test_lowrank_min_eigenvalue_at_least_one(self):
        spec = CovarianceSpec(kind="lowrank_plus_identity", l=8, rank=2, scale=1.0)
        out = synth_covariance(spec, seed=4)
        # identity term forces every eigenvalue >= 1
        assert np.linalg.eigvalsh(out).min() >= 1.0 - 1e-10

    def test_invalid_rho(self):
        with pytest.raises(ValidationError):
            CovarianceSpec(kind="toeplitz", l=4, rho=1.0)

    def test_invalid_rank(self):
        with pytest.raises(ValidationError):
            CovarianceSpec(kind="lowrank_plus_identity", l=4, rank=9)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            CovarianceSpec(kind="wishart", l=4)


class TestSampleGaussianData:
    def test_large_sample_covariance_near_identity(self):
        n = 100_000
        x = sample_gaussian_data(np.eye(32), n, seed=9)
        s = x @ x.T / n
        rel = frobenius_norm(s - np.eye(32)) / frobenius_norm(np.eye(32))
        assert rel <= 0.05

    def test_single_sample_rank_one(self):
        x = sample_gaussian_data(np.eye(5), 1, seed=2)
        s = x @ x.T
        assert np.linalg.matrix_rank(s) == 1

    def test_deterministic(self, toeplitz16):
        a = sample_gaussian_data(toeplitz16, 64, seed=123)
        b = sample_gaussian_data(toeplitz16, 64, seed=123)
        assert np.array_equal(a, b)

    def test_non_pd_rejected(self):
        with pytest.raises(DefinitenessError):
            sample_gaussian_data(np.diag([1.0, 0.0]), 4, seed=0)

    def test_convergence_rate(self, toeplitz16):
        # empirical covariance error shrinks ~ 1/sqrt(n): quadrupling n
        # should roughly halve the error (within 3x statistical slop).
        errs = {n: [] for n in (10_000, 40_000)}
        for seed in range(20):
            for n in errs:
                x = sample_gaussian_data(toeplitz16, n, seed=500 + seed)
                s = x @ x.T / n
                errs[n].append(frobenius_norm(s - toeplitz16))
        e1 = np.mean(errs[10_000])
        e2 = np.mean(errs[40_000])
        assert e2 <= 0.5 * e1 * 3.0
        assert e2 < e1


class TestMakePartitions:
    def test_small_cover(self):
        plan = make_partitions(4, 2, seed=0)
        assert plan.b == 2
        merged = sorted(np.concatenate(plan.index_sets).tolist())
        assert merged == [0, 1, 2, 3]
        assert len(set(plan.index_sets[0]) & set(plan.index_sets[1])) == 0

    def test_single_block_is_permutation(self):
        plan = make_partitions(10, 1, seed=3)
        assert sorted(plan.index_sets[0].tolist()) == list(range(10))

    def test_paper_scale_geometry(self):
        plan = make_partitions(1024, 256, seed=1)
        assert plan.p == 256 and plan.b == 4
        assert all(len(block) == 4 for block in plan.index_sets)

    def test_divisibility_error(self):
        with pytest.raises(DivisibilityError):
            make_partitions(10, 3, seed=0)

    def test_size_error(self):
        with pytest.raises(SizeError):
            make_partitions(4, 8, seed=0)

    def test_uniformity_over_seeds(self):
        # index 0 should land in block 1 about half the time for n=8, p=2
        hits = np.zeros(8)
        trials = 10_000
        for seed in range(trials):
            plan = make_partitions(8, 2, seed=seed)
            hits[list(plan.index_sets[0])] += 1
        freq = hits / trials
        assert np.all(np.abs(freq - 0.5) <= 0.02)


class TestCubeFormat:
    def _cube(self, gen, l=3, r=4, c=5):
        return gen.standard_normal((l, r, c))

    def test_roundtrip_bit_identical(self, gen, tmp_path):
        cube = self._cube(gen)
        path = tmp_path / "c.hsc"
        write_cube(path, cube)
        assert np.array_equal(read_cube_raw(path), cube)

    def test_rewrite_byte_identical(self, gen, tmp_path):
        cube = self._cube(gen)
        p1, p2 = tmp_path / "a.hsc", tmp_path / "b.hsc"
        write_cube(p1, cube)
        write_cube(p2, read_cube_raw(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_centers_bands(self, gen, tmp_path):
        cube = self._cube(gen, l=6, r=8, c=8) + 5.0
        path = tmp_path / "c.hsc"
        write_cube(path, cube)
        x = load_cube(path)
        assert x.shape == (6, 64)
        assert np.all(np.abs(x.mean(axis=1)) <= 1e-10)

    def test_single_voxel(self, tmp_path):
        path = tmp_path / "c.hsc"
        write_cube(path, np.full((1, 1, 1), 5.0))
        x = load_cube(path)
        assert x.shape == (1, 1)
        assert x[0, 0] == 0.0

    def test_geometry_paper_scale_header(self, tmp_path):
        path = tmp_path / "c.hsc"
        write_cube(path, np.zeros((2, 4, 8)))
        header = json.loads(path.read_bytes().split(b"\n", 1)[0])
        assert header == {
            "magic": "HSCUBE", "version": 1, "bands": 2, "rows": 4,
            "cols": 8, "dtype": "f64", "order": "band-major",
        }

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "c.hsc"
        path.write_bytes(b'{"magic":"NOPE","version":1}\n')
        with pytest.raises(FormatError):
            read_cube_raw(path)

    def test_bad_version_rejected(self, gen, tmp_path):
        path = tmp_path / "c.hsc"
        write_cube(path, self._cube(gen))
        data = path.read_bytes().replace(b'"version":1', b'"version":9')
        path.write_bytes(data)
        with pytest.raises(FormatError):
            read_cube_raw(path)

    def test_truncated_payload_rejected(self, gen, tmp_path):
        path = tmp_path / "c.hsc"
        write_cube(path, self._cube(gen))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(FormatError):
            read_cube_raw(path)

    def test_non_finite_rejected(self, tmp_path):
        cube = np.zeros((2, 2, 2))
        cube[0, 0, 0] = np.nan
        path = tmp_path / "c.hsc"
        write_cube(path, cube)
        with pytest.raises(DataError):
            read_cube_raw(path)
