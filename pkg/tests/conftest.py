"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from covdiff.datamodel import CovarianceSpec, synth_covariance


def random_symmetric(gen, l, scale=1.0):
    a = gen.standard_normal((l, l)) * scale
    return 0.5 * (a + a.T)


def random_pd(gen, l):
    a = gen.standard_normal((l, l))
    return a @ a.T / l + np.eye(l)


def random_orthonormal(gen, l, r):
    q, _ = np.linalg.qr(gen.standard_normal((l, r)))
    return q


@pytest.fixture
def gen():
    return np.random.default_rng(20240517)


@pytest.fixture(scope="session")
def toeplitz32():
    return synth_covariance(CovarianceSpec(kind="toeplitz", l=32, rho=0.9))


@pytest.fixture(scope="session")
def toeplitz16():
    return synth_covariance(CovarianceSpec(kind="toeplitz", l=16, rho=0.9))
