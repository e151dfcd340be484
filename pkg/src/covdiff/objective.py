"""Multi-partition least-squares objective, its gradient, and gradient errors.

Objective over a covariance candidate ``S``:

    f(S) = sum_i || S~_i - P_i.T S P_i ||_F^2 + tau * psi(S)

The clean reference gradient is the single-partition (p = 1) gradient formed
from all ``n`` samples through one fresh projection; the gradient error of a
``p``-partition gradient is the raw difference against that reference at the
same iterate.
"""

import hashlib
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError, ValidationError
from .linalg import symmetrize
from .sensing import MeasurementSet, compressed_sample_cov, measure_partition

PSI_KINDS = ("none", "frobenius_ridge")


@dataclass(frozen=True)
class ObjectiveConfig:
    tau: float = 0.0
    psi: str = "none"

    def __post_init__(self):
        if self.tau < 0:
            raise ValidationError(f"regularization weight must be >= 0, got {self.tau}")
        if self.psi not in PSI_KINDS:
            raise ValidationError(f"unknown regularizer {self.psi!r}")


@dataclass(frozen=True)
class GradientSample:
    """A gradient evaluation, optionally carrying its clean/error split.

    ``sigma_token`` identifies the iterate the gradient was evaluated at;
    operations combining two samples require matching tokens.
    """

    grad: np.ndarray
    partition_count: int
    sigma_token: str
    clean_ref: Optional[np.ndarray] = None
    error_ref: Optional[np.ndarray] = None


def sigma_token(sigma):
    """Provenance token for an iterate: SHA-256 over shape and raw bytes."""
    sigma = np.ascontiguousarray(sigma, dtype=np.float64)
    h = hashlib.sha256()
    h.update(repr(sigma.shape).encode())
    h.update(sigma.tobytes())
    return h.hexdigest()


def _check_problem(sigma, meas, proj):
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DimensionError(f"iterate must be square, got {sigma.shape}")
    if proj.l != sigma.shape[0]:
        raise DimensionError(
            f"iterate is {sigma.shape[0]}-dimensional, projections expect {proj.l}"
        )
    if meas.p != proj.p:
        raise DimensionError(
            f"{meas.p} measurements vs {proj.p} projections"
        )
    if meas.m != proj.m:
        raise DimensionError(
            f"measurements are {meas.m}x{meas.m}, projections produce {proj.m}"
        )
    return sigma


def _residuals(sigma, meas, proj):
    # R_i = S~_i - P_i.T S P_i, batched over partitions.
    pts = np.einsum("pim,ij,pjn->pmn", proj.matrices, sigma, proj.matrices)
    return meas.s_tilde - pts


def objective_value(sigma, meas, proj, cfg):
    """Evaluate the partitioned objective at ``sigma``."""
    sigma = _check_problem(sigma, meas, proj)
    res = _residuals(sigma, meas, proj)
    value = float(np.sum(res * res))
    if cfg.psi == "frobenius_ridge" and cfg.tau > 0:
        value += cfg.tau * float(np.sum(sigma * sigma))
    return value


def gradient(sigma, meas, proj, cfg):
    """Analytic gradient of :func:`objective_value`, symmetrized."""
    sigma = _check_problem(sigma, meas, proj)
    res = _residuals(sigma, meas, proj)
    g = -2.0 * np.einsum("pim,pmn,pjn->ij", proj.matrices, res, proj.matrices)
    if cfg.psi == "frobenius_ridge" and cfg.tau > 0:
        g = g + cfg.tau * 2.0 * sigma
    return GradientSample(
        grad=symmetrize(g),
        partition_count=proj.p,
        sigma_token=sigma_token(sigma),
    )


def clean_gradient(sigma, full_data, single_proj, cfg, sigma_n=0.0, seed=0):
    """Single-partition reference gradient using all ``n`` samples.

    ``single_proj`` must hold exactly one projection; the compressed sample
    covariance is formed from the full data set so the reference is as close
    to noise-free as the sample budget allows.
    """
    if single_proj.p != 1:
        raise ContractError(
            f"clean gradient requires a single projection, got {single_proj.p}"
        )
    y = measure_partition(full_data, single_proj.matrices[0], sigma_n, seed)
    meas = MeasurementSet(s_tilde=compressed_sample_cov(y)[None, :, :], b=y.shape[1])
    sample = gradient(sigma, meas, single_proj, cfg)
    return replace(sample, partition_count=1)


def expected_clean_gradient(s_data, sigma_iter, m, sigma_n, cfg):
    """Clean reference gradient with the projection randomness integrated out.

    For a projection with i.i.d. N(0, 1/m) entries, the expectation of the
    single-projection clean gradient is

        -2 [ (1 + 1/m) (S - Sigma) + tr(S - Sigma)/m I + sigma_n^2 I ]

    plus the regularizer term, with ``S`` the full-data sample covariance.
    Used as the denoiser's regression target: it is the same field as the
    single-projection reference in expectation, without the per-draw
    projection noise.
    """
    s_data = np.asarray(s_data, dtype=float)
    l = s_data.shape[0]
    delta = s_data - np.asarray(sigma_iter, dtype=float)
    g = -2.0 * (
        (1.0 + 1.0 / m) * delta
        + (np.trace(delta) / m + sigma_n**2) * np.eye(l)
    )
    if cfg.psi == "frobenius_ridge" and cfg.tau > 0:
        g = g + cfg.tau * 2.0 * np.asarray(sigma_iter, dtype=float)
    return symmetrize(g)


def gradient_error(grad_p, grad_clean):
    """Measured gradient error: ``grad_p.grad - grad_clean.grad``.

    Both samples must have been evaluated at the same iterate (matching
    provenance tokens).
    """
    if grad_p.sigma_token != grad_clean.sigma_token:
        raise ContractError("gradient samples were evaluated at different iterates")
    if grad_p.grad.shape != grad_clean.grad.shape:
        raise DimensionError(
            f"gradient shapes differ: {grad_p.grad.shape} vs {grad_clean.grad.shape}"
        )
    return symmetrize(grad_p.grad - grad_clean.grad)


def with_error_refs(grad_p, grad_clean):
    """Attach clean/error references to ``grad_p`` (``grad = clean + error``)."""
    err = gradient_error(grad_p, grad_clean)
    return replace(grad_p, clean_ref=grad_clean.grad.copy(), error_ref=err)


def error_terms_analytic(data_blocks, sigma_hat, ensemble):
    """Diagnostic per-partition error terms ``-P_i P_i.T R_i P_i P_i.T``.

    ``R_i`` is taken as the deviation of the partition sample covariance from
    ``sigma_hat`` (ambient space).  This mirrors the structured error
    decomposition; training and calibration use the operational difference
    instead.
    """
    terms = []
    for i in range(ensemble.p):
        x_i = data_blocks[i]
        s_i = (x_i @ x_i.T) / x_i.shape[1]
        r_i = s_i - sigma_hat
        pp = ensemble.matrices[i] @ ensemble.matrices[i].T
        terms.append(-pp @ r_i @ pp)
    return np.stack(terms)
