"""Per-partition random projections and noisy compressed measurements.

A projection ensemble is stored as a single ``(p, l, m)`` array so that
measurement and gradient sums over partitions reduce to batched einsums.
"""

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .container import load_tensors, save_tensors
from .errors import DimensionError, NumericalError, ValidationError
from .linalg import symmetrize

RANK_TOL = 1e-8
MAX_REDRAWS = 10


@dataclass(frozen=True)
class SensingConfig:
    """Geometry and noise level of the sensing stage."""

    l: int
    m: int
    p: int
    sigma_n: float = 0.0

    def __post_init__(self):
        if self.m < 1:
            raise ValidationError(f"compressed dimension must be >= 1, got {self.m}")
        if self.m >= self.l:
            raise ValidationError(f"need m < l, got m={self.m}, l={self.l}")
        if self.p < 1:
            raise ValidationError(f"partition count must be >= 1, got {self.p}")
        if self.sigma_n < 0:
            raise ValidationError(f"sensing noise std must be >= 0, got {self.sigma_n}")


@dataclass(frozen=True)
class ProjectionEnsemble:
    """``matrices[i]`` is the ``l x m`` projection used for partition ``i``."""

    matrices: np.ndarray

    @property
    def p(self):
        return self.matrices.shape[0]

    @property
    def l(self):
        return self.matrices.shape[1]

    @property
    def m(self):
        return self.matrices.shape[2]


@dataclass(frozen=True)
class MeasurementSet:
    """Per-partition compressed sample covariances, ``s_tilde[i]`` is m x m."""

    s_tilde: np.ndarray
    b: int

    @property
    def p(self):
        return self.s_tilde.shape[0]

    @property
    def m(self):
        return self.s_tilde.shape[1]


def draw_projections(cfg, seed):
    """Draw ``p`` independent ``l x m`` matrices with i.i.d. N(0, 1/m) entries.

    Entry variance ``1/m`` keeps ``E[P.T @ S @ P]`` on the trace scale of
    ``S``.  Full column rank is enforced by redrawing (Gaussian matrices are
    rank-deficient only with probability ~0).
    """
    scale = 1.0 / np.sqrt(cfg.m)
    gens = [rngmod.stream(seed, rngmod.PROJECTIONS, i) for i in range(cfg.p)]
    mats = np.stack([g.standard_normal((cfg.l, cfg.m)) * scale for g in gens])
    smin = np.linalg.svd(mats, compute_uv=False)[:, -1]
    for i in np.nonzero(smin <= RANK_TOL)[0]:  # practically unreachable
        for attempt in range(MAX_REDRAWS):
            cand = gens[i].standard_normal((cfg.l, cfg.m)) * scale
            if np.linalg.svd(cand, compute_uv=False)[-1] > RANK_TOL:
                mats[i] = cand
                break
        else:
            raise NumericalError(
                f"projection {i} rank-deficient after {MAX_REDRAWS} redraws"
            )
    return ProjectionEnsemble(matrices=mats)


def single_projection(l, m, seed):
    """One fresh ``l x m`` projection (clean-reference stream)."""
    gen = rngmod.stream(seed, rngmod.CLEAN_PROJECTION)
    for attempt in range(MAX_REDRAWS):
        cand = gen.standard_normal((l, m)) / np.sqrt(m)
        if np.linalg.svd(cand, compute_uv=False)[-1] > RANK_TOL:
            return ProjectionEnsemble(matrices=cand[None, :, :].copy())
    raise NumericalError(f"single projection rank-deficient after {MAX_REDRAWS} redraws")


def measure_partition(x_block, p_i, sigma_n, seed, partition_index=0):
    """Compressed measurement ``Y = P.T @ X + N`` of one data block."""
    x_block = np.asarray(x_block, dtype=float)
    p_i = np.asarray(p_i, dtype=float)
    if x_block.shape[0] != p_i.shape[0]:
        raise DimensionError(
            f"data has {x_block.shape[0]} bands but projection expects {p_i.shape[0]}"
        )
    y = p_i.T @ x_block
    if sigma_n > 0:
        gen = rngmod.stream(seed, rngmod.PARTITION_NOISE, partition_index)
        y = y + sigma_n * gen.standard_normal(y.shape)
    return y


def compressed_sample_cov(y):
    """Per-partition compressed sample covariance ``(1/b) * Y @ Y.T``."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    b = y.shape[1]
    if b < 1:
        raise ValidationError("need at least one measurement column")
    return symmetrize((y @ y.T) / b)


def measure_dataset(x, plan, ensemble, sigma_n, seed):
    """Measure every partition of ``x`` and assemble the :class:`MeasurementSet`.

    Partition ``i`` uses projection ``i`` and the independent child noise
    stream ``(seed, PARTITION_NOISE, i)``, so results do not depend on
    evaluation order.
    """
    x = np.asarray(x, dtype=float)
    if ensemble.p != plan.p:
        raise DimensionError(
            f"plan has {plan.p} partitions but ensemble has {ensemble.p} projections"
        )
    if x.shape[0] != ensemble.l:
        raise DimensionError(
            f"data has {x.shape[0]} bands but projections expect {ensemble.l}"
        )
    blocks = np.stack([x[:, idx] for idx in plan.index_sets])  # (p, l, b)
    y = np.einsum("plm,plb->pmb", ensemble.matrices, blocks)
    if sigma_n > 0:
        for i in range(plan.p):
            gen = rngmod.stream(seed, rngmod.PARTITION_NOISE, i)
            y[i] += sigma_n * gen.standard_normal(y[i].shape)
    s = np.einsum("pmb,pnb->pmn", y, y) / plan.b
    s = 0.5 * (s + np.transpose(s, (0, 2, 1)))
    return MeasurementSet(s_tilde=s, b=plan.b)


def exact_measurements(sigma, ensemble, sigma_n=0.0):
    """Noise-free measurement set ``S_i = P_i.T @ sigma @ P_i + sigma_n^2 I``.

    This bypasses sampling entirely; used for identifiability oracles where
    the objective's minimizer must coincide with ``sigma``.
    """
    s = np.einsum(
        "pim,ij,pjn->pmn", ensemble.matrices, np.asarray(sigma, float), ensemble.matrices
    )
    if sigma_n > 0:
        s = s + (sigma_n**2) * np.eye(ensemble.m)[None, :, :]
    s = 0.5 * (s + np.transpose(s, (0, 2, 1)))
    return MeasurementSet(s_tilde=s, b=1)


def save_ensemble(path, ensemble):
    """Persist projections under tensor names ``P/0 .. P/{p-1}``."""
    save_tensors(path, {f"P/{i}": ensemble.matrices[i] for i in range(ensemble.p)})


def load_ensemble(path):
    tensors = load_tensors(path)
    indexed = sorted(
        (int(name.split("/", 1)[1]), arr)
        for name, arr in tensors.items()
        if name.startswith("P/")
    )
    if not indexed:
        raise ValidationError(f"{path} holds no projection tensors")
    return ProjectionEnsemble(matrices=np.stack([arr for _, arr in indexed]))
