"""Variance schedules, the forward noising chain over gradients, schedule
calibration against measured partition noise, and the reverse sampler.

Steps are 1-based: step ``k`` uses ``beta[k-1]``.  Step 0 is the clean state.
A schedule also carries the map from step to partition count and the
normalization constant ``scale_c`` (robust Frobenius scale of clean
gradients) that maps raw gradients to chain units.
"""

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import rng as rngmod
from .errors import CalibrationError, FormatError, ValidationError
from .linalg import symmetrize

CALIBRATION_MATCH_RTOL = 0.05


@dataclass(frozen=True)
class DiffusionSchedule:
    """Frozen variance schedule with derived quantities.

    ``sigma`` defaults to ``sqrt(beta)`` (fixed reverse-transition scale);
    samplers honor whatever ``sigma`` the schedule carries, so a zeroed copy
    (see :func:`with_sigma`) gives the deterministic chain.
    """

    beta: np.ndarray
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    partition_of_step: np.ndarray
    scale_c: float = 1.0

    @property
    def t(self):
        return self.beta.shape[0]

    def beta_at(self, k):
        self._check_step(k)
        return float(self.beta[k - 1])

    def alpha_at(self, k):
        self._check_step(k)
        return float(self.alpha[k - 1])

    def alpha_bar_at(self, k):
        if k == 0:
            return 1.0
        self._check_step(k)
        return float(self.alpha_bar[k - 1])

    def sigma_at(self, k):
        self._check_step(k)
        return float(self.sigma[k - 1])

    def partition_at(self, k):
        self._check_step(k)
        return int(self.partition_of_step[k - 1])

    def step_for_partition(self, p):
        """Largest step whose partition count equals ``p``."""
        hits = np.nonzero(self.partition_of_step == int(p))[0]
        if hits.size == 0:
            raise ValidationError(f"schedule has no step for partition count {p}")
        return int(hits[-1] + 1)

    def _check_step(self, k):
        if not 1 <= k <= self.t:
            raise ValidationError(f"step {k} outside 1..{self.t}")


def _finalize(beta, partition_of_step, scale_c, sigma=None):
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 1 or beta.size < 1:
        raise ValidationError("beta must be a non-empty vector")
    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ValidationError("every beta must lie strictly inside (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if np.any(np.diff(alpha_bar) >= 0):
        raise ValidationError("alpha_bar must be strictly decreasing")
    pos = np.asarray(partition_of_step, dtype=int)
    if pos.shape != beta.shape:
        raise ValidationError("partition_of_step must have one entry per step")
    if np.any(np.diff(pos) < 0):
        raise ValidationError("partition_of_step must be nondecreasing")
    if np.any(pos < 1):
        raise ValidationError("partition counts must be >= 1")
    if sigma is None:
        sigma = np.sqrt(beta)
    if not scale_c > 0:
        raise ValidationError(f"scale_c must be positive, got {scale_c}")
    return DiffusionSchedule(
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma=np.asarray(sigma, dtype=float),
        partition_of_step=pos,
        scale_c=float(scale_c),
    )


def default_partition_grid(t, p_max, p_min=2):
    """Geometric step-to-partition map from ``p_min`` to ``p_max`` (inclusive)."""
    if p_max < p_min:
        raise ValidationError(f"p_max={p_max} below p_min={p_min}")
    if t == 1:
        return np.array([p_max], dtype=int)
    grid = np.rint(np.geomspace(p_min, p_max, t)).astype(int)
    grid = np.maximum.accumulate(grid)
    grid[-1] = p_max
    return grid


def build_schedule(t, beta_start=1e-4, beta_end=0.02, p_max=1024, scale_c=1.0):
    """Linear beta schedule with derived alpha bookkeeping."""
    if t < 1:
        raise ValidationError(f"step count must be >= 1, got {t}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    beta = np.linspace(beta_start, beta_end, t)
    return _finalize(beta, default_partition_grid(t, p_max), scale_c)


def with_sigma(schedule, scale):
    """Copy of ``schedule`` with reverse-transition noise scaled by ``scale``."""
    if scale < 0:
        raise ValidationError(f"sigma scale must be >= 0, got {scale}")
    return replace(schedule, sigma=schedule.sigma * float(scale))


@dataclass(frozen=True)
class ErrorStats:
    """Measured per-partition-level gradient-noise scales.

    ``stds[j]`` is the per-partition-level entrywise noise scale at
    ``p = partitions[j]`` (see ``pipeline.measure_error_stats``); it grows
    like ``sqrt(p)`` under sample splitting.  ``clean_scale`` is the robust
    Frobenius scale of the clean gradients
    (``median|entry| * 1.4826 * l``).
    """

    partitions: np.ndarray
    stds: np.ndarray
    clean_scale: float


def calibrate_schedule(stats, t=None):
    """Choose ``beta`` so the chain noise ratio matches measured stats.

    At every step ``sqrt((1 - abar_k) / abar_k) * clean_scale`` equals the
    measured std at ``p_k`` (within 5%; exact except for tie nudges).
    """
    p_levels = np.asarray(stats.partitions, dtype=int)
    stds = np.asarray(stats.stds, dtype=float)
    if p_levels.ndim != 1 or p_levels.size < 1 or stds.shape != p_levels.shape:
        raise CalibrationError("stats must pair one std with each partition level")
    if t is None:
        t = p_levels.size
    if t != p_levels.size:
        raise CalibrationError(
            f"schedule length {t} does not match {p_levels.size} measured levels"
        )
    if np.any(np.diff(p_levels) <= 0):
        raise CalibrationError("partition levels must be strictly increasing")
    if np.any(stds <= 0):
        raise CalibrationError("measured stds must be positive")
    if np.any(np.diff(stds) < 0):
        raise CalibrationError(
            "measured stds are not nondecreasing in the partition count: "
            + np.array2string(stds, precision=4)
        )
    c = float(stats.clean_scale)
    if not c > 0:
        raise CalibrationError(f"clean scale must be positive, got {c}")
    ratio_sq = (stds / c) ** 2
    alpha_bar = 1.0 / (1.0 + ratio_sq)
    # Ties in the stds would stall alpha_bar; nudge within the 5% match band.
    for k in range(1, t):
        if alpha_bar[k] >= alpha_bar[k - 1]:
            alpha_bar[k] = alpha_bar[k - 1] * (1.0 - 1e-9)
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    beta = 1.0 - alpha_bar / prev
    schedule = _finalize(beta, p_levels, c)
    achieved = np.sqrt((1.0 - schedule.alpha_bar) / schedule.alpha_bar) * c
    rel = np.abs(achieved - stds) / stds
    if np.any(rel > CALIBRATION_MATCH_RTOL):
        raise CalibrationError(
            f"calibration mismatch up to {float(rel.max()):.3%} exceeds 5%"
        )
    return schedule


def chain_scale(grad_raw, p):
    """Per-instance normalization constant for the chain.

    Dividing a raw ``p``-partition gradient by ``p * chain_scale`` maps it to
    the unit-Frobenius direction, so the same network serves every gradient
    magnitude along the descent path; the schedule's global ``scale_c``
    remains the unit in which noise levels were calibrated.
    """
    g = np.asarray(grad_raw, dtype=float)
    return max(float(np.sqrt(np.sum(g * g))) / p, 1e-300)


@dataclass(frozen=True)
class NoisyGradient:
    """A gradient in chain units.

    ``value * scale`` recovers raw-gradient units for the clean component;
    ``step`` locates the state on the chain (0 = clean).
    """

    value: np.ndarray
    step: int
    scale: float = 1.0

    def __post_init__(self):
        if self.step < 0:
            raise ValidationError(f"step must be >= 0, got {self.step}")
        if not self.scale > 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")


def symmetric_unit_noise(gen, l):
    """Symmetric Gaussian matrix with unit variance for every entry.

    Off-diagonal pairs are ``(g_ij + g_ji) / sqrt(2)``; the diagonal keeps
    its own independent N(0, 1) draws.
    """
    g = gen.standard_normal((l, l))
    s = (g + g.T) / np.sqrt(2.0)
    np.fill_diagonal(s, np.diagonal(g))
    return s


def forward_step(x_prev, k, schedule, seed):
    """One forward transition: ``sqrt(1-beta_k) x_{k-1} + sqrt(beta_k) eps``."""
    if x_prev.step != k - 1:
        raise ValidationError(
            f"forward step {k} requires state at step {k - 1}, got {x_prev.step}"
        )
    beta_k = schedule.beta_at(k)
    gen = rngmod.stream(seed, rngmod.FORWARD_NOISE, k)
    eps = symmetric_unit_noise(gen, x_prev.value.shape[0])
    value = np.sqrt(1.0 - beta_k) * x_prev.value + np.sqrt(beta_k) * eps
    return NoisyGradient(value=value, step=k, scale=x_prev.scale / np.sqrt(1.0 - beta_k))


def forward_marginal(x0, k, schedule, seed, return_eps=False):
    """Closed-form marginal: ``sqrt(abar_k) x0 + sqrt(1-abar_k) eps``."""
    if x0.step != 0:
        raise ValidationError(f"marginal starts from step 0, got {x0.step}")
    abar = schedule.alpha_bar_at(k)
    gen = rngmod.stream(seed, rngmod.FORWARD_NOISE, k)
    eps = symmetric_unit_noise(gen, x0.value.shape[0])
    value = np.sqrt(abar) * x0.value + np.sqrt(1.0 - abar) * eps
    out = NoisyGradient(value=value, step=k, scale=x0.scale / np.sqrt(abar))
    if return_eps:
        return out, eps
    return out


def reverse_sample(x_start, schedule, eps_model: Callable, seed):
    """Run the reverse chain from ``x_start.step`` down to step 0.

    Each step applies

        x_{k-1} = (x_k - ((1 - a_k) / sqrt(1 - abar_k)) eps(x_k, k)) / sqrt(a_k)
                  + sigma_k z,   z = 0 at k = 1,

    symmetrizes the state, and keeps the running raw-unit scale consistent.
    """
    start = x_start.step
    if not 1 <= start <= schedule.t:
        raise ValidationError(f"reverse chain must start at a step in 1..{schedule.t}")
    x = symmetrize(x_start.value)
    scale = x_start.scale
    l = x.shape[0]
    for k in range(start, 0, -1):
        a_k = schedule.alpha_at(k)
        abar_k = schedule.alpha_bar_at(k)
        eps = np.asarray(eps_model(x, k), dtype=float)
        if eps.shape != x.shape:
            raise ValidationError(
                f"noise model returned shape {eps.shape}, expected {x.shape}"
            )
        x = (x - ((1.0 - a_k) / math.sqrt(1.0 - abar_k)) * eps) / math.sqrt(a_k)
        if k > 1:
            sig = schedule.sigma_at(k)
            if sig > 0:
                gen = rngmod.stream(seed, rngmod.REVERSE_NOISE, k)
                x = x + sig * symmetric_unit_noise(gen, l)
        x = symmetrize(x)
        scale = scale * math.sqrt(a_k)
    return NoisyGradient(value=x, step=0, scale=scale)


def schedule_to_json(schedule):
    doc = {
        "T": schedule.t,
        "beta": [float(b) for b in schedule.beta],
        "scale_c": float(schedule.scale_c),
        "partition_of_step": [int(p) for p in schedule.partition_of_step],
    }
    return json.dumps(doc, separators=(",", ":")) + "\n"


def save_schedule(path, schedule):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(schedule_to_json(schedule))


def load_schedule(path):
    """Load a schedule JSON, recomputing and validating alpha bookkeeping."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    for key in ("T", "beta", "scale_c", "partition_of_step"):
        if not isinstance(doc, dict) or key not in doc:
            raise FormatError(f"{path}: missing field {key!r}")
    beta = np.asarray(doc["beta"], dtype=float)
    if beta.size != int(doc["T"]):
        raise FormatError(f"{path}: T={doc['T']} but beta has {beta.size} entries")
    try:
        return _finalize(beta, doc["partition_of_step"], float(doc["scale_c"]))
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc
