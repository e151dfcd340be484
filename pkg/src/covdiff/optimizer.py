"""Projected gradient descent over the PSD cone with gradient preconditioning.

The preconditioner is one of:

  - ``identity``: raw gradient;
  - ``gaussian``: 2-D Gaussian blur of the gradient matrix;
  - ``diffusion``: chain-normalize the gradient, run the learned reverse
    chain, de-normalize.

Step sizes come from Armijo backtracking measured against the norm of the
direction actually taken; every accepted iterate is PSD-projected.  The
solver returns the best-so-far iterate by objective value, which protects
end quality when a denoised direction is not a descent direction.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .denoiser import gaussian_filter_precondition, make_eps_model
from .diffusion import NoisyGradient, chain_scale, reverse_sample, with_sigma
from .errors import ConfigurationError, NumericalError, ValidationError
from .linalg import frobenius_norm, project_psd, symmetrize
from .objective import gradient, objective_value

PRECONDITIONER_KINDS = ("identity", "gaussian", "diffusion")


@dataclass(frozen=True)
class PreconditionerConfig:
    """Which preconditioner to run and its knobs.

    ``sigma_scale`` multiplies the schedule's reverse-transition noise when
    denoising inside the solver; the default 0 gives the deterministic chain,
    which is the right point estimate for preconditioning (the stochastic
    chain is still available for sampling studies).  ``start_step`` overrides
    the chain entry step (default: the step mapped to the run's partition
    count).
    """

    kind: str = "identity"
    kernel_sigma: float = 1.0
    schedule: Optional[object] = None
    params: Optional[dict] = None
    eps_model: Optional[object] = None  # callable override, e.g. test oracles
    start_step: Optional[int] = None
    sigma_scale: float = 0.0

    def __post_init__(self):
        if self.kind not in PRECONDITIONER_KINDS:
            raise ValidationError(f"unknown preconditioner {self.kind!r}")
        if self.kind == "gaussian" and self.kernel_sigma <= 0:
            raise ValidationError("gaussian preconditioner needs kernel_sigma > 0")


@dataclass(frozen=True)
class ArmijoConfig:
    c: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 30

    def __post_init__(self):
        if not 0 < self.c < 1:
            raise ValidationError(f"armijo c must be in (0, 1), got {self.c}")
        if not 0 < self.shrink < 1:
            raise ValidationError(f"shrink must be in (0, 1), got {self.shrink}")
        if self.max_backtracks < 1:
            raise ValidationError("need at least one backtrack")


@dataclass(frozen=True)
class SolverConfig:
    lambda0: Optional[float] = None  # None: Lipschitz-motivated auto value
    armijo: ArmijoConfig = ArmijoConfig()
    max_iters: int = 500
    tol_grad: Optional[float] = None  # None: 1e-6 * l
    tol_obj: float = 1e-8
    stall_limit: int = 5
    preconditioner: PreconditionerConfig = PreconditionerConfig()

    def __post_init__(self):
        if self.lambda0 is not None and self.lambda0 <= 0:
            raise ValidationError("initial step size must be positive")
        if self.max_iters < 1 or self.stall_limit < 1:
            raise ValidationError("iteration limits must be positive")
        if self.tol_obj < 0 or (self.tol_grad is not None and self.tol_grad < 0):
            raise ValidationError("tolerances must be nonnegative")


@dataclass
class SolveTrace:
    """Per-iteration records of a solve plus the final/best iterates."""

    rows: list = field(default_factory=list)
    sigma_final: Optional[np.ndarray] = None
    sigma_best: Optional[np.ndarray] = None
    objective_best: float = math.inf
    stopped_by: str = ""
    iterates: Optional[list] = None

    def column(self, name):
        return np.array([r[name] for r in self.rows])


TRACE_COLUMNS = ("iter", "objective", "grad_norm", "precond_grad_norm", "lambda", "millis")


def save_trace_csv(path, trace):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for r in trace.rows:
            fh.write(
                f"{r['iter']},{repr(r['objective'])},{repr(r['grad_norm'])},"
                f"{repr(r['precond_grad_norm'])},{repr(r['lambda'])},"
                f"{repr(r['millis'])}\n"
            )


def precondition(g, precond, p_run, seed=0, iteration=0):
    """Apply the configured preconditioner to a gradient sample."""
    grad = g.grad
    if precond.kind == "identity":
        return grad.copy()
    if precond.kind == "gaussian":
        return gaussian_filter_precondition(grad, precond.kernel_sigma)
    # diffusion
    schedule = precond.schedule
    if schedule is None or (precond.params is None and precond.eps_model is None):
        raise ConfigurationError(
            "diffusion preconditioning requires a schedule and trained weights"
        )
    if precond.start_step is not None:
        start = precond.start_step
        if not 1 <= start <= schedule.t:
            raise ConfigurationError(f"start step {start} outside 1..{schedule.t}")
    else:
        start = schedule.step_for_partition(p_run)
    chain = (
        schedule
        if precond.sigma_scale == 1.0
        else with_sigma(schedule, precond.sigma_scale)
    )
    c = chain_scale(grad, p_run)
    abar = schedule.alpha_bar_at(start)
    x_start = NoisyGradient(
        value=math.sqrt(abar) * grad / (p_run * c),
        step=start,
        scale=p_run * c / math.sqrt(abar),
    )
    model = precond.eps_model or make_eps_model(precond.params, schedule)
    x0 = reverse_sample(x_start, chain, model, seed=(seed + iteration))
    return symmetrize(x0.value * (p_run * c))


def armijo_step(sigma, direction, f, lambda0, armijo):
    """Backtracking line search with PSD projection at every trial point.

    Returns ``(lambda, sigma_next, stalled)``; a stall leaves the iterate
    unchanged with ``lambda == 0``.
    """
    dir_norm_sq = float(np.sum(direction * direction))
    if dir_norm_sq == 0.0:
        return 0.0, sigma, True
    f0 = f(sigma)
    lam = lambda0
    for _ in range(armijo.max_backtracks + 1):
        cand = project_psd(sigma - lam * direction)
        if f(cand) <= f0 - armijo.c * lam * dir_norm_sq:
            return lam, cand, False
        lam *= armijo.shrink
    return 0.0, sigma, True


def default_lambda0(proj):
    """Lipschitz-motivated initial step: ``1 / (2 sum_i ||P_i||_2^4)``."""
    spectral = np.linalg.svd(proj.matrices, compute_uv=False)[:, 0]
    return 1.0 / (2.0 * float(np.sum(spectral**4)))


def backprojection_init(meas, proj):
    """Data-driven start ``(1/p) sum_i P_i S~_i P_i.T`` projected to PSD."""
    raw = np.einsum("pim,pmn,pjn->ij", proj.matrices, meas.s_tilde, proj.matrices)
    return project_psd(symmetrize(raw / proj.p))


def pgd_run(meas, proj, cfg_obj, init, solver, seed=0, keep_iterates=False):
    """Run projected gradient descent; returns ``(sigma_best, trace)``.

    Stops when the preconditioned gradient norm falls below ``tol_grad``,
    when the relative objective decrease stays below ``tol_obj`` for
    ``stall_limit`` consecutive iterations, or at ``max_iters``.  A NaN
    objective aborts with the trace attached to the raised error.
    """
    l = proj.l
    tol_grad = solver.tol_grad if solver.tol_grad is not None else 1e-6 * l
    lambda0 = solver.lambda0 if solver.lambda0 is not None else default_lambda0(proj)
    sigma = project_psd(np.asarray(init, dtype=float))
    f = lambda s: objective_value(s, meas, proj, cfg_obj)
    trace = SolveTrace(iterates=[] if keep_iterates else None)
    f_prev = f(sigma)
    if math.isnan(f_prev):
        raise NumericalError("objective is NaN at the initial iterate")
    trace.objective_best = f_prev
    trace.sigma_best = sigma.copy()
    quiet = 0
    t0 = time.perf_counter()
    for it in range(1, solver.max_iters + 1):
        g = gradient(sigma, meas, proj, cfg_obj)
        direction = precondition(
            g, solver.preconditioner, proj.p, seed=seed, iteration=it
        )
        g_norm = frobenius_norm(g.grad)
        d_norm = frobenius_norm(direction)
        if d_norm <= tol_grad:
            trace.rows.append(
                _row(it, f_prev, g_norm, d_norm, 0.0, t0)
            )
            trace.stopped_by = "gradient"
            break
        lam, sigma_next, stalled = armijo_step(
            sigma, direction, f, lambda0, solver.armijo
        )
        f_next = f(sigma_next) if not stalled else f_prev
        if math.isnan(f_next):
            err = NumericalError("objective became NaN during the solve")
            err.trace = trace
            raise err
        trace.rows.append(_row(it, f_next, g_norm, d_norm, lam, t0))
        if keep_iterates:
            trace.iterates.append(sigma_next.copy())
        if f_next < trace.objective_best:
            trace.objective_best = f_next
            trace.sigma_best = sigma_next.copy()
        rel_drop = (f_prev - f_next) / max(1.0, abs(f_prev))
        if rel_drop < solver.tol_obj:
            quiet += 1
        else:
            quiet = 0
        sigma, f_prev = sigma_next, f_next
        if quiet >= solver.stall_limit:
            trace.stopped_by = "objective"
            break
    else:
        trace.stopped_by = "max_iters"
    trace.sigma_final = sigma
    return trace.sigma_best.copy(), trace


def _row(it, objective, g_norm, d_norm, lam, t0):
    return {
        "iter": it,
        "objective": float(objective),
        "grad_norm": float(g_norm),
        "precond_grad_norm": float(d_norm),
        "lambda": float(lam),
        "millis": (time.perf_counter() - t0) * 1e3,
    }
