"""Reconstruction metrics, the three-way preconditioner comparison, and
deterministic artifact emission (CSV report, SVG heat maps).
"""

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .linalg import frobenius_norm, sym_eigendecompose

REPORT_COLUMNS = ("method", "seed", "mse", "rel_fro", "aligned_eigs", "iters", "millis")


def mse(sigma_hat, sigma_true):
    """Entrywise mean squared error ``||A - B||_F^2 / l^2``."""
    a = np.asarray(sigma_hat, dtype=float)
    b = np.asarray(sigma_true, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def aligned_eigenvector_count(sigma_hat, sigma_true, cos_threshold=0.9):
    """Number of leading eigenvectors matched above the cosine threshold.

    Returns the largest ``r`` such that every ``j <= r`` satisfies
    ``|<v_hat_j, v_j>| >= cos_threshold`` with eigenvectors ordered by
    descending eigenvalue.  Meaningful only when ``sigma_true`` has a
    non-degenerate leading spectrum.
    """
    if not 0.0 < cos_threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {cos_threshold}")
    ve = sym_eigendecompose(sigma_hat).eigenvectors
    vt = sym_eigendecompose(sigma_true).eigenvectors
    overlaps = np.abs(np.sum(ve * vt, axis=0))
    below = np.nonzero(overlaps < cos_threshold)[0]
    return int(below[0]) if below.size else overlaps.size


@dataclass
class MethodResult:
    method: str
    seed: int
    mse: float
    rel_fro: float
    aligned_eigs: int
    iters: int
    millis: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def methods(self):
        return sorted({r.method for r in self.rows})

    def metric(self, method, name):
        return np.array([getattr(r, name) for r in self.rows if r.method == method])

    def median_mse_ratio(self, numerator, denominator):
        """Median of per-seed MSE ratios between two methods (paired design)."""
        num = {r.seed: r.mse for r in self.rows if r.method == numerator}
        den = {r.seed: r.mse for r in self.rows if r.method == denominator}
        seeds = sorted(set(num) & set(den))
        if not seeds:
            raise ValidationError(f"no paired seeds for {numerator}/{denominator}")
        return float(np.median([num[s] / den[s] for s in seeds]))


def write_report_csv(path, report):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for r in report.rows:
            fh.write(
                f"{r.method},{r.seed},{repr(r.mse)},{repr(r.rel_fro)},"
                f"{r.aligned_eigs},{r.iters},{repr(r.millis)}\n"
            )


def read_report_csv(path):
    report = EvalReport()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValidationError(f"{path}: unexpected report columns")
        for row in reader:
            report.rows.append(
                MethodResult(
                    method=row["method"],
                    seed=int(row["seed"]),
                    mse=float(row["mse"]),
                    rel_fro=float(row["rel_fro"]),
                    aligned_eigs=int(row["aligned_eigs"]),
                    iters=int(row["iters"]),
                    millis=float(row["millis"]),
                )
            )
    return report


def evaluate_estimate(method, seed, sigma_hat, sigma_true, trace, cos_threshold=0.9):
    err = frobenius_norm(np.asarray(sigma_hat) - np.asarray(sigma_true))
    return MethodResult(
        method=method,
        seed=seed,
        mse=mse(sigma_hat, sigma_true),
        rel_fro=err / frobenius_norm(sigma_true),
        aligned_eigs=aligned_eigenvector_count(sigma_hat, sigma_true, cos_threshold),
        iters=len(trace.rows),
        millis=trace.rows[-1]["millis"] if trace.rows else 0.0,
    )


# 64-step color ramp: piecewise-linear between the numeric anchors below
# (position in [0, 1], R, G, B in [0, 255]).  Quantizing to exactly 64 levels
# keeps heat maps byte-reproducible across platforms.
RAMP_ANCHORS = (
    (0.00, 13, 8, 135),
    (0.25, 126, 3, 168),
    (0.50, 204, 71, 120),
    (0.75, 248, 149, 64),
    (1.00, 240, 249, 33),
)
RAMP_STEPS = 64


def _ramp_color(t):
    t = min(max(t, 0.0), 1.0)
    level = min(int(t * RAMP_STEPS), RAMP_STEPS - 1)
    t = (level + 0.5) / RAMP_STEPS
    for (p0, r0, g0, b0), (p1, r1, g1, b1) in zip(RAMP_ANCHORS, RAMP_ANCHORS[1:]):
        if t <= p1:
            w = (t - p0) / (p1 - p0)
            return (
                int(round(r0 + w * (r1 - r0))),
                int(round(g0 + w * (g1 - g0))),
                int(round(b0 + w * (b1 - b0))),
            )
    return RAMP_ANCHORS[-1][1:]


def emit_heatmap(matrix, path, scale=None, cell=12):
    """Write a deterministic SVG heat map of ``matrix``.

    ``scale`` is the shared ``(vmin, vmax)`` intensity range of a comparison
    set; it defaults to the matrix's own range.  The numeric scale is
    annotated in the image so shared-scale sets are verifiable from the
    files alone.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2:
        raise DimensionError(f"heat maps need a 2-D matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("heat maps need finite entries")
    if scale is None:
        scale = (float(a.min()), float(a.max()))
    vmin, vmax = (float(scale[0]), float(scale[1]))
    span = vmax - vmin
    rows, cols = a.shape
    width, height = cols * cell, rows * cell + 18
    buf = io.StringIO()
    buf.write(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" shape-rendering="crispEdges">\n'
    )
    for i in range(rows):
        for j in range(cols):
            t = 0.5 if span == 0 else (a[i, j] - vmin) / span
            r, g, b = _ramp_color(t)
            buf.write(
                f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" '
                f'height="{cell}" fill="rgb({r},{g},{b})"/>\n'
            )
    buf.write(
        f'<text x="2" y="{rows * cell + 13}" font-family="monospace" '
        f'font-size="10">scale [{repr(vmin)}, {repr(vmax)}]</text>\n'
    )
    buf.write("</svg>\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


def run_comparison(problem_builder, methods, solver_factory, sigma_true, seeds,
                   cos_threshold=0.9, keep_estimates=False):
    """Paired comparison of preconditioning methods across seeds.

    ``problem_builder(seed)`` must return ``(meas, proj, cfg_obj, init)``
    built deterministically from the seed, so every method consumes bitwise
    identical measurements.  ``solver_factory(method)`` returns the solver
    configuration for a method, or ``None`` to record a skip note (e.g. no
    trained weights for the diffusion method).
    """
    from .optimizer import pgd_run  # local import to avoid a cycle

    report = EvalReport()
    estimates = {}
    for method in methods:
        if solver_factory(method) is None:
            report.notes.append(f"{method}: skipped (no solver available)")
    for seed in seeds:
        meas, proj, cfg_obj, init = problem_builder(seed)
        for method in methods:
            solver = solver_factory(method)
            if solver is None:
                continue
            t0 = time.perf_counter()
            sigma_hat, trace = pgd_run(meas, proj, cfg_obj, init, solver, seed=seed)
            result = evaluate_estimate(
                method, seed, sigma_hat, sigma_true, trace, cos_threshold
            )
            result.millis = (time.perf_counter() - t0) * 1e3
            report.rows.append(result)
            if keep_estimates:
                estimates[(method, seed)] = sigma_hat
    if keep_estimates:
        return report, estimates
    return report
