"""Dense symmetric-matrix primitives.

All routines operate on plain ``numpy.ndarray`` values (float64, row-major).
A "symmetric matrix" throughout the package is an array that passes
``check_symmetric``: square, finite, with asymmetry below
``1e-12 * max(1, max|entries|)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DataError,
    DefinitenessError,
    DimensionError,
    NumericalError,
    ValidationError,
)

SYMMETRY_RTOL = 1e-12


def _as_square(a, name="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")
    return a


def check_symmetric(a, name="matrix"):
    """Validate that ``a`` is a finite symmetric square matrix and return it."""
    a = _as_square(a, name)
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYMMETRY_RTOL * scale:
        raise ValidationError(
            f"{name} is not symmetric: max asymmetry {asym:.3e} exceeds "
            f"{SYMMETRY_RTOL * scale:.3e}"
        )
    return a


def symmetrize(a):
    """Return ``0.5 * (a + a.T)``.

    The result is exactly symmetric in floating point because each pair of
    mirrored entries is computed from the same two addends.
    """
    a = _as_square(a)
    if not np.all(np.isfinite(a)):
        raise ValidationError("cannot symmetrize a matrix with non-finite entries")
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class Spectrum:
    """Eigendecomposition of a symmetric matrix.

    ``eigenvalues`` are sorted descending; column ``k`` of ``eigenvectors``
    is the unit eigenvector paired with ``eigenvalues[k]``, with its
    largest-magnitude component forced nonnegative so the decomposition is
    deterministic across runs.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self):
        return self.eigenvalues.shape[0]


def sym_eigendecompose(a):
    """Eigendecompose a symmetric matrix into a :class:`Spectrum`."""
    a = check_symmetric(a)
    try:
        w, v = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK rarely fails
        raise NumericalError(f"eigendecomposition failed to converge: {exc}") from exc
    # eigh returns ascending order.
    w = w[::-1].copy()
    v = v[:, ::-1].copy()
    # Sign convention: largest-magnitude component of each column nonnegative.
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    v *= signs
    return Spectrum(eigenvalues=w, eigenvectors=v)


def project_psd(a):
    """Frobenius-nearest positive semidefinite matrix: clamp negative eigenvalues."""
    spec = sym_eigendecompose(a)
    w = np.maximum(spec.eigenvalues, 0.0)
    return symmetrize((spec.eigenvectors * w) @ spec.eigenvectors.T)


def frobenius_norm(a):
    """Square root of the sum of squared entries."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValidationError("frobenius_norm requires finite entries")
    return float(np.sqrt(np.sum(a * a)))


def cholesky_factor(a):
    """Lower-triangular ``L`` with ``L @ L.T == a`` for symmetric PD ``a``.

    Raises
    ------
    DefinitenessError
        If a pivot is not positive; ``pivot`` names the offending index.
    """
    a = check_symmetric(a)
    l = a.shape[0]
    L = np.zeros_like(a)
    for j in range(l):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if d <= 0.0 or not np.isfinite(d):
            raise DefinitenessError(
                f"matrix is not positive definite: pivot {j} is {d:.6e}", pivot=j
            )
        L[j, j] = np.sqrt(d)
        if j + 1 < l:
            L[j + 1 :, j] = (a[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


def principal_angle_cosines(u, v):
    """Cosines of principal angles between two column-orthonormal bases.

    Returns the singular values of ``u.T @ v`` in descending order, clipped
    to [0, 1].  A value of 1 means the subspace directions are aligned.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.ndim != 2 or v.ndim != 2 or u.shape != v.shape:
        raise DimensionError(
            f"subspace bases must have identical shapes, got {u.shape} and {v.shape}"
        )
    for name, b in (("u", u), ("v", v)):
        g = b.T @ b
        if not np.allclose(g, np.eye(b.shape[1]), atol=1e-8):
            raise ValidationError(f"columns of {name} are not orthonormal")
    s = np.linalg.svd(u.T @ v, compute_uv=False)
    return np.clip(s, 0.0, 1.0)


def save_matrix_csv(path, a):
    """Write a matrix as CSV, one row per line, '.' decimal separator, no header.

    Uses ``repr`` of each float64, which round-trips exactly (shortest
    representation with at most 17 significant digits).
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    with open(path, "w", encoding="utf-8") as fh:
        for row in a:
            fh.write(",".join(repr(float(x)) for x in row))
            fh.write("\n")


def load_matrix_csv(path):
    """Read a matrix written by :func:`save_matrix_csv`."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split(",")])
    if not rows:
        raise DataError(f"{path} contains no rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise DataError(f"{path} has ragged rows")
    return np.array(rows, dtype=float)
