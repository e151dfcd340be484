"""Ground-truth covariances, Gaussian data synthesis, cube ingestion, partitioning.

Data matrices are plain ``(l, n)`` float64 arrays: column ``j`` is sample
``x_j`` over ``l`` spectral bands.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import (
    DataError,
    DivisibilityError,
    FormatError,
    SizeError,
    ValidationError,
)
from .linalg import check_symmetric, cholesky_factor, load_matrix_csv, symmetrize

CUBE_MAGIC = "HSCUBE"
CUBE_VERSION = 1


@dataclass(frozen=True)
class CovarianceSpec:
    """Recipe for a ground-truth covariance.

    kind:
      - ``"toeplitz"``: entries ``rho ** |i - j|``; requires ``|rho| < 1``.
      - ``"lowrank_plus_identity"``: ``scale * U @ U.T + I`` with ``U`` an
        ``l x rank`` matrix of N(0, 1/rank) entries.
      - ``"from_file"``: symmetric PD matrix read from a CSV file.
    """

    kind: str
    l: int
    rho: float = 0.0
    rank: int = 1
    scale: float = 1.0
    path: str = ""

    def __post_init__(self):
        if self.l < 1:
            raise ValidationError(f"dimension must be >= 1, got {self.l}")
        if self.kind == "toeplitz":
            if not abs(self.rho) < 1.0:
                raise ValidationError(f"toeplitz requires |rho| < 1, got {self.rho}")
        elif self.kind == "lowrank_plus_identity":
            if not (1 <= self.rank <= self.l):
                raise ValidationError(
                    f"lowrank rank must be in [1, {self.l}], got {self.rank}"
                )
            if not self.scale > 0:
                raise ValidationError(f"lowrank scale must be > 0, got {self.scale}")
        elif self.kind == "from_file":
            if not self.path:
                raise ValidationError("from_file requires a path")
        else:
            raise ValidationError(f"unknown covariance kind {self.kind!r}")


def synth_covariance(spec, seed=0):
    """Realize a :class:`CovarianceSpec` as a symmetric PD matrix."""
    l = spec.l
    if spec.kind == "toeplitz":
        idx = np.arange(l)
        return spec.rho ** np.abs(idx[:, None] - idx[None, :])
    if spec.kind == "lowrank_plus_identity":
        gen = rngmod.stream(seed, rngmod.DATA, 0)
        u = gen.standard_normal((l, spec.rank)) / np.sqrt(spec.rank)
        return symmetrize(spec.scale * (u @ u.T) + np.eye(l))
    # from_file
    sigma = check_symmetric(load_matrix_csv(spec.path), "covariance file")
    if sigma.shape[0] != l:
        raise ValidationError(
            f"covariance file is {sigma.shape[0]}x{sigma.shape[0]}, expected l={l}"
        )
    cholesky_factor(sigma)  # PD check
    return sigma


def sample_gaussian_data(sigma, n, seed):
    """Draw ``n`` i.i.d. zero-mean Gaussian columns with covariance ``sigma``.

    Columns are ``L @ z`` with ``L`` the Cholesky factor and ``z`` standard
    normal; the output is a deterministic function of ``(sigma, n, seed)``
    via the single child stream ``(seed, DATA)``.
    """
    if n < 1:
        raise SizeError(f"sample count must be >= 1, got {n}")
    L = cholesky_factor(sigma)
    gen = rngmod.stream(seed, rngmod.DATA)
    z = gen.standard_normal((sigma.shape[0], int(n)))
    return L @ z


@dataclass(frozen=True)
class PartitionPlan:
    """Disjoint blocks of column indices, all of size ``b = n / p``."""

    p: int
    b: int
    index_sets: tuple = field(repr=False)

    @property
    def n(self):
        return self.p * self.b


def make_partitions(n, p, seed):
    """Slice a uniformly random permutation of ``range(n)`` into ``p`` blocks."""
    n = int(n)
    p = int(p)
    if p < 1:
        raise SizeError(f"partition count must be >= 1, got {p}")
    if p > n:
        raise SizeError(f"cannot split {n} samples into {p} partitions")
    if n % p != 0:
        raise DivisibilityError(f"partition count {p} does not divide n={n}")
    b = n // p
    perm = rngmod.stream(seed, rngmod.PARTITIONS).permutation(n)
    blocks = tuple(perm[i * b : (i + 1) * b].copy() for i in range(p))
    return PartitionPlan(p=p, b=b, index_sets=blocks)


def write_cube(path, cube):
    """Write a ``(bands, rows, cols)`` array as an HSCUBE v1 file."""
    cube = np.asarray(cube, dtype=np.float64)
    if cube.ndim != 3:
        raise ValidationError(f"cube must be 3-D (bands, rows, cols), got {cube.shape}")
    l, r, c = cube.shape
    header = {
        "magic": CUBE_MAGIC,
        "version": CUBE_VERSION,
        "bands": l,
        "rows": r,
        "cols": c,
        "dtype": "f64",
        "order": "band-major",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(cube).astype("<f8", copy=False).tobytes())


def read_cube_raw(path):
    """Read an HSCUBE v1 file without centering; returns ``(bands, rows, cols)``."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        if not header_line.endswith(b"\n"):
            raise FormatError(f"{path}: missing header line terminator")
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable header: {exc}") from exc
        if not isinstance(header, dict) or header.get("magic") != CUBE_MAGIC:
            raise FormatError(f"{path}: bad magic, expected {CUBE_MAGIC!r}")
        if header.get("version") != CUBE_VERSION:
            raise FormatError(f"{path}: unsupported version {header.get('version')!r}")
        if header.get("dtype") != "f64" or header.get("order") != "band-major":
            raise FormatError(f"{path}: unsupported dtype/order")
        try:
            l = int(header["bands"])
            r = int(header["rows"])
            c = int(header["cols"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: missing or invalid geometry fields") from exc
        if min(l, r, c) < 1:
            raise FormatError(f"{path}: non-positive geometry {l}x{r}x{c}")
        payload = fh.read()
    expected = l * r * c * 8
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header promises {expected}"
        )
    cube = np.frombuffer(payload, dtype="<f8").reshape(l, r, c).astype(np.float64)
    if not np.all(np.isfinite(cube)):
        raise DataError(f"{path}: cube contains non-finite values")
    return cube


def load_cube(path):
    """Load a cube as a per-band-centered data matrix.

    Pixels become columns (``n = rows * cols``, row-major pixel order) and the
    per-band mean is subtracted, matching the zero-mean sampling model used
    everywhere else in the package.
    """
    cube = read_cube_raw(path)
    l = cube.shape[0]
    x = cube.reshape(l, -1)
    return x - x.mean(axis=1, keepdims=True)
