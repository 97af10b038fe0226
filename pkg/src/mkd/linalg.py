"""Complex-matrix numeric core.

Complex matrices are plain ``numpy`` arrays of dtype ``complex128``. Most
routines accept stacks of matrices (leading batch axes) because Monte-Carlo
evaluation runs many small problems at once.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Literal

import numpy as np

from .errors import DomainError, FormatError, NumericError

__all__ = [
    "RANK_RTOL", "STREAMS", "SvdResult", "GradCheckReport",
    "as_cmatrix", "herm", "rng_stream", "svd", "numerical_rank",
    "logdet_hermitian_psd", "chordal_distance", "complex_gaussian",
    "grad_check", "write_cmatrix", "read_cmatrix", "save_cmatrix",
    "load_cmatrix", "is_semi_unitary", "cmatrix_bytes",
]

# Singular values below RANK_RTOL * s_max count as zero.
RANK_RTOL = 1e-12

# Named RNG streams. Extra integers (user index, dataset purpose, ...) may be
# appended to the spawn key to get further independent streams.
STREAMS = {
    "channel": 0,
    "noise": 1,
    "init": 2,
    "shuffle": 3,
    "codebook": 4,
    "validation": 5,
    "test": 6,
    "alpha": 7,
}

CMX_MAGIC = b"CMX1"


def rng_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return a counter-based generator for the named stream of ``seed``.

    Identical ``(seed, name, *extra)`` always yields the identical sequence,
    independent of any other stream's consumption.
    """
    if name not in STREAMS:
        raise KeyError(f"unknown RNG stream {name!r}; known: {sorted(STREAMS)}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], *map(int, extra)))
    return np.random.Generator(np.random.Philox(ss))


def herm(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(a, -1, -2))


def as_cmatrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def is_semi_unitary(a: np.ndarray, tol: float = 1e-8) -> bool:
    a = np.asarray(a)
    gram = herm(a) @ a
    eye = np.eye(a.shape[-1])
    return bool(np.max(np.abs(gram - eye)) <= tol)


@dataclass
class SvdResult:
    """``m = left @ diag(singular) @ right^H``."""

    left: np.ndarray
    singular: np.ndarray
    right: np.ndarray
    kind: str = "compact"

    def reconstruct(self) -> np.ndarray:
        k = self.singular.shape[-1]
        return (self.left[..., :, :k] * self.singular[..., None, :]) @ herm(self.right[..., :, :k])


def svd(m, kind: Literal["compact", "full"] = "compact") -> SvdResult:
    """Singular value decomposition of a matrix or a stack of matrices.

    Parameters
    ----------
    m : array_like
        ``(..., rows, cols)`` complex array with finite entries.
    kind : {"compact", "full"}
        Compact keeps ``min(rows, cols)`` singular vectors; full returns
        square unitary ``left`` and ``right``.

    Returns
    -------
    SvdResult
        Singular values sorted non-increasing. ``right`` holds the right
        singular vectors as columns (not conjugate-transposed).

    Raises
    ------
    NumericError
        If LAPACK does not converge or the input is not finite.
    """
    a = np.asarray(m, dtype=np.complex128)
    if a.ndim < 2 or a.shape[-1] == 0 or a.shape[-2] == 0:
        raise ValueError(f"svd needs a non-empty matrix, got shape {a.shape}")
    if kind not in ("compact", "full"):
        raise ValueError(f"unknown svd kind {kind!r}")
    if not np.all(np.isfinite(a)):
        raise NumericError("svd input has non-finite entries")
    try:
        u, s, vh = np.linalg.svd(a, full_matrices=(kind == "full"))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc
    return SvdResult(u, s, herm(vh), kind)


def numerical_rank(singular: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    """Count singular values above ``rtol * max``; works on stacks."""
    s = np.asarray(singular)
    smax = s[..., :1]
    return np.sum(s > rtol * smax, axis=-1)


def logdet_hermitian_psd(m, *, herm_tol: float = 1e-10) -> float:
    """Base-2 log-determinant of a Hermitian positive-definite matrix.

    Raises :class:`DomainError` for non-square, non-Hermitian or
    non-positive-definite input.
    """
    a = as_cmatrix(m)
    if a.shape[0] != a.shape[1]:
        raise DomainError(f"logdet needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.conj().T)) > herm_tol * scale:
        raise DomainError("logdet input is not Hermitian")
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise DomainError("logdet input is not positive definite") from exc
    return float(2.0 * np.sum(np.log2(np.abs(np.diag(chol)))))


def chordal_distance(a, h, *, tol: float = 1e-8) -> float:
    """Chordal distance ``sqrt(N - ||a^H h||_F^2)`` between two subspaces."""
    a = as_cmatrix(a, "a")
    h = as_cmatrix(h, "h")
    if a.shape != h.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {h.shape}")
    if not (is_semi_unitary(a, tol) and is_semi_unitary(h, tol)):
        raise DomainError("chordal_distance needs semi-unitary arguments")
    n = a.shape[1]
    overlap = np.linalg.norm(a.conj().T @ h) ** 2
    return float(np.sqrt(max(0.0, n - overlap)))


def complex_gaussian(rows: int, cols: int, rng: np.random.Generator,
                     batch: tuple[int, ...] = ()) -> np.ndarray:
    """CN(0, 1) entries: real and imaginary parts each N(0, 1/2)."""
    shape = (*batch, rows, cols)
    z = rng.standard_normal((2, *shape))
    return (z[0] + 1j * z[1]) * np.sqrt(0.5)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    analytic: np.ndarray
    numeric: np.ndarray
    failures: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(f: Callable[[np.ndarray], float], x0, analytic, *,
               step: float = 1e-5, tolerance: float = 1e-4,
               atol: float = 1e-8, indices=None) -> GradCheckReport:
    """Compare an analytic gradient with central finite differences.

    ``analytic`` is either the gradient array at ``x0`` or a callable
    returning it. The relative error of entry ``i`` is
    ``|a_i - n_i| / max(|a_i|, |n_i|, atol)``; ``atol`` keeps entries whose
    true gradient is zero from dividing roundoff by roundoff.
    ``indices`` restricts the check to a subset of flat positions.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x0, dtype=np.float64).ravel()
    g = analytic(x.copy()) if callable(analytic) else analytic
    g = np.asarray(g, dtype=np.float64).ravel()
    if g.shape != x.shape:
        raise ValueError(f"gradient shape {g.shape} does not match x {x.shape}")
    idx = np.arange(x.size) if indices is None else np.asarray(indices, dtype=int)
    num = np.zeros(idx.size)
    for j, i in enumerate(idx):
        orig = x[i]
        x[i] = orig + step
        fp = f(x)
        x[i] = orig - step
        fm = f(x)
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f returned a non-finite value at coordinate {i}")
        num[j] = (fp - fm) / (2.0 * step)
    a = g[idx]
    rel = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), atol)
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(worst, tolerance, a, num, idx[rel > tolerance])


# -- CMX1 binary format ------------------------------------------------------

def write_cmatrix(fh: BinaryIO, m) -> None:
    a = as_cmatrix(m)
    rows, cols = a.shape
    fh.write(CMX_MAGIC)
    fh.write(struct.pack("<II", rows, cols))
    payload = np.empty((rows, cols, 2), dtype="<f8")
    payload[..., 0] = a.real
    payload[..., 1] = a.imag
    fh.write(payload.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def read_cmatrix(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != CMX_MAGIC:
        raise FormatError(f"bad CMatrix magic {magic!r}")
    rows, cols = struct.unpack("<II", _read_exact(fh, 8))
    raw = np.frombuffer(_read_exact(fh, rows * cols * 16), dtype="<f8")
    raw = raw.reshape(rows, cols, 2)
    return raw[..., 0] + 1j * raw[..., 1]


def save_cmatrix(path, m) -> None:
    with open(path, "wb") as fh:
        write_cmatrix(fh, m)


def load_cmatrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_cmatrix(fh)


def cmatrix_bytes(m) -> bytes:
    buf = io.BytesIO()
    write_cmatrix(buf, m)
    return buf.getvalue()
