"""Grassmannian codebooks: Lloyd training and nearest-codeword quantization."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .channel import SystemConfig, channel_direction, dft_pilots, draw_channels, mmse_estimate, simulate_pilot_rx
from .errors import ConfigError, FormatError
from .linalg import herm, is_semi_unitary, read_cmatrix, rng_stream, write_cmatrix

__all__ = [
    "CHORDAL", "Codebook", "FeedbackIndex", "register_measure", "get_measure",
    "index_to_bits", "bits_to_index", "quantize", "quantize_indices",
    "lloyd_train", "train_user_codebook", "save_codebook", "load_codebook",
    "average_distortion",
]

# measure id -> (name, fn(codewords (J,M,N), h (...,M,N)) -> distances (...,J))
_MEASURES: dict[int, tuple[str, Callable]] = {}

CHORDAL = 0


def register_measure(measure_id: int, name: str, fn: Callable) -> None:
    _MEASURES[int(measure_id)] = (name, fn)


def get_measure(measure_id: int):
    try:
        return _MEASURES[int(measure_id)]
    except KeyError:
        raise ConfigError(f"unknown distance measure id {measure_id}; "
                          f"registered: {sorted(_MEASURES)}") from None


def _overlap(codewords: np.ndarray, h: np.ndarray) -> np.ndarray:
    # ||A_j^H h||_F^2 for every codeword j; shape (..., J)
    J, M, N = codewords.shape
    batch = h.shape[:-2]
    P = h.shape[-1]
    x = np.moveaxis(h.reshape(-1, M, P), 1, 0).reshape(M, -1)       # (M, S*P)
    a = codewords.transpose(1, 0, 2).reshape(M, J * N)              # (M, J*N)
    prod = (a.conj().T @ x).reshape(J, N, -1, P)
    ov = np.sum(prod.real ** 2 + prod.imag ** 2, axis=(1, 3))       # (J, S)
    return ov.T.reshape(*batch, J)


def _chordal(codewords: np.ndarray, h: np.ndarray) -> np.ndarray:
    n = codewords.shape[-1]
    return np.sqrt(np.maximum(0.0, n - _overlap(codewords, h)))


register_measure(CHORDAL, "chordal", _chordal)


@dataclass
class Codebook:
    M: int
    N: int
    B: int
    codewords: np.ndarray
    measure_id: int = CHORDAL
    distortion_history: list = field(default_factory=list)

    def __post_init__(self):
        self.codewords = np.asarray(self.codewords, dtype=np.complex128)
        self.validate()

    def __len__(self) -> int:
        return self.codewords.shape[0]

    def validate(self, tol: float = 1e-8) -> None:
        if self.codewords.shape != (2 ** self.B, self.M, self.N):
            raise ConfigError(f"codebook shape {self.codewords.shape} does not match "
                              f"(2^B, M, N) = {(2 ** self.B, self.M, self.N)}")
        for j, a in enumerate(self.codewords):
            if not is_semi_unitary(a, tol):
                raise ConfigError(f"codeword {j + 1} is not semi-unitary")
        J = len(self)
        for start in range(0, J, 256):
            d = _chordal(self.codewords, self.codewords[start:start + 256])
            rows = np.arange(d.shape[0])
            d[rows, start + rows] = np.inf
            if d.min() <= 1e-6:
                raise ConfigError("codebook contains duplicate codewords")


@dataclass(frozen=True)
class FeedbackIndex:
    """One-based codeword index with its {-1,+1} bit pattern (MSB first)."""

    index: int
    bits: tuple

    @classmethod
    def from_index(cls, index: int, B: int) -> "FeedbackIndex":
        return cls(int(index), tuple(int(b) for b in index_to_bits(index, B)))


def index_to_bits(index, B: int) -> np.ndarray:
    """Binary expansion of ``index - 1`` (MSB first) with 0 mapped to -1."""
    idx = np.asarray(index, dtype=np.int64) - 1
    if np.any(idx < 0) or np.any(idx >= 2 ** B):
        raise ValueError(f"index out of range [1, {2 ** B}]")
    shifts = np.arange(B - 1, -1, -1)
    bits = (idx[..., None] >> shifts) & 1
    return (2 * bits - 1).astype(np.int64)


def bits_to_index(bits) -> np.ndarray:
    b = np.asarray(bits)
    B = b.shape[-1]
    ones = (b > 0).astype(np.int64)
    weights = 2 ** np.arange(B - 1, -1, -1, dtype=np.int64)
    return ones @ weights + 1


def quantize_indices(h_tilde, cb: Codebook, measure: Optional[int] = None) -> np.ndarray:
    """Zero-based argmin indices for a stack of directions ``(..., M, N)``."""
    _, fn = get_measure(cb.measure_id if measure is None else measure)
    d = fn(cb.codewords, np.asarray(h_tilde, dtype=np.complex128))
    return np.argmin(d, axis=-1)  # first minimum -> lowest index wins ties


def quantize(h_tilde, cb: Codebook, measure: Optional[int] = None) -> FeedbackIndex:
    j = int(quantize_indices(h_tilde, cb, measure))
    return FeedbackIndex.from_index(j + 1, cb.B)


def _sq_distances(codewords, samples) -> np.ndarray:
    return np.maximum(0.0, codewords.shape[-1] - _overlap(codewords, samples))


def average_distortion(samples, codewords) -> float:
    """Mean squared chordal distance to the nearest codeword."""
    return float(np.mean(_sq_distances(np.asarray(codewords), np.asarray(samples)).min(axis=-1)))


def _greedy_init(samples: np.ndarray, J: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    n = samples.shape[0]
    first = 0 if rng is None else int(rng.integers(n))
    chosen = [first]
    mind = _sq_distances(samples[first][None], samples)[:, 0]
    for _ in range(1, J):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, _sq_distances(samples[nxt][None], samples)[:, 0])
    return samples[chosen].copy()


def _dominant_subspace(s: np.ndarray, n: int) -> np.ndarray:
    w, v = np.linalg.eigh(s)
    return v[..., :, ::-1][..., :, :n]


def lloyd_train(training_set, B: int, iters: int = 50, tol: float = 1e-6,
                rng: Optional[np.random.Generator] = None, init=None) -> Codebook:
    """Train a 2^B-word codebook with the Lloyd algorithm under chordal distance.

    Each iteration partitions the training set by nearest codeword, then
    replaces each codeword by the ``N`` dominant eigenvectors of the sum of
    ``H H^H`` over its cell, which minimizes the cell's squared chordal
    distortion. A codeword whose cell is empty is re-seeded with the training
    sample farthest from its current codeword.

    Stops after ``iters`` updates or once the relative improvement in average
    distortion drops below ``tol``. The per-partition average distortion is
    kept in ``Codebook.distortion_history`` and never increases.
    """
    x = np.asarray(training_set, dtype=np.complex128)
    n, M, N = x.shape
    J = 2 ** B
    if n < 10 * J:
        raise ConfigError(f"training set of {n} is below 10 x 2^B = {10 * J}")
    cw = _greedy_init(x, J, rng) if init is None else np.array(init, dtype=np.complex128)
    outer = (x @ herm(x)).reshape(n, M * M)
    history = []
    for it in range(iters + 1):
        d2 = _sq_distances(cw, x)
        assign = np.argmin(d2, axis=1)
        dmin = d2[np.arange(n), assign]
        history.append(float(dmin.mean()))
        if it == iters:
            break
        if it > 0:
            prev, cur = history[-2], history[-1]
            if prev <= 0 or (prev - cur) < tol * prev:
                break
        onehot = np.zeros((n, J))
        onehot[np.arange(n), assign] = 1.0
        sums = (onehot.T @ outer.real + 1j * (onehot.T @ outer.imag)).reshape(J, M, M)
        counts = onehot.sum(axis=0)
        new = cw.copy()
        filled = counts > 0
        if np.any(filled):
            new[filled] = _dominant_subspace(sums[filled], N)
        taken = set()
        for j in np.flatnonzero(~filled):
            order = np.argsort(-dmin, kind="stable")
            pick = next(i for i in order if i not in taken)
            taken.add(pick)
            new[j] = x[pick]
        cw = new
    # Codeword update after the last partition is skipped, so history matches cw.
    cb = Codebook(M, N, B, cw)
    cb.distortion_history = history
    return cb


def train_user_codebook(cfg: SystemConfig, user: int, seed: int, *, size: Optional[int] = None,
                        iters: int = 50, tol: float = 1e-6) -> Codebook:
    """Lloyd codebook for ``user`` trained on directions of MMSE estimates.

    Training directions follow the deployment distribution: Rayleigh channel,
    DFT pilots at ``cfg.P_train``, MMSE estimate, compact-SVD direction.
    Every user gets independent streams, so codebooks differ across users.
    """
    J = 2 ** cfg.B
    size = 100 * J if size is None else int(size)
    one_user = SystemConfig(cfg.M, cfg.N, 1, cfg.B, cfg.L, cfg.P_train, cfg.P)
    pilots = dft_pilots(cfg)
    h = draw_channels(one_user, rng_stream(seed, "codebook", user, 0), (size,))
    block = simulate_pilot_rx(h, pilots, one_user, rng_stream(seed, "codebook", user, 1))
    dirs = channel_direction(mmse_estimate(block, one_user))[:, 0]
    return lloyd_train(dirs, cfg.B, iters, tol, rng_stream(seed, "codebook", user, 2))


# -- GCB1 codebook file ------------------------------------------------------

GCB_MAGIC = b"GCB1"


def save_codebook(path, cb: Codebook) -> None:
    with open(path, "wb") as fh:
        fh.write(GCB_MAGIC)
        fh.write(struct.pack("<IIII", cb.M, cb.N, cb.B, cb.measure_id))
        for a in cb.codewords:
            write_cmatrix(fh, a)


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GCB_MAGIC:
            raise FormatError(f"bad codebook magic {magic!r}")
        hdr = fh.read(16)
        if len(hdr) != 16:
            raise FormatError("truncated codebook header")
        M, N, B, mid = struct.unpack("<IIII", hdr)
        cw = np.stack([read_cmatrix(fh) for _ in range(2 ** B)])
        if fh.read(1):
            raise FormatError("trailing bytes in codebook file")
    return Codebook(M, N, B, cw, mid)
