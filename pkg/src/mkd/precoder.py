"""BD / RBD precoding from quantized channels and the sum-rate objective.

All routines accept leading batch axes so Monte-Carlo draws are processed
as stacks. Precoders are ``(..., M, N*K)`` arrays; user ``k`` owns columns
``k*N:(k+1)*N``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .channel import ChannelDataset, SystemConfig, channel_direction, dft_pilots, generate_dataset, mmse_estimate, PilotBlock
from .codebook import Codebook, quantize_indices
from .errors import ConfigError, DomainError, NumericError
from .linalg import herm, svd

__all__ = [
    "RateReport", "PrecoderSet", "per_user_rates", "sum_rate", "bd_precoder",
    "rbd_precoder", "rates_and_grad", "transmitter_csi", "default_alpha_grid", "search_alpha", "estimate_channels",
    "quantize_channels", "baseline_precoders", "baseline_rates", "SCHEMES",
]

SCHEMES = ("bd", "rbd", "rbd-perfect-csit-bound")


@dataclass
class PrecoderSet:
    V: np.ndarray
    N: int

    @property
    def K(self) -> int:
        return self.V.shape[-1] // self.N

    def user(self, k: int) -> np.ndarray:
        return self.V[..., :, k * self.N:(k + 1) * self.N]

    def traces(self) -> np.ndarray:
        """``tr(V_k^H V_k)`` per user, shape ``(..., K)``."""
        p = np.abs(self.V) ** 2
        return p.reshape(*p.shape[:-1], self.K, self.N).sum(axis=(-3, -1))


@dataclass
class RateReport:
    per_user: np.ndarray
    sum: float
    P: float
    sample_count: int = 1
    stderr: float = 0.0

    @classmethod
    def from_draws(cls, rates: np.ndarray, P: float) -> "RateReport":
        """Monte-Carlo mean of per-draw rates ``(draws, K)``."""
        rates = np.atleast_2d(rates)
        n = rates.shape[0]
        per_draw = rates.sum(axis=1)
        err = float(per_draw.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        per_user = rates.mean(axis=0)
        return cls(per_user, float(per_user.sum()), float(P), n, err)


def _logdet2_batch(s: np.ndarray) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise NumericError("log-det of a non positive-definite matrix in the rate "
                           "computation") from exc
    d = np.abs(np.diagonal(chol, axis1=-2, axis2=-1))
    return 2.0 * np.sum(np.log2(d), axis=-1)


def _own_block_mask(K: int, N: int) -> np.ndarray:
    # mask[k, c] = 1 where column c of V belongs to a user other than k
    owner = np.repeat(np.arange(K), N)
    return (owner[None, :] != np.arange(K)[:, None]).astype(float)


def _rate_terms(h, v, P):
    h = np.asarray(h, dtype=np.complex128)
    v = np.asarray(v, dtype=np.complex128)
    K, M, N = h.shape[-3:]
    if v.shape[-2] != M or v.shape[-1] != N * K:
        raise ConfigError(f"precoder shape {v.shape[-2:]} does not match (M, NK) = {(M, N * K)}")
    c = P / M
    a = herm(h) @ v[..., None, :, :]  # (..., K, N, NK)
    eye = np.eye(N)
    s = eye + c * (a @ herm(a))
    ai = a * _own_block_mask(K, N)[:, None, :]
    t = eye + c * (ai @ herm(ai))
    return h, a, ai, s, t, c


def per_user_rates(h, v, P: float) -> np.ndarray:
    """Per-draw, per-user rates of the log-det rate formula.

    ``R_k = log2|I + (P/M) sum_l H_k^H V_l V_l^H H_k|
    - log2|I + (P/M) sum_{l != k} H_k^H V_l V_l^H H_k|``

    Parameters
    ----------
    h : ndarray, shape (..., K, M, N)
    v : ndarray, shape (..., M, N*K)
    P : float
        Linear power.

    Returns
    -------
    ndarray, shape (..., K)
    """
    _, _, _, s, t, _ = _rate_terms(h, v, P)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise NumericError("non-finite covariance in the rate computation "
                           f"(P={P}, max|V|={np.max(np.abs(v))})")
    return _logdet2_batch(s) - _logdet2_batch(t)


def rates_and_grad(h, v, P: float):
    """Per-user rates and the gradient of the summed rate with respect to ``V``.

    The gradient is returned as ``dR/dRe(V) + j dR/dIm(V)``, shape
    ``(..., M, NK)``, one per draw. Uses
    ``d log|I + c A A^H| = 2c Re tr(A^H (I + c A A^H)^-1 dA)``.
    """
    h, a, ai, s, t, c = _rate_terms(h, v, P)
    K, N = h.shape[-3], h.shape[-1]
    rates = _logdet2_batch(s) - _logdet2_batch(t)
    mask = _own_block_mask(K, N)[:, None, :]
    ga = np.linalg.solve(s, a) - np.linalg.solve(t, ai) * mask
    ga *= 2.0 * c / np.log(2.0)
    gv = np.einsum("...kmn,...knc->...mc", h, ga)
    return rates, gv


def sum_rate(h, v, P: float) -> RateReport:
    """Rates for one draw ``(K, M, N)`` or the Monte-Carlo mean over a stack."""
    if isinstance(v, PrecoderSet):
        v = v.V
    r = per_user_rates(h, v, P)
    if r.ndim == 1:
        return RateReport(r, float(r.sum()), float(P), 1)
    return RateReport.from_draws(r.reshape(-1, r.shape[-1]), P)


def _stack_others(q: np.ndarray, k: int) -> np.ndarray:
    """``[H_1 .. H_{k-1} H_{k+1} .. H_K]`` as ``(..., M, N(K-1))``."""
    K = q.shape[-3]
    others = [q[..., l, :, :] for l in range(K) if l != k]
    return np.concatenate(others, axis=-1)


def _check_dims(q: np.ndarray) -> tuple[int, int, int]:
    if q.ndim < 3:
        raise ConfigError("quantized channels must have shape (..., K, M, N)")
    K, M, N = q.shape[-3:]
    if N * K > M:
        raise ConfigError(f"N*K = {N * K} exceeds M = {M}: no room for block diagonalization")
    return K, M, N


def bd_precoder(quantized) -> PrecoderSet:
    """Block-diagonalization precoders from quantized channels ``(..., K, M, N)``.

    For user ``k`` the other users' channels are stacked into ``Phi_k``;
    the trailing ``M - N(K-1)`` right singular vectors of ``Phi_k`` span its
    null space. The user's own channel is projected there and its dominant
    ``N`` right singular vectors pick the directions inside the null space.
    """
    q = np.asarray(quantized, dtype=np.complex128)
    K, M, N = _check_dims(q)
    nint = N * (K - 1)
    batch = q.shape[:-3]
    blocks = []
    for k in range(K):
        if K == 1:
            g_null = np.broadcast_to(np.eye(M, dtype=np.complex128), (*batch, M, M))
        else:
            phi = herm(_stack_others(q, k))
            g0 = svd(phi, "full").right
            g_null = g0[..., :, nint:]
        f_bd = herm(q[..., k, :, :]) @ g_null
        g1 = svd(f_bd, "compact").right[..., :, :N]
        blocks.append(g_null @ g1)
    return PrecoderSet(np.concatenate(blocks, axis=-1), N)


def rbd_precoder(quantized, alpha: float) -> PrecoderSet:
    """Regularized block diagonalization with regularization ``alpha``.

    ``F0 = H_k^H G0 (D0^H D0 + alpha I)^(-1/2)``; ``G2`` holds the ``N``
    dominant right singular vectors of ``F0``; ``F1 = G0 (D0^H D0 + alpha
    I)^(-1/2) G2`` and ``V_k = sqrt(N / ||F1||_F^2) F1``.
    """
    if alpha < 0:
        raise DomainError("alpha must be non-negative")
    if alpha == 0:
        raise DomainError("alpha = 0 makes D^H D + alpha I singular; use bd_precoder")
    q = np.asarray(quantized, dtype=np.complex128)
    K, M, N = _check_dims(q)
    batch = q.shape[:-3]
    blocks = []
    for k in range(K):
        if K == 1:
            g0 = np.broadcast_to(np.eye(M, dtype=np.complex128), (*batch, M, M))
            d2 = np.zeros((*batch, M))
        else:
            res = svd(herm(_stack_others(q, k)), "full")
            g0 = res.right
            d2 = np.zeros((*batch, M))
            d2[..., :res.singular.shape[-1]] = res.singular ** 2
        lam = 1.0 / np.sqrt(d2 + alpha)
        g0_scaled = g0 * lam[..., None, :]
        f0 = herm(q[..., k, :, :]) @ g0_scaled
        g2 = svd(f0, "compact").right[..., :, :N]
        f1 = g0_scaled @ g2
        power = np.sum(np.abs(f1) ** 2, axis=(-2, -1))
        blocks.append(f1 * np.sqrt(N / power)[..., None, None])
    return PrecoderSet(np.concatenate(blocks, axis=-1), N)


def default_alpha_grid(cfg: SystemConfig, P: float) -> list[float]:
    return [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, cfg.K * cfg.N * cfg.M / P]


# -- baseline pipeline ---------------------------------------------------------

def estimate_channels(ds: ChannelDataset, cfg: SystemConfig) -> np.ndarray:
    """MMSE channel estimates ``(S, K, M, N)`` from the stored pilot observations."""
    return mmse_estimate(PilotBlock(dft_pilots(cfg), ds.Y), cfg)


def quantize_channels(hbar: np.ndarray, codebooks: Sequence[Codebook]) -> np.ndarray:
    """Directions of ``hbar`` replaced by each user's nearest codeword."""
    K = hbar.shape[-3]
    if len(codebooks) != K:
        raise ConfigError(f"need {K} codebooks, got {len(codebooks)}")
    dirs = channel_direction(hbar)
    out = np.empty_like(dirs)
    for k, cb in enumerate(codebooks):
        idx = quantize_indices(dirs[..., k, :, :], cb)
        out[..., k, :, :] = cb.codewords[idx]
    return out


def baseline_precoders(scheme: str, csit: np.ndarray, alpha: Optional[float] = None) -> np.ndarray:
    if scheme == "bd":
        return bd_precoder(csit).V
    if scheme in ("rbd", "rbd-perfect-csit-bound"):
        if alpha is None:
            raise ConfigError(f"scheme {scheme} needs alpha")
        return rbd_precoder(csit, alpha).V
    raise ConfigError(f"unknown baseline scheme {scheme!r}; known: {SCHEMES}")


def baseline_rates(ds: ChannelDataset, cfg: SystemConfig, scheme: str, P: float,
                   codebooks: Optional[Sequence[Codebook]] = None, alpha: Optional[float] = None,
                   chunk: int = 10000, csit: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-draw per-user rates ``(S, K)`` of a baseline scheme on a dataset.

    ``rbd-perfect-csit-bound`` skips quantization and feeds the MMSE
    estimates straight into RBD. ``csit`` may carry precomputed transmitter
    CSI to avoid repeating estimation/quantization across alpha values.
    """
    if csit is None:
        csit = transmitter_csi(ds, cfg, scheme, codebooks)
    out = []
    for s in range(0, len(ds), chunk):
        v = baseline_precoders(scheme, csit[s:s + chunk], alpha)
        out.append(per_user_rates(ds.H[s:s + chunk], v, P))
    return np.concatenate(out, axis=0)


def transmitter_csi(ds: ChannelDataset, cfg: SystemConfig, scheme: str,
                    codebooks: Optional[Sequence[Codebook]] = None) -> np.ndarray:
    hbar = estimate_channels(ds, cfg)
    if scheme == "rbd-perfect-csit-bound":
        return hbar
    if codebooks is None:
        raise ConfigError(f"scheme {scheme} needs codebooks")
    return quantize_channels(hbar, codebooks)


def search_alpha(cfg: SystemConfig, codebooks: Optional[Sequence[Codebook]], P: float,
                 grid: Sequence[float], draws: int = 1000, seed: int = 0,
                 dataset: Optional[ChannelDataset] = None,
                 scheme: str = "rbd") -> tuple[float, np.ndarray]:
    """Brute-force search of the RBD regularization over ``grid``.

    Every grid point is evaluated on the same channel/noise draws (common
    random numbers). Returns the maximizing alpha (first one on ties) and
    the mean sum rate at every grid point.
    """
    grid = [float(a) for a in grid]
    if not grid:
        raise ConfigError("alpha grid is empty")
    if dataset is None:
        if draws < 1:
            raise ConfigError("draws must be at least 1")
        dataset = generate_dataset(cfg, draws, seed, "alpha")
    csit = transmitter_csi(dataset, cfg, scheme, codebooks)
    curve = np.array([
        baseline_rates(dataset, cfg, scheme, P, alpha=a, csit=csit).sum(axis=1).mean()
        for a in grid
    ])
    return grid[int(np.argmax(curve))], curve
