"""Rayleigh MU-MIMO channels, DFT pilots and MMSE channel estimation.

Array conventions (leading batch axes ``...`` are always allowed):

* channels ``H``: ``(..., K, M, N)``; user ``k`` receives ``H_k^H x``.
* pilots: ``(M, L)``, column ``l`` is the pilot vector ``p_l``.
* received pilot blocks ``Y``: ``(..., K, N, L)``.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, DegenerateChannelError, FormatError
from .linalg import RANK_RTOL, complex_gaussian, herm, rng_stream, svd

__all__ = [
    "SystemConfig", "PilotBlock", "ChannelDataset", "db_to_linear",
    "linear_to_db", "dft_pilots", "draw_channels", "simulate_pilot_rx",
    "mmse_estimate", "channel_direction", "generate_dataset",
    "save_dataset", "load_dataset",
]


def db_to_linear(p_db):
    return 10.0 ** (np.asarray(p_db, dtype=float) / 10.0)


def linear_to_db(p):
    return 10.0 * np.log10(p)


@dataclass(frozen=True)
class SystemConfig:
    """Scenario scalars. ``P`` is the linear data power, ``P_train`` the pilot power."""

    M: int
    N: int
    K: int
    B: int
    L: int
    P_train: float = 10.0
    P: float = 10.0
    alpha_bd: Optional[float] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        M, N, K = self.M, self.N, self.K
        if min(M, N, K, self.L) < 1:
            raise ConfigError("M, N, K, L must be positive")
        if M % N != 0 or M <= N:
            raise ConfigError(f"M must be a multiple of N with M > N (M={M}, N={N})")
        if K > M // N:
            raise ConfigError(f"K={K} exceeds M/N={M // N}")
        if self.B < 1:
            raise ConfigError("B must be at least 1")
        if self.P_train <= 0 or self.P <= 0:
            raise ConfigError("powers must be positive")
        if self.alpha_bd is not None and self.alpha_bd < 0:
            raise ConfigError("alpha_bd must be non-negative")

    @property
    def P_db(self) -> float:
        return float(linear_to_db(self.P))

    def with_power_db(self, p_db: float) -> "SystemConfig":
        return replace(self, P=float(db_to_linear(p_db)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        d = dict(d)
        if "P_db" in d:
            d["P"] = float(db_to_linear(d.pop("P_db")))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown system config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class PilotBlock:
    pilots: np.ndarray
    received: np.ndarray


@dataclass
class ChannelDataset:
    """Fixed set of channel draws together with the pilot observations."""

    H: np.ndarray
    Y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.H.shape[0]

    def subset(self, sl) -> "ChannelDataset":
        return ChannelDataset(self.H[sl], self.Y[sl], dict(self.meta))


def dft_pilots(cfg: SystemConfig) -> np.ndarray:
    """Entry ``(i, l)`` is ``exp(j 2 pi i l / L) / sqrt(M)`` (zero-based i, l)."""
    i = np.arange(cfg.M)[:, None]
    l = np.arange(cfg.L)[None, :]
    return np.exp(2j * np.pi * i * l / cfg.L) / np.sqrt(cfg.M)


def draw_channels(cfg: SystemConfig, rng: np.random.Generator, batch: tuple[int, ...] = ()) -> np.ndarray:
    return complex_gaussian(cfg.M, cfg.N, rng, batch=(*batch, cfg.K))


def simulate_pilot_rx(h, pilots, cfg: SystemConfig, rng: np.random.Generator,
                      noise_var: float = 1.0) -> PilotBlock:
    """``Y_k = sqrt(P_train) H_k^H pilots + noise``, noise CN(0, noise_var).

    ``noise_var=0`` is a test hook for the noiseless case (no RNG draws).
    """
    h = np.asarray(h, dtype=np.complex128)
    pilots = np.asarray(pilots, dtype=np.complex128)
    if h.shape[-2] != pilots.shape[0]:
        raise ConfigError(f"channel has {h.shape[-2]} transmit antennas, pilots {pilots.shape[0]}")
    y = np.sqrt(cfg.P_train) * (herm(h) @ pilots)
    if noise_var > 0:
        y = y + np.sqrt(noise_var) * complex_gaussian(y.shape[-2], y.shape[-1], rng, batch=y.shape[:-2])
    return PilotBlock(pilots, y)


def _check_orthonormal_pilots(pilots: np.ndarray, tol: float = 1e-10) -> None:
    M, L = pilots.shape
    if L != M:
        raise ConfigError(f"MMSE estimation implemented for L = M only (L={L}, M={M})")
    if np.max(np.abs(pilots @ herm(pilots) - np.eye(M))) > tol:
        raise ConfigError("pilots are not orthonormal")


def mmse_estimate(block: PilotBlock, cfg: SystemConfig) -> np.ndarray:
    """Per-entry LMMSE channel estimate ``sqrt(Pt)/(1+Pt) * pilots @ Y^H``.

    With orthonormal pilots ``pilots @ Y^H = sqrt(Pt) H + W`` where ``W`` has
    i.i.d. CN(0, 1) entries, so the scalar LMMSE gain applies entrywise and
    the per-entry MSE is ``1 / (1 + Pt)``.
    """
    pilots = np.asarray(block.pilots)
    _check_orthonormal_pilots(pilots)
    pt = cfg.P_train
    return (np.sqrt(pt) / (1.0 + pt)) * (pilots @ herm(np.asarray(block.received)))


def channel_direction(hbar, rtol: float = RANK_RTOL) -> np.ndarray:
    """Semi-unitary left factor of the compact SVD of ``hbar`` (works on stacks)."""
    res = svd(hbar, "compact")
    s = res.singular
    n = np.asarray(hbar).shape[-1]
    if np.any(s[..., n - 1] <= rtol * s[..., 0]):
        raise DegenerateChannelError("estimated channel is rank deficient")
    return res.left[..., :, :n]


def generate_dataset(cfg: SystemConfig, count: int, seed: int, purpose: str = "test",
                     pilots: Optional[np.ndarray] = None) -> ChannelDataset:
    """Draw ``count`` channel realizations plus their pilot observations.

    Channels come from stream ``(purpose, 0)`` and pilot noise from
    ``(purpose, 1)`` of ``seed``, so validation and test sets never share
    draws with training.
    """
    if pilots is None:
        pilots = dft_pilots(cfg)
    h = draw_channels(cfg, rng_stream(seed, purpose, 0), (count,))
    block = simulate_pilot_rx(h, pilots, cfg, rng_stream(seed, purpose, 1))
    return ChannelDataset(h, block.received, {"seed": seed, "purpose": purpose})


# -- CHD1 dataset file -------------------------------------------------------
# header: "CHD1", M, N, K (u32), count (u64); then per sample the K channel
# CMX1 payloads (user-major) followed by the K pilot-observation payloads.

CHD_MAGIC = b"CHD1"


def _payload_dtype(rows: int, cols: int) -> np.dtype:
    return np.dtype([("magic", "S4"), ("rows", "<u4"), ("cols", "<u4"),
                     ("data", "<f8", (rows, cols, 2))])


def _sample_dtype(M: int, N: int, K: int, L: Optional[int]) -> np.dtype:
    fields = [("h", _payload_dtype(M, N), (K,))]
    if L is not None:
        fields.append(("y", _payload_dtype(N, L), (K,)))
    return np.dtype(fields)


def save_dataset(path, ds: ChannelDataset) -> None:
    S, K, M, N = ds.H.shape
    L = ds.Y.shape[-1] if ds.Y is not None else None
    rec = np.zeros(S, dtype=_sample_dtype(M, N, K, L))
    rec["h"]["magic"] = b"CMX1"
    rec["h"]["rows"], rec["h"]["cols"] = M, N
    rec["h"]["data"][..., 0] = ds.H.real
    rec["h"]["data"][..., 1] = ds.H.imag
    if L is not None:
        rec["y"]["magic"] = b"CMX1"
        rec["y"]["rows"], rec["y"]["cols"] = N, L
        rec["y"]["data"][..., 0] = ds.Y.real
        rec["y"]["data"][..., 1] = ds.Y.imag
    with open(path, "wb") as fh:
        fh.write(CHD_MAGIC)
        fh.write(struct.pack("<IIIQ", M, N, K, S))
        fh.write(rec.tobytes())


def load_dataset(path) -> ChannelDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHD_MAGIC:
        raise FormatError(f"bad dataset magic {raw[:4]!r}")
    M, N, K, S = struct.unpack("<IIIQ", raw[4:24])
    body = raw[24:]
    h_size = _sample_dtype(M, N, K, None).itemsize * S
    L = None
    if len(body) != h_size:
        # pilot payloads present; read L from the first one
        first_y = 24 + _payload_dtype(M, N).itemsize * K
        rows, L = struct.unpack("<II", raw[first_y + 4:first_y + 12])
        if rows != N:
            raise FormatError("unexpected payload layout in dataset file")
    dt = _sample_dtype(M, N, K, L)
    if len(body) != dt.itemsize * S:
        raise FormatError("dataset file size does not match its header")
    rec = np.frombuffer(body, dtype=dt, count=S)
    if np.any(rec["h"]["magic"] != b"CMX1"):
        raise FormatError("corrupt channel payload")
    H = rec["h"]["data"][..., 0] + 1j * rec["h"]["data"][..., 1]
    Y = None
    if L is not None:
        Y = rec["y"]["data"][..., 0] + 1j * rec["y"]["data"][..., 1]
    return ChannelDataset(H, Y, {"path": str(path)})
