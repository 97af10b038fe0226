"""Fully connected networks with hand-written backpropagation and Adam.

Activations are row-major batches: a layer maps ``(batch, D_{n-1})`` to
``(batch, D_n)`` through ``z @ W.T + b`` with ``W`` of shape
``(D_n, D_{n-1})``. Hidden layers use ReLU; the last layer is linear unless
``final_linear=False``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .channel import SystemConfig
from .errors import FormatError

__all__ = [
    "MlpParams", "NetworkSet", "FcCache", "LrSchedule", "AdamState",
    "init_params", "fc_forward", "fc_backward", "binarize", "ste_grad",
    "pack_received", "receiver_forward", "power_feature", "transmitter_input",
    "precoder_head", "precoder_head_backward", "transmitter_forward",
    "adam_step", "receiver_dims", "transmitter_dims", "build_networks",
    "save_checkpoint", "load_checkpoint", "Checkpoint",
]

# Zero-norm precoder columns are replaced by this constant vector before
# normalization (probability-zero event at random init).
COLUMN_EPS = 1e-12

POWER_ENCODING_DB10 = 1  # feature = P_dB / 10


@dataclass
class MlpParams:
    weights: list
    biases: list

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in ``[W1, b1, W2, b2, ...]`` order (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def validate(self) -> None:
        for n, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {n + 1}: bias {b.shape} does not match weight {w.shape}")
            if n and w.shape[1] != self.weights[n - 1].shape[0]:
                raise ValueError(f"layer {n + 1}: input width {w.shape[1]} mismatch")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {n + 1}: non-finite parameters")


def init_params(dims: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """He-normal weights (variance 2 / fan_in) and zero biases."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"invalid layer dims {dims}")
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        ws.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs)


@dataclass
class FcCache:
    inputs: list          # input to every layer
    pre: list             # pre-activation of every layer
    final_linear: bool


def fc_forward(params: MlpParams, z0, final_linear: bool = True):
    """Forward pass; returns ``(output, cache)``. 1-D input is treated as a batch of one."""
    z = np.asarray(z0, dtype=np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    if z.shape[-1] != params.weights[0].shape[1]:
        raise ValueError(f"input width {z.shape[-1]} does not match D_0 = {params.weights[0].shape[1]}")
    inputs, pre = [], []
    last = len(params.weights) - 1
    for n, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(z)
        a = z @ w.T + b
        pre.append(a)
        z = a if (n == last and final_linear) else np.maximum(a, 0.0)
    return (z[0] if squeeze else z), FcCache(inputs, pre, final_linear)


def fc_backward(params: MlpParams, cache: Optional[FcCache], grad_out, need_input_grad: bool = True):
    """Reverse-mode pass.

    Returns ``(grads, grad_input)`` where ``grads`` follows
    :meth:`MlpParams.arrays` ordering.
    """
    if cache is None:
        raise ValueError("fc_backward needs the cache of a forward pass")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    nl = len(params.weights)
    grads: list = [None] * (2 * nl)
    if not cache.final_linear:
        g = g * (cache.pre[-1] > 0)
    for n in range(nl - 1, -1, -1):
        grads[2 * n] = g.T @ cache.inputs[n]
        grads[2 * n + 1] = g.sum(axis=0)
        if n == 0 and not need_input_grad:
            return grads, None
        g = g @ params.weights[n]
        if n > 0:
            g = g * (cache.pre[n - 1] > 0)
    return grads, g


# -- binarization --------------------------------------------------------------

def binarize(u) -> np.ndarray:
    """``sign(tanh(u))`` with ``sign(0) = +1``."""
    return np.where(np.tanh(u) >= 0, 1.0, -1.0)


def ste_grad(grad_bits, u) -> np.ndarray:
    """Straight-through backward rule: d sign(tanh(u))/du is replaced by 1 - tanh(u)^2."""
    t = np.tanh(u)
    return np.asarray(grad_bits) * (1.0 - t * t)


# -- receiver / transmitter ------------------------------------------------------

def pack_received(y) -> np.ndarray:
    """Stack columns of ``Y (..., N, L)`` first to last, then ``[Re; Im]``."""
    y = np.asarray(y)
    r = np.swapaxes(y, -1, -2).reshape(*y.shape[:-2], -1)
    return np.concatenate([r.real, r.imag], axis=-1)


def receiver_forward(params: MlpParams, y):
    """Feedback bits and pre-binarization outputs ``u`` for pilot block(s) ``Y``."""
    u, _ = fc_forward(params, pack_received(y))
    return binarize(u), u


def power_feature(P: float) -> float:
    return float(np.log10(P))  # P_dB / 10


def transmitter_input(feedback: Sequence[np.ndarray], P: float) -> np.ndarray:
    """Concatenate per-user feedback ``(batch, B)`` with the power feature column."""
    fb = [np.atleast_2d(np.asarray(f, dtype=np.float64)) for f in feedback]
    col = np.full((fb[0].shape[0], 1), power_feature(P))
    return np.concatenate(fb + [col], axis=1)


@dataclass
class HeadCache:
    v: np.ndarray
    norms: np.ndarray


def precoder_head(out, M: int, NK: int):
    """Map ``2*M*NK`` reals to an ``M x NK`` complex matrix with unit-norm columns.

    The first ``M*NK`` values are real parts and the rest imaginary parts,
    both filling the matrix column-major (entry ``(r, c)`` at ``c*M + r``).
    """
    out = np.atleast_2d(out)
    mnk = M * NK
    w = (out[:, :mnk] + 1j * out[:, mnk:]).reshape(-1, NK, M).swapaxes(1, 2)
    norms = np.sqrt(np.sum(w.real ** 2 + w.imag ** 2, axis=1, keepdims=True))
    dead = norms == 0
    if np.any(dead):
        w = np.where(dead, COLUMN_EPS, w)
        norms = np.where(dead, COLUMN_EPS * np.sqrt(M), norms)
    v = w / norms
    return v, HeadCache(v, norms)


def precoder_head_backward(grad_v, cache: HeadCache) -> np.ndarray:
    """Gradient w.r.t. the raw network output given ``dL/dRe(V) + j dL/dIm(V)``."""
    v, n = cache.v, cache.norms
    proj = np.sum((v.conj() * grad_v).real, axis=1, keepdims=True)
    gw = (grad_v - proj * v) / n
    gw = gw.swapaxes(1, 2).reshape(gw.shape[0], -1)
    return np.concatenate([gw.real, gw.imag], axis=1)


def transmitter_forward(params: MlpParams, feedback: Sequence[np.ndarray], P: float, M: int, N: int):
    """Precoders ``(batch, M, N*K)`` from per-user feedback vectors."""
    K = len(feedback)
    out, _ = fc_forward(params, transmitter_input(feedback, P))
    v, _ = precoder_head(out, M, N * K)
    return v


# -- network set ----------------------------------------------------------------

def receiver_dims(cfg: SystemConfig) -> list[int]:
    M, N = cfg.M, cfg.N
    return [2 * cfg.L * N, 40 * M * N, 30 * M * N, 20 * M * N, cfg.B]


def transmitter_dims(cfg: SystemConfig) -> list[int]:
    M, N, K = cfg.M, cfg.N, cfg.K
    return [K * cfg.B + 1, 20 * M * N * K, 30 * M * N * K, 40 * M * N * K, 2 * M * N * K]


@dataclass
class NetworkSet:
    receivers: list
    transmitter: MlpParams
    auxiliary: MlpParams

    def all_networks(self) -> list[MlpParams]:
        return [*self.receivers, self.transmitter, self.auxiliary]

    def receiver_arrays(self) -> list[np.ndarray]:
        return [a for r in self.receivers for a in r.arrays()]

    def copy(self) -> "NetworkSet":
        return NetworkSet([r.copy() for r in self.receivers], self.transmitter.copy(), self.auxiliary.copy())


def build_networks(cfg: SystemConfig, rng: np.random.Generator) -> NetworkSet:
    rx = [init_params(receiver_dims(cfg), rng) for _ in range(cfg.K)]
    tx = init_params(transmitter_dims(cfg), rng)
    aux = init_params(transmitter_dims(cfg), rng)
    return NetworkSet(rx, tx, aux)


# -- Adam --------------------------------------------------------------------------

@dataclass
class LrSchedule:
    """Piecewise-constant rate: ``base * factor**(#boundaries <= step)``."""

    base: float = 2e-4
    boundaries: tuple = (30000, 40000)
    factor: float = 0.1

    def __call__(self, step: int) -> float:
        drops = sum(1 for b in self.boundaries if step >= b)
        return self.base * self.factor ** drops


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    lr_schedule: LrSchedule = field(default_factory=LrSchedule)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray], schedule: Optional[LrSchedule] = None) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                   0, schedule or LrSchedule())

    def copy(self) -> "AdamState":
        return AdamState([m.copy() for m in self.first_moment], [v.copy() for v in self.second_moment],
                         self.step_count, self.lr_schedule, self.beta1, self.beta2, self.eps)


def _adam_numpy(p, g, m, v, b1, b2, step_scale, c2, eps):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    if step_scale == 0.0:
        return
    denom = np.sqrt(v / c2)
    denom += eps
    p -= step_scale * m / denom


try:
    import numba

    @numba.njit(cache=True)
    def _adam_fused(p, g, m, v, b1, b2, step_scale, c2, eps):
        # same operation order as _adam_numpy, one memory pass
        for i in range(p.size):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * (gi * gi)
            m[i] = mi
            v[i] = vi
            if step_scale != 0.0:
                p[i] -= step_scale * mi / (np.sqrt(vi / c2) + eps)
except ImportError:  # pragma: no cover
    _adam_fused = None


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              fused: bool = True):
    """One Adam update, in place. Returns ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and optimizer state differ in length")
    lr = state.lr_schedule(state.step_count)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step_scale = lr / (1.0 - b1 ** t)
    c2 = 1.0 - b2 ** t
    kernel = _adam_fused if (fused and _adam_fused is not None) else None
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if kernel is not None and p.flags.c_contiguous:
            kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                   m.reshape(-1), v.reshape(-1), b1, b2, step_scale, c2, state.eps)
        else:
            _adam_numpy(p, g, m, v, b1, b2, step_scale, c2, state.eps)
    return params, state


# -- checkpoint file ------------------------------------------------------------------
# "MKD1", version, system scalars, power encoding, networks (layer count, dims,
# W/b doubles), Adam states, then a JSON metadata blob.

CKPT_MAGIC = b"MKD1"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    system: SystemConfig
    nets: NetworkSet
    optimizers: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    power_encoding: int = POWER_ENCODING_DB10


def _w_u32(fh, *vals):
    fh.write(struct.pack(f"<{len(vals)}I", *vals))


def _r(fh, fmt):
    size = struct.calcsize(fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError("truncated checkpoint")
    return struct.unpack(fmt, buf)


def _w_array(fh, a):
    fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _r_array(fh, shape):
    n = int(np.prod(shape))
    buf = fh.read(8 * n)
    if len(buf) != 8 * n:
        raise FormatError("truncated checkpoint array")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    s = ckpt.system
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    _w_u32(buf, CKPT_VERSION, s.M, s.N, s.K, s.B, s.L)
    buf.write(struct.pack("<ddd", s.P_train, s.P, np.nan if s.alpha_bd is None else s.alpha_bd))
    _w_u32(buf, ckpt.power_encoding)
    nets = ckpt.nets.all_networks()
    _w_u32(buf, len(nets))
    for net in nets:
        dims = net.dims
        _w_u32(buf, len(net.weights), *dims)
        for w, b in zip(net.weights, net.biases):
            _w_array(buf, w)
            _w_array(buf, b)
    _w_u32(buf, len(ckpt.optimizers))
    for name, st in ckpt.optimizers.items():
        raw = name.encode()
        _w_u32(buf, len(raw))
        buf.write(raw)
        sch = st.lr_schedule
        buf.write(struct.pack("<Qddddd", st.step_count, st.beta1, st.beta2, st.eps, sch.base, sch.factor))
        _w_u32(buf, len(sch.boundaries))
        buf.write(struct.pack(f"<{len(sch.boundaries)}Q", *sch.boundaries))
        _w_u32(buf, len(st.first_moment))
        for m, v in zip(st.first_moment, st.second_moment):
            _w_u32(buf, m.ndim, *m.shape)
            _w_array(buf, m)
            _w_array(buf, v)
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    _w_u32(buf, len(meta))
    buf.write(meta)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise FormatError("bad checkpoint magic")
        version, M, N, K, B, L = _r(fh, "<6I")
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pt, p, alpha = _r(fh, "<ddd")
        system = SystemConfig(M, N, K, B, L, pt, p, None if np.isnan(alpha) else alpha)
        (enc,) = _r(fh, "<I")
        (count,) = _r(fh, "<I")
        nets = []
        for _ in range(count):
            (layers,) = _r(fh, "<I")
            dims = _r(fh, f"<{layers + 1}I")
            ws, bs = [], []
            for din, dout in zip(dims[:-1], dims[1:]):
                ws.append(_r_array(fh, (dout, din)))
                bs.append(_r_array(fh, (dout,)))
            nets.append(MlpParams(ws, bs))
        if count != K + 2:
            raise FormatError(f"checkpoint holds {count} networks, expected K + 2 = {K + 2}")
        optimizers = {}
        (nopt,) = _r(fh, "<I")
        for _ in range(nopt):
            (ln,) = _r(fh, "<I")
            name = fh.read(ln).decode()
            step, b1, b2, eps, base, factor = _r(fh, "<Qddddd")
            (nb,) = _r(fh, "<I")
            bounds = _r(fh, f"<{nb}Q") if nb else ()
            (na,) = _r(fh, "<I")
            ms, vs = [], []
            for _ in range(na):
                (nd,) = _r(fh, "<I")
                shape = _r(fh, f"<{nd}I")
                ms.append(_r_array(fh, shape))
                vs.append(_r_array(fh, shape))
            optimizers[name] = AdamState(ms, vs, step, LrSchedule(base, tuple(bounds), factor), b1, b2, eps)
        (lm,) = _r(fh, "<I")
        meta = json.loads(fh.read(lm).decode())
        if fh.read(1):
            raise FormatError("trailing bytes in checkpoint")
    ns = NetworkSet(nets[:K], nets[K], nets[K + 1])
    return Checkpoint(system, ns, optimizers, meta, enc)
