"""End-to-end losses, joint training with the auxiliary transmitter, evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .channel import ChannelDataset, SystemConfig, db_to_linear, dft_pilots, draw_channels, simulate_pilot_rx
from .errors import ConfigError, NumericError, TrainingDivergedError
from .linalg import rng_stream
from .neural import (AdamState, Checkpoint, LrSchedule, NetworkSet, adam_step, binarize, build_networks, fc_backward,
                     fc_forward, pack_received, precoder_head, precoder_head_backward, ste_grad,
                     transmitter_input)
from .precoder import RateReport, per_user_rates, rates_and_grad

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "TrainReport", "LossResult", "end_to_end", "loss_main", "loss_aux",
    "train_joint_kd", "evaluate", "evaluate_rates", "dnn_precoders", "MAX_SKIP_FRACTION",
]

MAX_SKIP_FRACTION = 1e-3
DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    iterations: int = 50000
    batch_size: int = 1000
    lr: float = 2e-4
    lr_boundaries: tuple = (30000, 40000)
    lr_factor: float = 0.1
    mode: str = "kd"                 # kd | no_kd
    power_mode: str = "fixed"        # fixed | sampled
    P_db: float = 10.0
    P_db_set: tuple = ()
    eval_every: int = 500
    seed: int = 0
    validation_size: int = 100000
    test_size: int = 100000
    final_loss_window: int = 100

    def __post_init__(self):
        self.lr_boundaries = tuple(int(b) for b in self.lr_boundaries)
        self.P_db_set = tuple(float(p) for p in self.P_db_set)
        self.validate()

    def validate(self) -> None:
        if self.iterations <= 0 or self.batch_size <= 0:
            raise ConfigError("iterations and batch_size must be positive")
        if any(b < 0 or b > self.iterations for b in self.lr_boundaries):
            raise ConfigError("learning-rate breakpoints must lie within [0, iterations]")
        if self.mode not in ("kd", "no_kd"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.power_mode not in ("fixed", "sampled"):
            raise ConfigError(f"unknown power mode {self.power_mode!r}")
        if self.power_mode == "sampled" and not self.P_db_set:
            raise ConfigError("sampled power mode needs P_db_set")
        if self.eval_every <= 0:
            raise ConfigError("eval_every must be positive")

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def desk_scale(cls, **kw) -> "TrainConfig":
        base = dict(iterations=5000, batch_size=256, lr_boundaries=(3000, 4000),
                    validation_size=10000, test_size=10000)
        base.update(kw)
        return cls(**base)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.lr_boundaries, self.lr_factor)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossResult:
    loss: float
    rates: np.ndarray            # per-draw sum rates of the kept samples
    grads_rx: list               # per user, MlpParams.arrays() order
    grads_tx: Optional[list]
    skipped: int = 0

    def flat_rx(self) -> list:
        return [g for user in self.grads_rx for g in user]


def _forward_receivers(nets: NetworkSet, Y):
    us, caches = [], []
    for k, rx in enumerate(nets.receivers):
        u, cache = fc_forward(rx, pack_received(Y[:, k]))
        us.append(u)
        caches.append(cache)
    return us, caches


def end_to_end(nets: NetworkSet, tx, H, Y, P: float, feature: str = "hard",
               need_grad: bool = True) -> LossResult:
    """Loss ``-mean sum rate`` through receivers, a transmitter and the rate.

    ``feature`` selects what the transmitter consumes from each receiver:
    ``"hard"`` sign(tanh(u)) with the straight-through backward rule,
    ``"tanh"`` tanh(u) with the same backward rule (a smooth twin of the
    hard path whose gradient is exact), ``"raw"`` u itself with exact
    gradients (auxiliary path).
    """
    H = np.asarray(H)
    Y = np.asarray(Y)
    b, K, M, N = H.shape
    if b == 0:
        raise ConfigError("empty batch")
    us, caches = _forward_receivers(nets, Y)
    if feature == "hard":
        feats = [binarize(u) for u in us]
    elif feature == "tanh":
        feats = [np.tanh(u) for u in us]
    elif feature == "raw":
        feats = us
    else:
        raise ValueError(f"unknown feature mode {feature!r}")
    out, tx_cache = fc_forward(tx, transmitter_input(feats, P))
    v, head_cache = precoder_head(out, M, N * K)

    ok = np.all(np.isfinite(out), axis=1)
    skipped = int(b - ok.sum())
    if skipped:
        if skipped > MAX_SKIP_FRACTION * b:
            raise NumericError(f"{skipped} of {b} samples produced non-finite precoders")
        log.warning("skipping %d non-finite samples", skipped)
        v = np.where(ok[:, None, None], v, 0.0)
    if need_grad:
        rates, gv = rates_and_grad(H, v, P)
    else:
        rates, gv = per_user_rates(H, v, P), None
    per_draw = rates.sum(axis=1)[ok]
    loss = -float(per_draw.mean())
    if not need_grad:
        return LossResult(loss, per_draw, [], None, skipped)

    # d loss / d V, with skipped samples contributing nothing
    gv = -gv * (ok[:, None, None] / ok.sum())
    g_out = precoder_head_backward(gv, head_cache)
    g_tx, g_in = fc_backward(tx, tx_cache, g_out)
    B = us[0].shape[1]
    grads_rx = []
    for k, rx in enumerate(nets.receivers):
        g_feat = g_in[:, k * B:(k + 1) * B]
        g_u = g_feat if feature == "raw" else ste_grad(g_feat, us[k])
        g_rx, _ = fc_backward(rx, caches[k], g_u, need_input_grad=False)
        grads_rx.append(g_rx)
    return LossResult(loss, per_draw, grads_rx, g_tx, skipped)


def loss_main(nets: NetworkSet, H, Y, P: float, need_grad: bool = True, hard: bool = True) -> LossResult:
    """Main-path loss; gradients use the straight-through rule at the binarizer."""
    return end_to_end(nets, nets.transmitter, H, Y, P, "hard" if hard else "tanh", need_grad)


def loss_aux(nets: NetworkSet, H, Y, P: float, need_grad: bool = True) -> LossResult:
    """Auxiliary-path loss: the auxiliary transmitter reads ``u`` directly (exact gradients)."""
    return end_to_end(nets, nets.auxiliary, H, Y, P, "raw", need_grad)


def dnn_precoders(nets: NetworkSet, Y, P: float, M: int, N: int) -> np.ndarray:
    """Deployed (hard-bit) precoders for pilot blocks ``Y (batch, K, N, L)``."""
    us, _ = _forward_receivers(nets, Y)
    out, _ = fc_forward(nets.transmitter, transmitter_input([binarize(u) for u in us], P))
    return precoder_head(out, M, N * len(us))[0]


def evaluate_rates(nets: NetworkSet, ds: ChannelDataset, P: float, chunk: int = 2000) -> np.ndarray:
    """Per-draw per-user rates ``(S, K)`` of the hard path."""
    _, K, M, N = ds.H.shape
    out = []
    for s in range(0, len(ds), chunk):
        v = dnn_precoders(nets, ds.Y[s:s + chunk], P, M, N)
        out.append(per_user_rates(ds.H[s:s + chunk], v, P))
    return np.concatenate(out, axis=0)


def evaluate(model, ds: ChannelDataset, P_db_list: Sequence[float], system: Optional[SystemConfig] = None,
             chunk: int = 2000) -> list[RateReport]:
    """Mean sum rate of a checkpoint (or bare NetworkSet) per power in dB."""
    if isinstance(model, Checkpoint):
        nets = model.nets
        sys_ = model.system
        if system is not None and (system.M, system.N, system.K, system.B, system.L) != \
                (sys_.M, sys_.N, sys_.K, sys_.B, sys_.L):
            raise ConfigError("checkpoint was trained for a different system configuration")
    else:
        nets = model
        sys_ = system
    _, K, M, N = ds.H.shape
    if sys_ is not None and (K, M, N) != (sys_.K, sys_.M, sys_.N):
        raise ConfigError(f"dataset shape (K, M, N) = {(K, M, N)} does not match the model")
    if len(nets.receivers) != K:
        raise ConfigError("model and dataset disagree on the number of users")
    return [RateReport.from_draws(evaluate_rates(nets, ds, float(db_to_linear(p)), chunk), float(db_to_linear(p)))
            for p in P_db_list]


@dataclass
class TrainReport:
    loss_curve: list = field(default_factory=list)          # (iteration, loss, lr)
    aux_loss_curve: list = field(default_factory=list)      # (iteration, loss)
    validation_curve: list = field(default_factory=list)    # (iteration, sum rate)
    best_checkpoint: Optional[Checkpoint] = None
    best_iteration: int = -1
    final_loss: float = float("nan")
    final_checkpoint: Optional[Checkpoint] = None

    @property
    def best_validation(self) -> float:
        return max(v for _, v in self.validation_curve)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "loss_curve.csv", "w") as fh:
            fh.write("iteration,loss,lr\n")
            for it, loss, lr in self.loss_curve:
                fh.write(f"{it},{loss!r},{lr!r}\n")
        with open(out / "validation.csv", "w") as fh:
            fh.write("iteration,sum_rate\n")
            for it, v in self.validation_curve:
                fh.write(f"{it},{v!r}\n")


Hook = Callable[[str, int, NetworkSet], None]


def _param_groups(nets: NetworkSet):
    return nets.receiver_arrays() + nets.auxiliary.arrays(), nets.receiver_arrays() + nets.transmitter.arrays()


def train_joint_kd(cfg: TrainConfig, system: SystemConfig, validation: Optional[ChannelDataset] = None, *,
                   hook: Optional[Hook] = None, out_dir=None, nets: Optional[NetworkSet] = None) -> TrainReport:
    """Joint training with the auxiliary transmitter (``mode="kd"``) or plain STE (``"no_kd"``).

    Every iteration draws a fresh mini-batch. In ``kd`` mode the receivers
    and the auxiliary transmitter first take an Adam step on the auxiliary
    loss, then the receivers and the main transmitter take an Adam step on
    the main loss over the same batch. The two steps keep separate Adam
    moments. Every ``eval_every`` iterations (and at the end) the hard path
    is scored on ``validation`` and the best model is kept.

    ``hook(step, iteration, nets)`` is called after each update with step
    ``"aux"`` or ``"main"``.
    """
    pilots = dft_pilots(system)
    if nets is None:
        nets = build_networks(system, rng_stream(cfg.seed, "init"))
    ch_rng = rng_stream(cfg.seed, "channel")
    nz_rng = rng_stream(cfg.seed, "noise")
    sh_rng = rng_stream(cfg.seed, "shuffle")
    aux_params, main_params = _param_groups(nets)
    opt_aux = AdamState.zeros_like(aux_params, cfg.schedule())
    opt_main = AdamState.zeros_like(main_params, cfg.schedule())

    report = TrainReport()
    best = -np.inf
    for it in range(cfg.iterations):
        H = draw_channels(system, ch_rng, (cfg.batch_size,))
        Y = simulate_pilot_rx(H, pilots, system, nz_rng).received
        if cfg.power_mode == "fixed":
            p_db = cfg.P_db
        else:
            p_db = cfg.P_db_set[int(sh_rng.integers(len(cfg.P_db_set)))]
        P = float(db_to_linear(p_db))

        if cfg.mode == "kd":
            res = loss_aux(nets, H, Y, P)
            _check_divergence(res.loss, it, "aux", out_dir)
            adam_step(aux_params, res.flat_rx() + res.grads_tx, opt_aux)
            report.aux_loss_curve.append((it, res.loss))
            if hook:
                hook("aux", it, nets)
        lr = opt_main.lr_schedule(opt_main.step_count)
        res = loss_main(nets, H, Y, P)
        _check_divergence(res.loss, it, "main", out_dir)
        adam_step(main_params, res.flat_rx() + res.grads_tx, opt_main)
        report.loss_curve.append((it, res.loss, lr))
        if hook:
            hook("main", it, nets)

        last = it == cfg.iterations - 1
        if validation is not None and ((it + 1) % cfg.eval_every == 0 or last):
            val_p = float(db_to_linear(cfg.P_db))
            score = float(evaluate_rates(nets, validation, val_p).sum(axis=1).mean())
            report.validation_curve.append((it + 1, score))
            log.info("iter %d loss %.5f validation sum rate %.5f", it + 1, res.loss, score)
            if score > best:
                best = score
                report.best_iteration = it + 1
                report.best_checkpoint = _snapshot(nets, system, cfg, it + 1, opt_aux, opt_main, copy=True)

    window = report.loss_curve[-cfg.final_loss_window:]
    report.final_loss = float(np.mean([loss for _, loss, _ in window]))
    report.final_checkpoint = _snapshot(nets, system, cfg, cfg.iterations, opt_aux, opt_main, copy=False)
    if report.best_checkpoint is None:
        report.best_checkpoint = report.final_checkpoint
    if out_dir is not None:
        report.write(out_dir)
    return report


def _snapshot(nets, system, cfg, iteration, opt_aux, opt_main, copy: bool) -> Checkpoint:
    opts = {"main": opt_main}
    if cfg.mode == "kd":
        opts = {"aux": opt_aux, "main": opt_main}
    if copy:
        nets = nets.copy()
        opts = {k: v.copy() for k, v in opts.items()}
    meta = {"iteration": iteration, "train_config": cfg.to_dict(), "P_db": cfg.P_db}
    return Checkpoint(replace(system, P=float(db_to_linear(cfg.P_db))), nets, opts, meta)


def _check_divergence(loss: float, it: int, step: str, out_dir) -> None:
    if np.isfinite(loss) and abs(loss) <= DIVERGENCE_LIMIT:
        return
    msg = f"training diverged at iteration {it} ({step} step): loss = {loss}"
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "divergence.json", "w") as fh:
            json.dump({"iteration": it, "step": step, "loss": repr(loss)}, fh)
    raise TrainingDivergedError(msg)
