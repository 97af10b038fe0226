"""Experiment orchestration: shared test sets, per-scheme evaluation, CSV and SVG output."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .channel import ChannelDataset, SystemConfig, db_to_linear, generate_dataset
from .codebook import CHORDAL, Codebook, load_codebook, save_codebook, train_user_codebook
from .errors import ConfigError
from .neural import Checkpoint, load_checkpoint, save_checkpoint
from .precoder import baseline_rates, default_alpha_grid, search_alpha, transmitter_csi
from .training import TrainConfig, evaluate_rates, train_joint_kd

log = logging.getLogger(__name__)

__all__ = [
    "Seeds", "ExperimentSpec", "load_spec", "run_experiment", "run_scenario", "fixed_budget_systems",
    "worker_count", "codebook_path", "load_or_build_codebooks", "plot_curves", "plot_loss_curve",
    "ALL_SCHEMES", "DNN_SCHEMES", "RESULT_COLUMNS",
]

BASELINE_SCHEMES = ("bd", "rbd", "rbd-perfect-csit-bound")
DNN_SCHEMES = ("dnn-kd", "dnn-no-kd")
ALL_SCHEMES = BASELINE_SCHEMES + DNN_SCHEMES
RESULT_COLUMNS = ("scheme", "P_dB", "sum_rate", "stderr", "draws", "seed")
SCENARIOS = ("power-sweep", "fixed-budget")


def worker_count(requested: Optional[int] = None) -> int:
    """Worker threads: ``requested`` (or the CPU count) capped by ``MKD_THREADS``."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("MKD_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"MKD_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


@dataclass(frozen=True)
class Seeds:
    """Seeds of the four independent randomness sources of an experiment."""

    test: int = 0       # shared test channels and pilot noise
    codebook: int = 0   # codebook training sets and initialization
    alpha: int = 0      # draws used by the regularization search
    train: int = 0      # network init, training batches, minibatch power draws

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "Seeds":
        d = dict(d or {})
        unknown = set(d) - {"test", "codebook", "alpha", "train"}
        if unknown:
            raise ConfigError(f"unknown seed streams: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class ExperimentSpec:
    scenario: str
    system: SystemConfig
    schemes: tuple
    snr_db: tuple
    output_dir: Path
    draws: int = 100000
    seeds: Seeds = field(default_factory=Seeds)
    codebook_dir: Optional[Path] = None
    checkpoints: dict = field(default_factory=dict)   # scheme -> {P_dB: path}
    alpha: Optional[float] = None                     # fixed regularization; grid search if None
    alpha_draws: int = 2000
    build_missing: bool = False
    train: dict = field(default_factory=dict)         # TrainConfig overrides on the desk preset
    dump_draws: bool = False

    def __post_init__(self):
        self.schemes = tuple(self.schemes)
        self.snr_db = tuple(float(p) for p in self.snr_db)
        self.output_dir = Path(self.output_dir)
        if self.codebook_dir is not None:
            self.codebook_dir = Path(self.codebook_dir)
        self.checkpoints = {s: {float(p): Path(v) for p, v in m.items()} for s, m in self.checkpoints.items()}
        self.validate()

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; known: {SCENARIOS}")
        if not self.snr_db:
            raise ConfigError("snr_db list is empty")
        if not self.schemes:
            raise ConfigError("no schemes selected")
        bad = [s for s in self.schemes if s not in ALL_SCHEMES]
        if bad:
            raise ConfigError(f"unknown schemes {bad}; known: {ALL_SCHEMES}")
        if self.draws < 2:
            raise ConfigError("draws must be at least 2")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not self.build_missing and self.scenario == "power-sweep":
            for scheme in self.schemes:
                if scheme in DNN_SCHEMES:
                    for p in self.snr_db:
                        path = self.checkpoints.get(scheme, {}).get(p)
                        if path is None or not path.exists():
                            raise ConfigError(_missing_checkpoint_msg(scheme, p, path))

    def train_config(self, scheme: str, p_db: float) -> TrainConfig:
        mode = "kd" if scheme == "dnn-kd" else "no_kd"
        return TrainConfig.desk_scale(**{**self.train, "mode": mode, "P_db": p_db, "seed": self.seeds.train})


def _missing_checkpoint_msg(scheme, p_db, path) -> str:
    mode = "kd" if scheme == "dnn-kd" else "no-kd"
    where = f" at {path}" if path is not None else ""
    return (f"no checkpoint for {scheme} at {p_db:g} dB{where}; build one with "
            f"`mkd train --config <system.yaml> --mode {mode} --snr-db {p_db:g} --out-dir <dir>` "
            f"or set build_missing: true")


def _resolve(base: Path, p) -> Optional[Path]:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_spec(path, **overrides) -> ExperimentSpec:
    """Read an experiment spec from a YAML key-value file.

    Relative paths inside the file are taken relative to the file itself.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read experiment spec {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("experiment spec must be a mapping")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    base = path.parent
    known = {"scenario", "system", "schemes", "snr_db", "output_dir", "draws", "seeds", "codebook_dir",
             "checkpoints", "alpha", "alpha_draws", "build_missing", "train", "dump_draws"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
    for key in ("system", "schemes", "snr_db", "output_dir"):
        if key not in raw:
            raise ConfigError(f"experiment spec is missing {key!r}")
    ckpts = {s: {p: _resolve(base, v) for p, v in (m or {}).items()}
             for s, m in (raw.get("checkpoints") or {}).items()}
    return ExperimentSpec(
        scenario=raw.get("scenario", "power-sweep"),
        system=SystemConfig.from_dict(raw["system"]),
        schemes=raw["schemes"],
        snr_db=raw["snr_db"],
        output_dir=_resolve(base, raw["output_dir"]),
        draws=int(raw.get("draws", 100000)),
        seeds=Seeds.from_dict(raw.get("seeds")),
        codebook_dir=_resolve(base, raw.get("codebook_dir")),
        checkpoints=ckpts,
        alpha=raw.get("alpha"),
        alpha_draws=int(raw.get("alpha_draws", 2000)),
        build_missing=bool(raw.get("build_missing", False)),
        train=dict(raw.get("train") or {}),
        dump_draws=bool(raw.get("dump_draws", False)),
    )


def fixed_budget_systems(M: int = 8, total_bits: int = 24, **kw) -> list[SystemConfig]:
    """Systems with ``K = M/N`` users sharing ``B*K = total_bits`` feedback bits."""
    out = []
    n = 1
    while n < M:
        if M % n == 0:
            K = M // n
            if total_bits % K == 0:
                out.append(SystemConfig(M=M, N=n, K=K, B=total_bits // K, L=kw.get("L", M),
                                        P_train=kw.get("P_train", 10.0), P=kw.get("P", 10.0)))
        n *= 2
    return out


# -- prerequisites ------------------------------------------------------------------

def codebook_path(directory, user: int) -> Path:
    """File of user ``user`` (zero-based) inside a codebook directory."""
    return Path(directory) / f"user{user + 1}.gcb"


def load_or_build_codebooks(cfg: SystemConfig, directory, seed: int, build: bool = True,
                            workers: int = 1) -> list[Codebook]:
    """Per-user codebooks from ``directory``; missing ones are trained and saved when ``build``."""
    directory = Path(directory)
    missing = [k for k in range(cfg.K) if not codebook_path(directory, k).exists()]
    if missing and not build:
        k = missing[0]
        raise ConfigError(f"codebook {codebook_path(directory, k)} not found; build it with "
                          f"`mkd gen-codebook --config <system.yaml> --user {k + 1} --seed {seed} "
                          f"--out {codebook_path(directory, k)}`")
    if missing:
        directory.mkdir(parents=True, exist_ok=True)

        def build_one(k):
            cb = train_user_codebook(cfg, k, seed)
            save_codebook(codebook_path(directory, k), cb)

        with ThreadPoolExecutor(max_workers=max(1, min(workers, len(missing)))) as pool:
            list(pool.map(build_one, missing))
    books = [load_codebook(codebook_path(directory, k)) for k in range(cfg.K)]
    for k, cb in enumerate(books):
        if (cb.M, cb.N, cb.B) != (cfg.M, cfg.N, cfg.B):
            raise ConfigError(f"codebook for user {k + 1} has (M, N, B) = {(cb.M, cb.N, cb.B)}, "
                              f"expected {(cfg.M, cfg.N, cfg.B)}")
    return books


def _checkpoint_for(spec: ExperimentSpec, scheme: str, p_db: float) -> Checkpoint:
    path = spec.checkpoints.get(scheme, {}).get(p_db)
    if path is not None and path.exists():
        ckpt = load_checkpoint(path)
    elif spec.build_missing:
        out = spec.output_dir / "checkpoints" / f"{scheme}_{p_db:g}dB"
        val = generate_dataset(spec.system, spec.train_config(scheme, p_db).validation_size,
                               spec.seeds.train, "validation")
        report = train_joint_kd(spec.train_config(scheme, p_db), spec.system, val, out_dir=out)
        ckpt = report.best_checkpoint
        save_checkpoint(out / "best.mkd", ckpt)
    else:
        raise ConfigError(_missing_checkpoint_msg(scheme, p_db, path))
    s, c = spec.system, ckpt.system
    if (s.M, s.N, s.K, s.B, s.L) != (c.M, c.N, c.K, c.B, c.L):
        raise ConfigError(f"checkpoint for {scheme} at {p_db:g} dB was trained for "
                          f"(M,N,K,B,L) = {(c.M, c.N, c.K, c.B, c.L)}")
    return ckpt


# -- running --------------------------------------------------------------------------

@dataclass
class CellResult:
    scheme: str
    P_dB: float
    per_draw: np.ndarray     # (draws,) sum rates
    alpha: Optional[float] = None

    @property
    def sum_rate(self) -> float:
        return float(self.per_draw.mean())

    @property
    def stderr(self) -> float:
        return float(self.per_draw.std(ddof=1) / np.sqrt(self.per_draw.size))


def _run_cell(spec: ExperimentSpec, ds: ChannelDataset, scheme: str, p_db: float,
              codebooks, csit_cache: dict) -> CellResult:
    cfg = spec.system
    P = float(db_to_linear(p_db))
    if scheme in DNN_SCHEMES:
        nets = _checkpoint_for(spec, scheme, p_db).nets
        return CellResult(scheme, p_db, evaluate_rates(nets, ds, P).sum(axis=1))
    alpha = None
    if scheme != "bd":
        if spec.alpha is not None:
            alpha = float(spec.alpha)
        else:
            alpha, _ = search_alpha(cfg, codebooks, P, default_alpha_grid(cfg, P), spec.alpha_draws,
                                    spec.seeds.alpha, scheme=scheme)
    rates = baseline_rates(ds, cfg, scheme, P, codebooks, alpha, csit=csit_cache[scheme])
    return CellResult(scheme, p_db, rates.sum(axis=1), alpha)


def _fmt(x: float) -> str:
    return repr(float(x))


def run_experiment(spec: ExperimentSpec, workers: Optional[int] = None) -> list[CellResult]:
    """Evaluate every (scheme, power) cell on one shared test set and write the outputs.

    Files written into ``spec.output_dir``: ``results.csv``; ``alpha.csv``
    when a regularized scheme runs; ``sum_rate.svg``; and per-cell
    ``draws/<scheme>_<P>dB.csv`` when ``dump_draws`` is set.
    """
    if spec.scenario == "fixed-budget":
        raise ConfigError("fixed-budget specs expand into several systems; use run_scenario")
    n_workers = worker_count(workers)
    out = spec.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg = spec.system
    ds = generate_dataset(cfg, spec.draws, spec.seeds.test, "test")

    codebooks = None
    if any(s in ("bd", "rbd") for s in spec.schemes):
        cb_dir = spec.codebook_dir or (out / "codebooks")
        codebooks = load_or_build_codebooks(cfg, cb_dir, spec.seeds.codebook,
                                            build=spec.codebook_dir is None or spec.build_missing,
                                            workers=n_workers)
    csit_cache = {s: transmitter_csi(ds, cfg, s, codebooks) for s in spec.schemes if s in BASELINE_SCHEMES}

    cells = [(s, p) for s in spec.schemes for p in spec.snr_db]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        results = list(pool.map(lambda c: _run_cell(spec, ds, c[0], c[1], codebooks, csit_cache), cells))

    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in results:
            w.writerow([r.scheme, _fmt(r.P_dB), _fmt(r.sum_rate), _fmt(r.stderr), r.per_draw.size,
                        spec.seeds.test])
    tuned = [r for r in results if r.alpha is not None]
    if tuned:
        with open(out / "alpha.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scheme", "P_dB", "alpha", "measure_id"])
            for r in tuned:
                w.writerow([r.scheme, _fmt(r.P_dB), _fmt(r.alpha), CHORDAL])
    if spec.dump_draws:
        ddir = out / "draws"
        ddir.mkdir(exist_ok=True)
        for r in results:
            with open(ddir / f"{r.scheme}_{r.P_dB:g}dB.csv", "w") as fh:
                fh.write("draw,sum_rate\n")
                for i, v in enumerate(r.per_draw):
                    fh.write(f"{i},{_fmt(v)}\n")
    plot_curves({s: [(r.P_dB, r.sum_rate) for r in results if r.scheme == s] for s in spec.schemes},
                out / "sum_rate.svg", xlabel="P (dB)", ylabel="Sum rate (bits/s/Hz)")
    return results


def run_scenario(spec: ExperimentSpec, workers: Optional[int] = None) -> dict:
    """Run a spec; ``fixed-budget`` runs one sub-experiment per ``(N, K, B)`` split."""
    if spec.scenario == "power-sweep":
        return {"": run_experiment(spec, workers)}
    if any(s in DNN_SCHEMES for s in spec.schemes) and not spec.build_missing:
        raise ConfigError("fixed-budget runs train their own networks; set build_missing: true")
    out = {}
    rows = []
    s0 = spec.system
    for cfg in fixed_budget_systems(s0.M, s0.K * s0.B, L=s0.L, P_train=s0.P_train, P=s0.P):
        tag = f"N{cfg.N}_K{cfg.K}_B{cfg.B}"
        sub = replace(spec, scenario="power-sweep", system=cfg, output_dir=spec.output_dir / tag,
                      codebook_dir=None if spec.codebook_dir is None else spec.codebook_dir / tag,
                      checkpoints={})
        res = run_experiment(sub, workers)
        out[tag] = res
        rows += [(cfg.N, cfg.K, cfg.B, r) for r in res]
    with open(spec.output_dir / "budget.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["N", "K", "B", *RESULT_COLUMNS])
        for n, k, b, r in rows:
            w.writerow([n, k, b, r.scheme, _fmt(r.P_dB), _fmt(r.sum_rate), _fmt(r.stderr), r.per_draw.size,
                        spec.seeds.test])
    return out


# -- plots -------------------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "mkd"
    return plt


def plot_curves(curves: dict, path, xlabel: str, ylabel: str, logy: bool = False) -> None:
    """Write one line per entry of ``curves`` (name -> [(x, y), ...]) as an SVG file."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4.2))
    for name, pts in curves.items():
        if not pts:
            continue
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_loss_curve(csv_path, svg_path) -> None:
    """Training loss against iteration from a ``loss_curve.csv`` file."""
    data = np.genfromtxt(csv_path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    plot_curves({"loss": list(zip(data["iteration"], data["loss"]))}, svg_path,
                xlabel="Iteration", ylabel="Loss")
