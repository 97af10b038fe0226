"""Command-line entry point ``mkd``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import csv
import logging
import sys
from pathlib import Path

import click
import yaml

from .channel import SystemConfig, db_to_linear, generate_dataset
from .codebook import CHORDAL, save_codebook, train_user_codebook
from .errors import ConfigError, FormatError, NumericError
from .experiment import load_or_build_codebooks, load_spec, plot_loss_curve, run_scenario, worker_count
from .flops import FlopsPoint, flops_table
from .neural import load_checkpoint, save_checkpoint
from .precoder import baseline_rates, default_alpha_grid, search_alpha
from .training import TrainConfig, evaluate, train_joint_kd

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def load_system(path) -> SystemConfig:
    """System parameters from a YAML file, either top level or under ``system``."""
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    return SystemConfig.from_dict(raw.get("system", raw))


def _snr_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"cannot parse power list {text!r}") from None
    if not vals:
        raise ConfigError("power list is empty")
    return vals


def _fmt(x) -> str:
    return repr(float(x))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool):
    """Limited-feedback MU-MIMO precoding: baselines, end-to-end networks, experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")


@cli.command("gen-codebook")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--user", type=int, required=True, help="User index, 1-based.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--iters", type=int, default=50, show_default=True)
@click.option("--size", type=int, default=None, help="Training-set size (default 100 x 2^B).")
def gen_codebook(config_path, user, seed, out, iters, size):
    """Train one user's codebook with the Lloyd algorithm."""
    cfg = load_system(config_path)
    if not 1 <= user <= cfg.K:
        raise ConfigError(f"--user must lie in [1, {cfg.K}]")
    cb = train_user_codebook(cfg, user - 1, seed, size=size, iters=iters)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_codebook(out, cb)
    click.echo(f"codebook user {user}: {len(cb)} words, distortion {cb.distortion_history[-1]:.6f} -> {out}")


@cli.command("run-baseline")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scheme", type=click.Choice(["bd", "rbd", "rbd-perfect-csit-bound"]), required=True)
@click.option("--snr-db", required=True, help="Comma- or space-separated list of P in dB.")
@click.option("--draws", type=int, default=100000, show_default=True)
@click.option("--codebook-dir", type=click.Path(file_okay=False), default=None,
              help="Directory with user<k>.gcb files; missing files are trained.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--alpha", type=float, default=None, help="Fixed regularization (default: grid search).")
@click.option("--alpha-draws", type=int, default=2000, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def run_baseline(config_path, scheme, snr_db, draws, codebook_dir, seed, alpha, alpha_draws, out):
    """Monte-Carlo sum rate of a BD/RBD baseline."""
    cfg = load_system(config_path)
    powers = _snr_list(snr_db)
    if draws < 2:
        raise ConfigError("--draws must be at least 2")
    books = None
    if scheme != "rbd-perfect-csit-bound":
        cb_dir = Path(codebook_dir) if codebook_dir else Path(out).parent / "codebooks"
        books = load_or_build_codebooks(cfg, cb_dir, seed, workers=worker_count())
    ds = generate_dataset(cfg, draws, seed, "test")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "P_dB", "alpha", *[f"per_user_rate_{k + 1}" for k in range(cfg.K)],
                    "sum_rate", "draws", "seed", "measure_id"])
        for p_db in powers:
            P = float(db_to_linear(p_db))
            a = None
            if scheme != "bd":
                a = alpha
                if a is None:
                    a, _ = search_alpha(cfg, books, P, default_alpha_grid(cfg, P), alpha_draws, seed, scheme=scheme)
            rates = baseline_rates(ds, cfg, scheme, P, books, a)
            per_user = rates.mean(axis=0)
            w.writerow([scheme, _fmt(p_db), "" if a is None else _fmt(a), *[_fmt(r) for r in per_user],
                        _fmt(per_user.sum()), draws, seed, CHORDAL])
            click.echo(f"{scheme} P={p_db:g} dB alpha={a} sum rate {per_user.sum():.4f}")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["kd", "no-kd"]), default="kd", show_default=True)
@click.option("--snr-db", type=float, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--preset", type=click.Choice(["desk", "full"]), default="desk", show_default=True)
@click.option("--iterations", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr-boundaries", default=None, help="Comma-separated iterations where the rate drops.")
@click.option("--eval-every", type=int, default=None)
@click.option("--validation-size", type=int, default=None)
@click.option("--validation-seed", type=int, default=None, help="Default: --seed.")
def train(config_path, mode, snr_db, seed, out_dir, preset, iterations, batch_size, lr_boundaries, eval_every,
          validation_size, validation_seed):
    """Train receivers and transmitter end to end."""
    system = load_system(config_path)
    kw = {"mode": mode.replace("-", "_"), "P_db": snr_db, "seed": seed}
    for key, val in (("iterations", iterations), ("batch_size", batch_size), ("eval_every", eval_every),
                     ("validation_size", validation_size)):
        if val is not None:
            kw[key] = val
    if lr_boundaries is not None:
        kw["lr_boundaries"] = tuple(int(float(t)) for t in lr_boundaries.replace(",", " ").split())
    cfg = TrainConfig.desk_scale(**kw) if preset == "desk" else TrainConfig.full_scale(**kw)
    vseed = seed if validation_seed is None else validation_seed
    val = generate_dataset(system, cfg.validation_size, vseed, "validation")
    out = Path(out_dir)
    report = train_joint_kd(cfg, system, val, out_dir=out)
    save_checkpoint(out / "best.mkd", report.best_checkpoint)
    save_checkpoint(out / "final.mkd", report.final_checkpoint)
    plot_loss_curve(out / "loss_curve.csv", out / "loss_curve.svg")
    click.echo(f"best validation sum rate {report.best_validation:.4f} at iteration {report.best_iteration}; "
               f"final loss {report.final_loss:.4f}")


@cli.command("evaluate")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--snr-db", default=None, help="Powers in dB (default: the training power).")
@click.option("--draws", type=int, default=100000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def evaluate_cmd(checkpoint, snr_db, draws, seed, out):
    """Sum rate of a trained checkpoint on a fixed test set."""
    ckpt = load_checkpoint(checkpoint)
    powers = _snr_list(snr_db) if snr_db else [float(ckpt.meta.get("P_db", ckpt.system.P_db))]
    if draws < 2:
        raise ConfigError("--draws must be at least 2")
    ds = generate_dataset(ckpt.system, draws, seed, "test")
    reports = evaluate(ckpt, ds, powers)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "P_dB", "sum_rate", "stderr", "draws", "seed"])
        mode = ckpt.meta.get("train_config", {}).get("mode", "kd")
        for p_db, rep in zip(powers, reports):
            w.writerow([f"dnn-{mode.replace('_', '-')}", _fmt(p_db), _fmt(rep.sum), _fmt(rep.stderr), draws, seed])
            click.echo(f"P={p_db:g} dB sum rate {rep.sum:.4f} +- {rep.stderr:.4f}")


@cli.command("run-experiment")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Override output_dir.")
@click.option("--dump-draws", is_flag=True, default=None, help="Also write per-draw sum rates.")
@click.option("--workers", type=int, default=None, help="Worker threads (capped by MKD_THREADS).")
def run_experiment_cmd(spec_path, out_dir, dump_draws, workers):
    """Run every scheme and power of an experiment spec on a shared test set."""
    spec = load_spec(spec_path, output_dir=None if out_dir is None else str(Path(out_dir).resolve()),
                     dump_draws=dump_draws)
    results = run_scenario(spec, workers)
    for tag, cells in results.items():
        for r in cells:
            click.echo(f"{tag + ' ' if tag else ''}{r.scheme} P={r.P_dB:g} dB sum rate {r.sum_rate:.4f}")
    click.echo(f"results in {spec.output_dir}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("-L", "L", type=int, default=8, show_default=True)
@click.option("-M", "M", type=int, default=8, show_default=True)
@click.option("-N", "N", type=int, default=2, show_default=True)
@click.option("-B", "B", type=int, default=6, show_default=True)
def flops(config_path, L, M, N, B):
    """Closed-form FLOP counts of the network and codebook pipelines."""
    if config_path:
        s = load_system(config_path)
        point = FlopsPoint(s.L, s.M, s.N, s.B)
    else:
        point = FlopsPoint(L, M, N, B)
    click.echo(f"L={point.L} M={point.M} N={point.N} B={point.B}")
    for row in flops_table(point):
        line = f"{row['quantity']:<9} {row['value']:>12,}"
        if row["quoted"] is not None:
            flag = "match" if row["match"] else "MISMATCH"
            line += f"   published {row['quoted']:,} ({flag})"
        click.echo(line)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="mkd", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except (ConfigError, FormatError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return EXIT_CONFIG
    except NumericError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
