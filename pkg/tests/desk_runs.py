"""Desk-scale learning runs (M=8, N=2, K=4, B=6, P=10 dB, 5000 iterations, batch 256).

Each training run takes about an hour on one core, so results are cached as
JSON under ``MKD_ACCEPT_CACHE`` (default ``<repo>/.acceptance_cache``).
Cache keys include a fingerprint of the package source with docstrings
stripped, so any change to the numerics forces a recomputation.

Run as a script to fill the cache ahead of the test suite::

    python tests/desk_runs.py
"""

from __future__ import annotations

import ast
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from mkd.channel import SystemConfig, db_to_linear, generate_dataset
from mkd.codebook import train_user_codebook
from mkd.precoder import baseline_rates, default_alpha_grid, search_alpha
from mkd.training import TrainConfig, evaluate, train_joint_kd

SYSTEM = SystemConfig(M=8, N=2, K=4, B=6, L=8, P_train=10.0, P=10.0)
P_DB = 10.0
SEEDS = (0, 1, 2)
MODES = ("kd", "no_kd")
VALIDATION_SEED = 1000
TEST_SEED = 2000
CODEBOOK_SEED = 0
ALPHA_SEED = 0
ALPHA_DRAWS = 2000

REPO = Path(__file__).resolve().parents[1]


def cache_dir() -> Path:
    d = Path(os.environ.get("MKD_ACCEPT_CACHE", REPO / ".acceptance_cache"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def code_fingerprint() -> str:
    """Hash of every package module's AST with docstrings removed."""
    import mkd
    h = hashlib.sha256()
    for path in sorted(Path(mkd.__file__).parent.glob("*.py")):
        tree = ast.parse(path.read_text())
        for node in ast.walk(tree):
            body = getattr(node, "body", None)
            if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                    and isinstance(getattr(body[0], "value", None), ast.Constant) \
                    and isinstance(body[0].value.value, str):
                node.body = body[1:] or [ast.Pass()]
        h.update(path.name.encode())
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:16]


def _cached(name: str, compute):
    path = cache_dir() / f"{name}-{code_fingerprint()}.json"
    if path.exists():
        return json.loads(path.read_text())
    result = compute()
    path.write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


def _datasets():
    cfg = TrainConfig.desk_scale()
    val = generate_dataset(SYSTEM, cfg.validation_size, VALIDATION_SEED, "validation")
    test = generate_dataset(SYSTEM, cfg.test_size, TEST_SEED, "test")
    return val, test


def rbd_reference() -> dict:
    def compute():
        t0 = time.time()
        _, test = _datasets()
        P = float(db_to_linear(P_DB))
        books = [train_user_codebook(SYSTEM, k, CODEBOOK_SEED) for k in range(SYSTEM.K)]
        alpha, curve = search_alpha(SYSTEM, books, P, default_alpha_grid(SYSTEM, P), ALPHA_DRAWS, ALPHA_SEED)
        rates = baseline_rates(test, SYSTEM, "rbd", P, books, alpha).sum(axis=1)
        return {"alpha": alpha, "alpha_curve": [float(c) for c in curve], "test_sum_rate": float(rates.mean()),
                "test_stderr": float(rates.std(ddof=1) / np.sqrt(rates.size)), "minutes": (time.time() - t0) / 60}
    return _cached("rbd", compute)


def training_run(mode: str, seed: int) -> dict:
    def compute():
        t0 = time.time()
        val, test = _datasets()
        cfg = TrainConfig.desk_scale(mode=mode, seed=seed, P_db=P_DB)
        out = cache_dir() / f"run-{mode}-{seed}"
        rep = train_joint_kd(cfg, SYSTEM, val, out_dir=out)
        best_test = evaluate(rep.best_checkpoint, test, [P_DB])[0]
        final_test = evaluate(rep.final_checkpoint, test, [P_DB])[0]
        return {
            "mode": mode, "seed": seed,
            "final_validation": rep.validation_curve[-1][1],
            "best_validation": rep.best_validation, "best_iteration": rep.best_iteration,
            "final_loss": rep.final_loss,
            "test_sum_rate": best_test.sum, "test_stderr": best_test.stderr,
            "final_test_sum_rate": final_test.sum,
            "validation_curve": rep.validation_curve,
            "minutes": (time.time() - t0) / 60,
        }
    return _cached(f"train-{mode}-{seed}", compute)


def all_results() -> dict:
    res = {"rbd": rbd_reference(), "runs": {}}
    for seed in SEEDS:
        for mode in MODES:
            res["runs"][f"{mode}-{seed}"] = training_run(mode, seed)
    return res


if __name__ == "__main__":
    import logging
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stdout)
    r = all_results()
    print(json.dumps({"rbd": r["rbd"]["test_sum_rate"],
                      **{k: (v["test_sum_rate"], v["final_validation"], v["final_loss"])
                         for k, v in r["runs"].items()}}, indent=1))
