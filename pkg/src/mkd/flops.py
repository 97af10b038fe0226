"""Closed-form floating-point operation counts of both feedback pipelines."""

from __future__ import annotations

from typing import NamedTuple

__all__ = ["FlopsPoint", "flops_proposed", "flops_baseline", "QUOTED", "flops_table"]


class FlopsPoint(NamedTuple):
    """Dimensions entering the counts. ``B = 0`` is allowed here."""

    L: int
    M: int
    N: int
    B: int


# Published values at L=8, M=8, N=2, B=6, kept for comparison.
QUOTED = {"point": FlopsPoint(8, 8, 2, 6), "proposed": 471_040, "baseline": 310_336}


def _dims(cfg) -> tuple[int, int, int, int]:
    return int(cfg.L), int(cfg.M), int(cfg.N), int(cfg.B)


def flops_proposed(cfg) -> int:
    """Receiver plus transmitter network count ``10MN(16LN+360MN-9) + B(40MN-1)``."""
    L, M, N, B = _dims(cfg)
    return 10 * M * N * (16 * L * N + 360 * M * N - 9) + B * (40 * M * N - 1)


def flops_baseline(cfg) -> int:
    """Channel estimation plus exhaustive codebook search."""
    L, M, N, B = _dims(cfg)
    search = 2 ** B * (32 * M * M * N + 16 * M * N * N + 16 * N ** 3 - 4 * M * M - 4 * M * N - 8 * N * N)
    return (search + 16 * M * (L * M + L * N + M * N) + 16 * L * L * (M + N + L)
            - 4 * L * (M + N) - 8 * L * L - 8 * M * N)


def flops_table(cfg) -> list[dict]:
    """Rows ``(quantity, value, quoted, match)`` for reporting."""
    point = FlopsPoint(*_dims(cfg))
    at_quoted = point == QUOTED["point"]
    rows = []
    for name, fn in (("proposed", flops_proposed), ("baseline", flops_baseline)):
        value = fn(point)
        quoted = QUOTED[name] if at_quoted else None
        rows.append({"quantity": name, "value": value, "quoted": quoted,
                     "match": None if quoted is None else value == quoted})
    return rows
