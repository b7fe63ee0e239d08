"""Cost accounting, throughput, forward-time regression and Pareto frontiers."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from adaspec.errors import DomainError, EmptyGeneration, RankDeficient


@dataclass(frozen=True)
class CostModel:
    """Seconds per forward pass of the draft and target models."""

    t_draft: float
    t_target: float

    def __post_init__(self):
        if not 0 < self.t_draft < self.t_target:
            raise DomainError("need 0 < t_draft < t_target")

    @property
    def c1(self) -> float:
        return self.t_draft

    @property
    def c2(self) -> float:
        return self.t_target - self.t_draft


# reference forward times in seconds: speculative pair and stand-alone runs
REFERENCE_COST = CostModel(0.0234, 0.112)
REFERENCE_STANDALONE_COST = CostModel(0.0207, 0.108)


def total_time(trace, cm: CostModel) -> float:
    return cm.t_draft * trace.n_draft + cm.t_target * trace.n_target


def total_time_decomposed(trace, cm: CostModel) -> float:
    """Oracle time ``t_draft * N`` plus discard and verification overheads."""
    return cm.t_draft * trace.n_tokens + cm.c1 * trace.n_discarded + cm.c2 * trace.n_target


def latency(trace, cm: CostModel) -> float:
    if trace.n_tokens == 0:
        raise EmptyGeneration("trace generated no tokens")
    return total_time(trace, cm) / trace.n_tokens


def throughput(trace, cm: CostModel) -> float:
    if trace.n_tokens == 0:
        raise EmptyGeneration("trace generated no tokens")
    return trace.n_tokens / total_time(trace, cm)


def standalone_throughput(standalone: CostModel) -> float:
    """Tokens per second of the target decoding alone."""
    return 1.0 / standalone.t_target


def latency_from_rates(discard_rate: float, verification_rate: float, cm: CostModel) -> float:
    return cm.t_draft + cm.c1 * discard_rate + cm.c2 * verification_rate


def fit_forward_times(samples: Sequence[Tuple[float, float, float]], intercept: bool = False):
    """Least-squares fit of ``T = t_draft * N_draft + t_target * N_target``.

    Returns ``(t_draft, t_target, r2)``; with ``intercept=True`` returns
    ``(t_draft, t_target, r2, intercept)``. R^2 uses the centered total sum
    of squares.
    """
    a = np.asarray(samples, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or len(a) < 3:
        raise DomainError("need at least 3 samples of (N_draft, N_target, T_total)")
    X, y = a[:, :2], a[:, 2]
    if intercept:
        X = np.column_stack([X, np.ones(len(a))])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficient("design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    if intercept:
        return float(coef[0]), float(coef[1]), r2, float(coef[2])
    return float(coef[0]), float(coef[1]), r2


@dataclass
class BenchPoint:
    policy: str
    params: str
    discard_rate: float
    verification_rate: float
    latency: float
    throughput: float
    speedup: float = float("nan")

    def row(self) -> dict:
        return asdict(self)


BENCH_FIELDS = ["policy", "params", "discard_rate", "verification_rate", "latency", "throughput", "speedup"]


def bench_point(policy: str, params: str, traces, cm: CostModel, standalone: CostModel = None) -> BenchPoint:
    """Pool counters over all traces: rates are ``sum(N_x) / sum(N)``."""
    n = sum(t.n_tokens for t in traces)
    if n == 0:
        raise EmptyGeneration("no tokens generated")
    disc = sum(t.n_discarded for t in traces) / n
    ver = sum(t.n_target for t in traces) / n
    lat = latency_from_rates(disc, ver, cm)
    thr = 1.0 / lat
    speed = thr / standalone_throughput(standalone) if standalone is not None else float("nan")
    return BenchPoint(policy, params, disc, ver, lat, thr, speed)


def dominates(a, b) -> bool:
    """``a`` is no worse on both rates and strictly better on one."""
    return (
        a.verification_rate <= b.verification_rate
        and a.discard_rate <= b.discard_rate
        and (a.verification_rate < b.verification_rate or a.discard_rate < b.discard_rate)
    )


def pareto_frontier(points: Sequence) -> List:
    """Points not dominated in (verification_rate, discard_rate); lower is better, ties kept."""
    pts = list(points)
    return [p for p in pts if not any(dominates(o, p) for o in pts)]


def write_bench_csv(points: Sequence[BenchPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        w.writeheader()
        for p in points:
            row = p.row()
            for k in BENCH_FIELDS[2:]:
                row[k] = f"{row[k]:.10g}"
            w.writerow(row)


def read_bench_csv(path) -> List[BenchPoint]:
    with open(path, newline="") as fh:
        return [
            BenchPoint(
                r["policy"],
                r["params"],
                float(r["discard_rate"]),
                float(r["verification_rate"]),
                float(r["latency"]),
                float(r["throughput"]),
                float(r["speedup"]),
            )
            for r in csv.DictReader(fh)
        ]
