"""Per-epoch speedup model for K-stage synchronous training."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

TIMING_KEYS = ("T_d", "T_f", "T_b", "t_psi", "t_aux_f", "t_aux_b")


class IncompleteMetrics(ValueError):
    pass


@dataclass(frozen=True)
class PhaseTimings:
    """Seconds per epoch spent in each phase.

    ``T_d`` data loading, ``T_f``/``T_b`` layer-serial forward/backward,
    ``t_psi`` intermediate losses and boundary corrections, ``t_aux_f`` and
    ``t_aux_b`` auxiliary-network forward and distillation.
    """

    T_d: float
    T_f: float
    T_b: float
    t_psi: float = 0.0
    t_aux_f: float = 0.0
    t_aux_b: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"{k} must be non-negative, got {v}")
        if self.T_f + self.T_b <= 0:
            raise ValueError("T_f + T_b must be positive")

    @property
    def total_serial(self) -> float:
        return self.T_d + self.T_f + self.T_b

    @property
    def overhead(self) -> float:
        return self.T_d + self.t_psi + self.t_aux_f + self.t_aux_b

    def as_dict(self) -> dict:
        return asdict(self)


def predict_speedup(t: PhaseTimings, K: int) -> float:
    """Serial-to-parallel runtime ratio per epoch for ``K`` stages."""
    if K < 1:
        raise ValueError("K must be >= 1")
    total = t.total_serial
    denom = (t.T_f + t.T_b) / (K * total) + t.overhead / total
    if denom <= 0:
        raise ValueError("degenerate timings: zero parallel runtime")
    return 1.0 / denom


def speedup_upper_bound(t: PhaseTimings, strict: bool = False) -> float:
    """Limit of :func:`predict_speedup` as ``K`` grows; ``inf`` when overheads vanish."""
    if t.overhead <= 0:
        if strict:
            raise ValueError("zero overhead: the speedup is unbounded")
        return math.inf
    return t.total_serial / t.overhead


def measure_phases(records: list[dict], K: int = 1) -> PhaseTimings:
    """Average per-epoch phase timings over ``records``.

    Each record maps the :data:`TIMING_KEYS` to seconds for one epoch. Parallel
    trainers already report ``T_f``/``T_b`` as ``K`` times the per-stage means.
    A serial record may omit the auxiliary keys.
    """
    if not records:
        raise IncompleteMetrics("no timing records")
    sums = dict.fromkeys(TIMING_KEYS, 0.0)
    for i, rec in enumerate(records):
        for key in ("T_d", "T_f", "T_b"):
            if key not in rec:
                raise IncompleteMetrics(f"record {i} lacks {key}")
        if K > 1 and "t_psi" not in rec:
            raise IncompleteMetrics(f"parallel record {i} lacks t_psi")
        for key in TIMING_KEYS:
            sums[key] += float(rec.get(key, 0.0))
    n = len(records)
    return PhaseTimings(**{k: v / n for k, v in sums.items()})


def speedup_report(parallel: PhaseTimings, K: int, serial_epoch_time: float | None = None,
                   parallel_epoch_time: float | None = None, phase_a_time: float | None = None) -> dict:
    """Predicted ratio, its bound, and measured ratios when wall times are known.

    ``overhead_corrected`` removes the measured barrier/dispatch slack of phase A
    (the part of the parallel epoch not explained by per-stage compute).
    """
    out = {
        "K": K,
        "predicted": predict_speedup(parallel, K),
        "upper_bound": speedup_upper_bound(parallel),
        "timings": parallel.as_dict(),
    }
    if serial_epoch_time and parallel_epoch_time:
        out["measured"] = serial_epoch_time / parallel_epoch_time
        if phase_a_time is not None:
            ideal_a = (parallel.T_f + parallel.T_b) / K
            slack = max(phase_a_time - ideal_a, 0.0)
            out["barrier_overhead"] = slack
            out["overhead_corrected"] = serial_epoch_time / max(parallel_epoch_time - slack, 1e-12)
    return out
