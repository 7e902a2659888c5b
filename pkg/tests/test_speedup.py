import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from layerpar.speedup import (IncompleteMetrics, PhaseTimings, measure_phases, predict_speedup, speedup_report,
                              speedup_upper_bound)

EXAMPLE = PhaseTimings(T_d=1.0, T_f=2.0, T_b=4.0, t_psi=0.1, t_aux_f=0.25, t_aux_b=0.15)


def test_single_stage_without_overhead_is_one():
    assert predict_speedup(PhaseTimings(0.0, 2.0, 3.0), 1) == 1.0


@pytest.mark.parametrize("K", [1, 2, 3, 7, 64])
def test_ideal_scaling(K):
    assert predict_speedup(PhaseTimings(0.0, 2.0, 3.0), K) == pytest.approx(K, rel=1e-15)


def test_worked_example():
    # 7 / ((2 + 4) / 3 + 1.5)
    assert predict_speedup(EXAMPLE, 3) == pytest.approx(2.0, rel=1e-14)
    assert speedup_upper_bound(EXAMPLE) == pytest.approx(7 / 1.5, rel=1e-14)


def test_prediction_below_bound_for_all_K():
    bound = speedup_upper_bound(EXAMPLE)
    for K in [1, 2, 3, 10, 100, 10**3, 10**4, 10**5, 10**6]:
        assert predict_speedup(EXAMPLE, K) < bound


def test_unbounded_when_no_overhead():
    assert speedup_upper_bound(PhaseTimings(0.0, 1.0, 1.0)) == math.inf
    with pytest.raises(ValueError):
        speedup_upper_bound(PhaseTimings(0.0, 1.0, 1.0), strict=True)


def test_bound_decreases_with_aux_cost():
    bounds = [speedup_upper_bound(PhaseTimings(1.0, 2.0, 4.0, 0.1, a, a)) for a in (0.0, 0.1, 0.5, 2.0)]
    assert all(a > b for a, b in zip(bounds, bounds[1:]))


@given(st.floats(0, 5), st.floats(0.01, 5), st.floats(0.01, 5), st.floats(0, 2), st.floats(0, 2),
       st.integers(1, 50))
def test_monotone_in_K_and_bounded(Td, Tf, Tb, tpsi, taux, K):
    t = PhaseTimings(Td, Tf, Tb, tpsi, taux, 0.0)
    assert predict_speedup(t, K + 1) > predict_speedup(t, K)
    assert predict_speedup(t, K) <= speedup_upper_bound(t)


def test_invalid_timings():
    with pytest.raises(ValueError):
        PhaseTimings(-1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        PhaseTimings(1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        predict_speedup(EXAMPLE, 0)


def test_measure_phases_averages_epochs():
    recs = [{"T_d": 1.0, "T_f": 2.0, "T_b": 3.0, "t_psi": 0.5, "t_aux_f": 0.0, "t_aux_b": 1.0},
            {"T_d": 3.0, "T_f": 4.0, "T_b": 5.0, "t_psi": 1.5, "t_aux_f": 2.0, "t_aux_b": 1.0}]
    t = measure_phases(recs, K=2)
    assert t == PhaseTimings(2.0, 3.0, 4.0, 1.0, 1.0, 1.0)


def test_measure_phases_serial_has_no_overheads():
    t = measure_phases([{"T_d": 1.0, "T_f": 2.0, "T_b": 3.0}])
    assert t.t_psi == 0 and t.t_aux_f == 0 and t.t_aux_b == 0


def test_measure_phases_missing_stamps():
    with pytest.raises(IncompleteMetrics):
        measure_phases([{"T_d": 1.0, "T_f": 2.0}])
    with pytest.raises(IncompleteMetrics):
        measure_phases([{"T_d": 1.0, "T_f": 2.0, "T_b": 1.0}], K=3)
    with pytest.raises(IncompleteMetrics):
        measure_phases([])


def test_report_includes_measured_and_corrected():
    rep = speedup_report(EXAMPLE, 3, serial_epoch_time=7.0, parallel_epoch_time=5.0, phase_a_time=3.0)
    assert rep["predicted"] == pytest.approx(2.0)
    assert rep["measured"] == pytest.approx(1.4)
    assert rep["barrier_overhead"] == pytest.approx(1.0)
    assert rep["overhead_corrected"] == pytest.approx(7.0 / 4.0)
