import math
import warnings

import pytest
from hypothesis import given, strategies as st

from qsrlab import commcost as C
from qsrlab.errors import ParameterError

hours = st.floats(0.5, 100.0)


def test_estimate_examples():
    comm, comp = C.estimate_comm_time(26.7, 21.2, 4)
    assert comm == pytest.approx(4 / 3 * 5.5) and round(comm, 1) == 7.3
    assert comm + comp == 26.7
    assert C.estimate_comm_time(12.0, 12.0, 3) == (0.0, 12.0)
    assert C.estimate_comm_time(20.7, 19.0, 2)[0] == pytest.approx(3.4)
    with pytest.raises(ParameterError):
        C.estimate_comm_time(20.0, 19.0, 1)


def test_predict_examples():
    comm, comp = C.estimate_comm_time(26.7, 21.2, 4)
    assert C.predict_total(comm, comp, 1) == pytest.approx(26.7, abs=1e-12)
    total = C.predict_total(comm, comp, 8)
    assert total == pytest.approx(20.28, abs=0.01)
    assert abs(total - 20.5) / 20.5 == pytest.approx(0.011, abs=0.001)
    assert C.predict_total(comm, comp, 1e12) == pytest.approx(comp)
    with pytest.raises(ParameterError):
        C.predict_total(comm, comp, 0.5)


def test_qsr_comm_examples():
    comm = C.estimate_comm_time(26.7, 21.2, 4)[0]
    assert C.qsr_comm_time(1.0, comm) == comm
    assert round(C.qsr_comm_time(0.104, comm), 1) == 0.8
    assert round(C.qsr_comm_time(0.069, comm), 1) == 0.5
    for bad in (0.0, 1.5):
        with pytest.raises(ParameterError):
            C.qsr_comm_time(bad, comm)


def test_negative_comm_flagged_not_clamped():
    with pytest.warns(RuntimeWarning):
        led = C.CommLedger(19.0, 20.0, 2)
    assert led.negative_comm and led.t_comm_para == pytest.approx(-2.0)
    assert led.to_dict()["negative_comm"] is True


def test_ledger_report_and_csv():
    led = C.CommLedger(26.7, 21.2, 4)
    row = led.add_period(8, measured=20.5)
    assert row["rel_error"] < 0.02
    led.add_fraction("qsr", 0.104)
    rep = led.report()
    assert rep["T_comm_para"] == 7.3 and rep["T_comp_para"] == 19.4
    assert rep["periods"][0]["total"] == 20.3 and rep["periods"][0]["H"] == 8
    assert rep["rules"][0]["comm"] == 0.8 and rep["rules"][0]["fraction"] == 0.104
    lines = led.to_csv().splitlines()
    assert lines[0] == "setting,fraction,comm_hours,total_hours,measured_hours"
    assert [l.split(",")[0] for l in lines[1:]] == ["parallel", "H=8", "qsr"]


@given(hours, st.floats(0.0, 1.0), st.integers(2, 64))
def test_round_trip_at_h1(t_para, share, h1):
    t_h1 = t_para * (1 - share * (1 - 1 / h1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        comm, comp = C.estimate_comm_time(t_para, t_h1, h1)
    # comp is defined as t_para - comm; the float sum can land one ulp away
    assert abs(comm + comp - t_para) <= math.ulp(t_para)
    assert C.predict_total(comm, comp, h1) == pytest.approx(t_h1, rel=1e-12, abs=1e-12)


@given(hours, st.floats(0.01, 0.9), st.integers(2, 16), st.integers(1, 100), st.integers(1, 100))
def test_predict_decreasing_in_h2(t_para, drop, h1, h2a, h2b):
    comm, comp = C.estimate_comm_time(t_para, t_para * (1 - drop), h1)
    lo, hi = sorted((h2a, h2b))
    assert C.predict_total(comm, comp, hi) <= C.predict_total(comm, comp, lo)
