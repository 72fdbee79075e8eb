import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cowqkd import optics
from cowqkd.errors import DomainError
from cowqkd.optics import OpticalBudget


def test_default_budget_is_lab_system():
    b = OpticalBudget()
    assert (b.mu, b.pulse_rate_hz, b.loss_per_km) == (0.5, 5e8, 0.2)
    assert (b.coupler_data_fraction, b.detector_efficiency) == (0.9, 0.1)


@pytest.mark.parametrize("field,value", [
    ("distance_km", -1.0), ("loss_per_km", -0.1), ("mu", 0.0), ("pulse_rate_hz", 0.0),
    ("coupler_data_fraction", 1.5), ("detector_efficiency", -0.1), ("dead_time_s", -1e-6),
    ("filtering_pct", 1.01), ("dcr_hz", -1.0),
])
def test_budget_rejects_out_of_domain(field, value):
    with pytest.raises(DomainError):
        OpticalBudget(**{field: value})


@pytest.mark.parametrize("args,expected", [((80, 0.2, 0), 16.0), ((0, 0.2, 0), 0.0), ((120, 0.2, 5), 29.0)])
def test_fiber_loss(args, expected):
    assert optics.fiber_loss_db(*args) == pytest.approx(expected, abs=1e-12)


def test_fiber_loss_negative():
    with pytest.raises(DomainError):
        optics.fiber_loss_db(-1, 0.2)


@pytest.mark.parametrize("mu,loss,expected,rel", [(0.5, 16, 0.0126, 5e-3), (0.5, 0, 0.5, 1e-15),
                                                  (1.0, 10, 0.1, 1e-15)])
def test_attenuate(mu, loss, expected, rel):
    assert optics.attenuate_mean_photon(mu, loss) == pytest.approx(expected, rel=rel)


def test_detected_rate_80km():
    # printed value carries the 3-figure 0.0126; exact chain is 565174/s
    assert optics.detected_photon_rate(OpticalBudget()) == pytest.approx(567000, rel=5e-3)
    assert optics.detected_photon_rate(OpticalBudget(detector_efficiency=0.0)) == 0.0


def test_detected_rate_40km():
    expected = 0.5 * 10 ** -0.8 * 0.9 * 0.1 * 5e8
    assert optics.detected_photon_rate(OpticalBudget(distance_km=40)) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(3.566e6, rel=1e-3)


@pytest.mark.parametrize("rate,dt,expected,rel", [
    (567000, 50e-6, 19305, 1e-3),
    (567000, 0.0, 567000, 1e-15),
    (3.566e6, 50e-6, 19888, 1e-4),
])
def test_click_rate_dead_time(rate, dt, expected, rel):
    assert optics.click_rate_dead_time(rate, dt) == pytest.approx(expected, rel=rel)


def test_click_rate_zero_input():
    assert optics.click_rate_dead_time(0.0, 50e-6) == 0.0


@pytest.mark.parametrize("f,expected", [(1.0, 19305), (0.0, 0.0), (0.45, 8687.25)])
def test_effective_clicks(f, expected):
    assert optics.effective_clicks(19305, f) == pytest.approx(expected, rel=1e-12)


def test_secret_key_rate_examples():
    assert optics.secret_key_rate(1234.5, 0.0, 0.0) == 1234.5
    assert optics.secret_key_rate(1234.5, 0.7, 1.0) == 0.0
    assert optics.secret_key_rate(20000, 0.03125, 0.9) == pytest.approx(1937.5, rel=1e-12)


@pytest.mark.parametrize("extra,expected", [(5, 25.0), (0, 0.0), (29 - 24, 25.0)])
def test_equivalent_distance(extra, expected):
    assert optics.equivalent_distance_km(extra, 0.2) == pytest.approx(expected, abs=1e-12)


def test_equivalent_distance_zero_loss():
    with pytest.raises(DomainError):
        optics.equivalent_distance_km(5, 0.0)


@settings(max_examples=200)
@given(st.floats(1e-3, 10), st.floats(0, 60), st.floats(0, 60))
def test_attenuation_composes(mu, a, b):
    two = optics.attenuate_mean_photon(optics.attenuate_mean_photon(mu, a), b)
    assert two == pytest.approx(optics.attenuate_mean_photon(mu, a + b), rel=1e-12)


@settings(max_examples=200)
@given(st.floats(1.0, 1e9), st.floats(0, 1e-3), st.floats(0, 1e-3))
def test_click_rate_monotone_in_dead_time(rate, t1, t2):
    lo, hi = sorted((t1, t2))
    assert optics.click_rate_dead_time(rate, hi) <= optics.click_rate_dead_time(rate, lo)
    c = optics.click_rate_dead_time(rate, lo)
    assert c <= rate * (1 + 1e-12)
    if lo > 0:
        assert c <= 1.0 / lo * (1 + 1e-12)


@settings(max_examples=200)
@given(st.floats(1.0, 1e9), st.floats(1.0, 1e9), st.floats(0, 1e-3))
def test_click_rate_monotone_in_count_rate(r1, r2, dt):
    lo, hi = sorted((r1, r2))
    assert optics.click_rate_dead_time(lo, dt) <= optics.click_rate_dead_time(hi, dt)


def test_dead_time_formula_forms_agree():
    lam, tau = 565174.4, 37e-6
    assert optics.click_rate_dead_time(lam, tau) == pytest.approx(lam / (1 + lam * tau), rel=1e-14)


@given(st.floats(1.0, 1e6), st.floats(0, 1))
def test_kr_affine_and_decreasing(eff, cr):
    drs = np.array([0.0, 0.25, 0.5, 1.0])
    kr = np.array([optics.secret_key_rate(eff, d, cr) for d in drs])
    np.testing.assert_allclose(np.diff(kr) / np.diff(drs), -eff * (1 - cr), rtol=1e-9, atol=1e-9)
    if cr < 1:
        assert np.all(np.diff(kr) < 0)


@pytest.mark.parametrize("dist,extra", [(120, 5.0), (40, 5.0), (80, 5.0), (0, 10.0)])
def test_attenuator_identity_exact(dist, extra):
    a = optics.analytic_report(OpticalBudget(distance_km=dist, extra_loss_db=extra), 0.03125, 0.5)
    b = optics.analytic_report(OpticalBudget(distance_km=dist + extra / 0.2), 0.03125, 0.5)
    assert a.total_clicks_hz == b.total_clicks_hz
    assert a.secret_kr_bps == b.secret_kr_bps


def test_report_formula_is_exact():
    b = OpticalBudget(filtering_pct=0.37)
    r = optics.analytic_report(b, 0.125, 0.75)
    assert r.secret_kr_bps == r.effective_clicks_hz * (1 - 0.125) * (1 - 0.75)
    assert r.effective_clicks_hz <= r.total_clicks_hz


def test_report_rejects_effective_above_total():
    with pytest.raises(DomainError):
        optics.KeyRateReport(OpticalBudget(), 0.1, 0.5, 10.0, 11.0, 0.0, 1.0)


def test_dcr_flag_adds_dark_counts():
    b = OpticalBudget(dcr_hz=2000.0)
    assert optics.total_clicks(b, include_dcr=True) > optics.total_clicks(b)
    lam = optics.detected_photon_rate(b) + 2000.0
    assert optics.total_clicks(b, include_dcr=True) == pytest.approx(1 / (1 / lam + b.dead_time_s))


def test_trace_full_precision_chain():
    t = optics.budget_trace(OpticalBudget())
    assert t["clicks_hz"] == pytest.approx(optics.total_clicks(OpticalBudget()), rel=1e-12)
    assert t["cycle_s"] == pytest.approx(t["gap_s"] + 50e-6, rel=1e-15)


@pytest.mark.parametrize("x,sig,expected", [(19316.44, 3, 19300.0), (0.0011303, 3, 0.00113),
                                            (1.7637e-6, 2, 1.8e-6), (0.0, 3, 0.0)])
def test_round_sig(x, sig, expected):
    assert optics.round_sig(x, sig) == pytest.approx(expected, rel=1e-12)


def test_zero_efficiency_trace():
    t = optics.budget_trace(OpticalBudget(detector_efficiency=0.0))
    assert t["clicks_hz"] == 0.0 and math.isinf(t["gap_s"])
