import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cowqkd import detection, optics, protocol
from cowqkd.detection import DetectionRecord, DetectorParams
from cowqkd.errors import DomainError
from cowqkd.optics import OpticalBudget
from cowqkd.protocol import Slot


def _record(times):
    t = np.asarray(times, float)
    n = len(t)
    return DetectionRecord(t, np.arange(n), np.zeros(n, np.int8), np.zeros(n, bool))


def test_zero_efficiency_no_dark_gives_empty():
    b = OpticalBudget(detector_efficiency=0.0)
    det = detection.detector_for(b, dcr_override_hz=0.0)
    fr = protocol.encode_sequence(0, 10**4)
    assert len(detection.simulate_transmission(fr, b, det, 0)) == 0


def test_saturated_source_every_nonempty_slot_clicks():
    b = OpticalBudget(distance_km=0.0, detector_efficiency=1.0, coupler_data_fraction=1.0,
                      dead_time_s=0.0)
    det = detection.detector_for(b, dcr_override_hz=0.0)
    fr = protocol.encode_sequence(2, 5000, 0.5, 50.0)
    assert -math.expm1(-50.0) >= 1 - 1e-20
    rec = detection.simulate_transmission(fr, b, det, 1)
    occupied = np.flatnonzero(fr.occupancy().reshape(-1))
    assert np.array_equal(rec.pair_index * 2 + rec.slot, occupied)


def test_raw_rate_80km_matches_count_rate():
    b = OpticalBudget(dead_time_s=0.0)
    det = detection.detector_for(b, dcr_override_hz=0.0)
    run = detection.simulate_link(b, det, 10**8, 5)
    assert run.raw_signal_rate_hz == pytest.approx(567000, rel=0.01)
    assert run.raw_signal_rate_hz == pytest.approx(optics.detected_photon_rate(b), rel=0.01)


def test_transmission_deterministic():
    b = OpticalBudget(distance_km=20, dcr_hz=0.0)
    det = detection.detector_for(b)
    fr = protocol.encode_sequence(0, 10**5)
    r1 = detection.simulate_transmission(fr, b, det, 9)
    r2 = detection.simulate_transmission(fr, b, det, 9)
    assert np.array_equal(r1.time_s, r2.time_s) and np.array_equal(r1.slot, r2.slot)


def test_dead_time_zero_is_identity():
    t = np.sort(np.random.default_rng(0).uniform(0, 1, 100))
    assert np.array_equal(detection.apply_dead_time(t, 0.0), t)


def test_dead_time_greedy_example():
    kept = detection.apply_dead_time(np.array([0.0, 10e-6, 60e-6]), 50e-6)
    assert kept.tolist() == [0.0, 60e-6]


def test_dead_time_rejects_unsorted():
    with pytest.raises(DomainError):
        detection.apply_dead_time(np.array([1.0, 0.5]), 1e-6)


def test_dead_time_poisson_rate():
    rng = np.random.default_rng(12)
    n = rng.poisson(567000 * 10)
    t = np.sort(rng.uniform(0, 10, n))
    kept = detection.apply_dead_time(t, 50e-6)
    assert len(kept) / 10 == pytest.approx(19305, rel=0.01)
    assert np.all(np.diff(kept) >= 50e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e-3), min_size=0, max_size=300), st.floats(0, 1e-4))
def test_dead_time_idempotent(times, dt):
    t = np.sort(np.asarray(times, float))
    once = detection.apply_dead_time(t, dt)
    assert np.array_equal(detection.apply_dead_time(once, dt), once)
    if len(once) > 1 and dt > 0:
        assert np.min(np.diff(once)) >= dt


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1e-3), min_size=1, max_size=300), st.floats(0, 5e-5), st.floats(0, 5e-5))
def test_dead_time_monotone(times, d1, d2):
    t = np.sort(np.asarray(times, float))
    lo, hi = sorted((d1, d2))
    assert len(detection.apply_dead_time(t, hi)) <= len(detection.apply_dead_time(t, lo))


def test_dead_time_record_keeps_type():
    rec = _record([0.0, 1e-6, 3e-6])
    out = detection.apply_dead_time(rec, 2e-6)
    assert isinstance(out, DetectionRecord) and out.time_s.tolist() == [0.0, 3e-6]


def test_dead_time_carries_across_chunks():
    t = np.arange(0, 1e-3, 7e-6)
    whole = detection.apply_dead_time(t, 50e-6)
    a = detection.apply_dead_time(t[t < 5e-4], 50e-6)
    b = detection.apply_dead_time(t[t >= 5e-4], 50e-6, last_accept_s=a[-1])
    assert np.array_equal(np.concatenate([a, b]), whole)


def test_dark_counts():
    assert len(detection.dark_count_events(0.0, 10.0, 1)) == 0
    ev = detection.dark_count_events(1000.0, 100.0, 3)
    assert abs(len(ev) - 10**5) <= 1581
    assert np.all(np.diff(ev) >= 0) and ev.min() >= 0 and ev.max() < 100


def test_merged_stream_sorted():
    b = OpticalBudget(distance_km=10, dcr_hz=0.0)
    det = detection.detector_for(b, dcr_override_hz=5e6)
    rec = detection.simulate_transmission(protocol.encode_sequence(1, 10**5), b, det, 2)
    assert rec.is_dark.any() and (~rec.is_dark).any()
    assert np.all(np.diff(rec.time_s) >= 0)


def test_dark_count_times_uniform():
    ev = detection.dark_count_events(500.0, 20.0, 8)
    assert stats.kstest(ev / 20.0, "uniform").pvalue > 0.01


def test_window_no_jitter_full_acceptance():
    period = 1e-9
    rec = _record(np.arange(1000) * period)
    acc, frac = detection.time_window_filter(rec, period, period / 2, 0.0)
    assert frac == 1.0 and len(acc) == 1000


def test_window_zero_rejects_all():
    rec = _record(np.arange(100) * 1e-9)
    acc, frac = detection.time_window_filter(rec, 1e-9, 0.0, 10e-12, seed=1)
    assert frac == 0.0 and len(acc) == 0


def test_window_one_sigma_gaussian():
    n = 10**6
    period = 2e-9
    rec = _record(np.arange(n) * period)
    _, frac = detection.time_window_filter(rec, period, 50e-12, 50e-12, seed=4)
    p = math.erf(1 / math.sqrt(2))
    assert abs(frac - p) <= 5 * math.sqrt(p * (1 - p) / n)


def test_window_slot_classification():
    period = 2e-9
    rec = _record([0.0, period, 2 * period, 3 * period + 0.9e-9])
    acc, frac = detection.time_window_filter(rec, period, 0.5e-9, 0.0)
    assert acc.pair_index.tolist() == [0, 0, 1]
    assert acc.slot.tolist() == [Slot.EARLY, Slot.LATE, Slot.EARLY]
    assert frac == pytest.approx(0.75)


def test_qber_model_trivial_cases():
    b = OpticalBudget()
    assert detection.qber_model(b, detection.detector_for(b, dcr_override_hz=0.0)) == 0.0
    dark_only = OpticalBudget(detector_efficiency=0.0)
    assert detection.qber_model(dark_only, detection.detector_for(dark_only, dcr_override_hz=100.0)) == 0.5


def test_baseline_for_qber_inverts_model():
    b = OpticalBudget()
    det = detection.detector_for(b)
    p = detection.baseline_for_qber(b, det, 0.03)
    assert detection.qber_model(b, det.with_(p_baseline=p)) == pytest.approx(0.03, rel=1e-12)
    with pytest.raises(DomainError):
        detection.baseline_for_qber(b, det, 0.6)


def test_simulated_qber_matches_tuned_model():
    # 80 km with the error floor tuned to 3%; dead time removed to reach ~10^5 sifted bits quickly
    b = OpticalBudget(dead_time_s=0.0)
    det = detection.detector_for(b, dcr_override_hz=2000.0)
    det = det.with_(p_baseline=detection.baseline_for_qber(b, det, 0.03))
    run = detection.simulate_link(b, det, 3 * 10**8, 21)
    n = len(run.alice)
    assert n > 10**5
    assert abs(run.sifted_qber - 0.03) <= 5 * math.sqrt(0.03 * 0.97 / n)


def test_dark_only_qber_is_half():
    b = OpticalBudget(detector_efficiency=0.0, dead_time_s=0.0)
    det = detection.detector_for(b, dcr_override_hz=2e6)
    run = detection.simulate_link(b, det, 10**7, 3)
    n = len(run.alice)
    errs = int(np.count_nonzero(run.alice.bits != run.bob.bits))
    assert n > 1000
    assert stats.chisquare([errs, n - errs]).pvalue > 0.01


@pytest.mark.parametrize("dist", [40.0, 80.0, 120.0])
def test_mc_click_rate_matches_analytic(dist):
    b = OpticalBudget(distance_km=dist)
    det = detection.detector_for(b)
    run = detection.simulate_link(b, det, 10**7, 17)
    analytic = optics.click_rate_dead_time(optics.detected_photon_rate(b) + det.dcr_hz, b.dead_time_s)
    assert run.click_rate_hz == pytest.approx(analytic, rel=0.02)


def test_simulate_link_deterministic():
    b = OpticalBudget(distance_km=40)
    det = detection.detector_for(b)
    r1 = detection.simulate_link(b, det, 10**6, 8, chunk_pairs=1 << 18)
    r2 = detection.simulate_link(b, det, 10**6, 8, chunk_pairs=1 << 18)
    assert r1.accepted_clicks == r2.accepted_clicks
    assert np.array_equal(r1.alice.bits, r2.alice.bits) and np.array_equal(r1.bob.index, r2.bob.index)


def test_default_dcr_table_shape():
    table = detection.default_dcr_table()
    for bv in (1.0, 2.0, 3.0):
        rates = [detection.lookup_dcr(table, dt * 1e-6, bv) for dt in (20, 25, 30, 35, 40, 45, 50)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert detection.lookup_dcr(table, 45e-6, 2.0) > detection.lookup_dcr(table, 50e-6, 2.0)
    assert detection.lookup_dcr(table, 40e-6, 2.0) > detection.lookup_dcr(table, 45e-6, 2.0)


@given(st.floats(20, 50), st.floats(0.5, 3.5))
def test_dcr_lookup_total_on_range(dt_us, bv):
    assert detection.lookup_dcr(detection.default_dcr_table(), dt_us * 1e-6, bv) > 0


def test_dcr_table_multiplier_validation():
    with pytest.raises(DomainError):
        detection.default_dcr_table(shoulder_multiplier=30.0, cliff_multiplier=20.0)


def test_detector_param_validation():
    with pytest.raises(DomainError):
        DetectorParams(p_baseline=0.7)
    with pytest.raises(DomainError):
        DetectorParams(efficiency=0.5, efficiency_multiplier=3.0)


def test_nonempty_mu_keeps_average():
    b = OpticalBudget()
    fr = protocol.encode_sequence(0, 10**6, 0.5, detection.nonempty_mu(b, 0.5))
    assert fr.pulse_train().mean() == pytest.approx(b.mu, rel=5e-3)


def test_dump_format_round_trip():
    rec = DetectionRecord([1e-9, 2.5e-9], [0, 1], [Slot.LATE, Slot.DARK], [False, True])
    text = rec.dumps()
    assert text.splitlines()[0] == "1.000000000000e-09 0 LATE"
    back = DetectionRecord.loads(text)
    assert back.pair_index.tolist() == [0, 1] and back.is_dark.tolist() == [False, True]


def test_renewal_counts_mean_rate():
    edges = np.linspace(0, 60, 61)
    counts = detection.renewal_click_counts(565174.0, 50e-6, edges, 1)
    expected = optics.click_rate_dead_time(565174.0, 50e-6)
    assert counts.sum() / 60 == pytest.approx(expected, rel=1e-3)
    assert detection.renewal_click_counts(0.0, 50e-6, edges, 1).sum() == 0
