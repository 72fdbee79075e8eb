"""Monte Carlo model of the quantum channel and Bob's single-photon detector.

Time is laid out on the laser clock: slot ``k`` is centered at
``k / pulse_rate_hz``, pair ``i`` owns slots ``2i`` (early) and ``2i + 1``
(late).  A run goes through four stages:

1. :func:`simulate_transmission` draws avalanche events: every non-empty
   pulse clicks with probability ``1 - exp(-mu_slot * transmittance)`` and a
   homogeneous Poisson process adds dark counts anywhere in time.
2. :func:`apply_dead_time` keeps events at least one dead time apart
   (non-paralyzable).
3. :func:`time_window_filter` adds Gaussian timing jitter and keeps events
   within the acceptance window around a slot center.
4. :func:`cowqkd.protocol.sift` turns the surviving clicks into key bits.

The laser's average photon number per pulse is ``budget.mu``.  Since a COW
pair with decoy probability ``f`` carries on average ``1 + f`` non-empty
pulses, each non-empty pulse is driven at ``mu * 2 / (1 + f)``
(:func:`nonempty_mu`), which keeps the simulated count rate on top of the
closed-form one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from . import optics
from .errors import DomainError
from .optics import OpticalBudget
from .protocol import BitBlock, Slot, SymbolFrame, encode_sequence, sift

DEFAULT_JITTER_S = 50e-12
DEFAULT_WINDOW_S = 0.5e-9

DEFAULT_DEAD_TIMES_US = (20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0)
DEFAULT_BASE_DCR_HZ = {1.0: 1500.0, 1.5: 1750.0, 2.0: 2000.0, 2.5: 2300.0, 3.0: 2600.0}
SHOULDER_EDGE_US = 50.0
CLIFF_EDGE_US = 45.0


def default_dcr_table(
    base_dcr_hz: Mapping[float, float] = DEFAULT_BASE_DCR_HZ,
    dead_times_us=DEFAULT_DEAD_TIMES_US,
    shoulder_multiplier: float = 8.0,
    cliff_multiplier: float = 50.0,
) -> dict:
    """Dark-count rate per ``(dead_time_us, bias_v)`` grid point.

    The rate is ``base`` at or above 50 us, ``base * shoulder_multiplier``
    in [45, 50) us and ``base * cliff_multiplier`` below 45 us.
    """
    if not 1.0 <= shoulder_multiplier <= cliff_multiplier:
        raise DomainError("multipliers must satisfy 1 <= shoulder <= cliff")
    table = {}
    for bv, base in base_dcr_hz.items():
        for dt in dead_times_us:
            if dt >= SHOULDER_EDGE_US:
                mult = 1.0
            elif dt >= CLIFF_EDGE_US:
                mult = shoulder_multiplier
            else:
                mult = cliff_multiplier
            table[(float(dt), float(bv))] = base * mult
    return table


def lookup_dcr(table: Mapping, dead_time_s: float, bias_v: float) -> float:
    """Grid lookup: nearest bias, then the largest tabulated dead time not above the request.

    Dead times below the grid use its smallest entry.
    """
    if not table:
        return 0.0
    dt_us = dead_time_s * 1e6
    biases = sorted({bv for _, bv in table})
    bv = min(biases, key=lambda b: (abs(b - bias_v), b))
    dts = sorted(dt for dt, b in table if b == bv)
    below = [d for d in dts if d <= dt_us + 1e-9]
    dt = below[-1] if below else dts[0]
    return float(table[(dt, bv)])


@dataclass(frozen=True)
class DetectorParams:
    """SPAD characteristics used by the simulator.

    ``p_baseline`` is the probability that a photon lands in the wrong slot of
    its pair (finite modulator extinction, misalignment); it sets the QBER
    floor when dark counts are negligible.
    """

    efficiency: float = 0.1
    dead_time_s: float = 50e-6
    dcr_table: Mapping = field(default_factory=default_dcr_table)
    bias_v: float = 2.0
    jitter_sigma_s: float = DEFAULT_JITTER_S
    window_s: float = DEFAULT_WINDOW_S
    p_baseline: float = 0.0
    efficiency_multiplier: float = 1.0
    dcr_override_hz: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.efficiency * self.efficiency_multiplier <= 1.0:
            raise DomainError("effective efficiency must lie in [0, 1]")
        if self.dead_time_s < 0 or self.jitter_sigma_s < 0 or self.window_s < 0:
            raise DomainError("dead time, jitter and window must be >= 0")
        if not 0.0 <= self.p_baseline <= 0.5:
            raise DomainError("p_baseline must lie in [0, 0.5]")

    @property
    def dcr_hz(self) -> float:
        if self.dcr_override_hz is not None:
            return float(self.dcr_override_hz)
        return lookup_dcr(self.dcr_table, self.dead_time_s, self.bias_v)

    @property
    def effective_efficiency(self) -> float:
        return self.efficiency * self.efficiency_multiplier

    def with_(self, **changes) -> "DetectorParams":
        return replace(self, **changes)


def detector_for(budget: OpticalBudget, **overrides) -> DetectorParams:
    """Detector whose efficiency and dead time are taken from ``budget``."""
    kw = dict(efficiency=budget.detector_efficiency, dead_time_s=budget.dead_time_s)
    kw.update(overrides)
    return DetectorParams(**kw)


def nonempty_mu(budget: OpticalBudget, f: float) -> float:
    """Photon number of one non-empty pulse so the train averages ``budget.mu``."""
    return budget.mu * 2.0 / (1.0 + f)


def channel_transmittance(budget: OpticalBudget, detector: DetectorParams) -> float:
    """Source-to-avalanche scale factor: fiber, coupler and detector efficiency."""
    return (optics.attenuate_mean_photon(1.0, budget.loss_db) * budget.coupler_data_fraction
            * detector.effective_efficiency)


@dataclass
class DetectionRecord:
    """A time-ordered stream of detector events as parallel arrays."""

    time_s: np.ndarray
    pair_index: np.ndarray
    slot: np.ndarray
    is_dark: np.ndarray

    def __post_init__(self):
        self.time_s = np.asarray(self.time_s, dtype=float)
        self.pair_index = np.asarray(self.pair_index, dtype=np.int64)
        self.slot = np.asarray(self.slot, dtype=np.int8)
        self.is_dark = np.asarray(self.is_dark, dtype=bool)
        n = len(self.time_s)
        if not (len(self.pair_index) == len(self.slot) == len(self.is_dark) == n):
            raise DomainError("record arrays differ in length")

    def __len__(self):
        return len(self.time_s)

    def __iter__(self):
        for t, p, s in zip(self.time_s, self.pair_index, self.slot):
            yield float(t), int(p), Slot(int(s))

    def take(self, mask_or_index) -> "DetectionRecord":
        return DetectionRecord(self.time_s[mask_or_index], self.pair_index[mask_or_index],
                               self.slot[mask_or_index], self.is_dark[mask_or_index])

    @classmethod
    def empty(cls) -> "DetectionRecord":
        return cls(np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int8), np.zeros(0, bool))

    @classmethod
    def concat(cls, parts) -> "DetectionRecord":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.time_s for p in parts]),
                   np.concatenate([p.pair_index for p in parts]),
                   np.concatenate([p.slot for p in parts]),
                   np.concatenate([p.is_dark for p in parts]))

    def dumps(self) -> str:
        """Debug dump, one ``time_s pair_index slot`` line per event."""
        return "".join(f"{t:.12e} {p} {Slot(int(s)).name}\n"
                       for t, p, s in zip(self.time_s, self.pair_index, self.slot))

    @classmethod
    def loads(cls, text: str) -> "DetectionRecord":
        rows = [line.split() for line in text.splitlines() if line.strip()]
        if not rows:
            return cls.empty()
        slots = [Slot[r[2]] for r in rows]
        return cls([float(r[0]) for r in rows], [int(r[1]) for r in rows], slots,
                   [s is Slot.DARK for s in slots])


def _bernoulli_positions(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    """Sorted indices in [0, n) each selected independently with probability ``p``."""
    if p <= 0.0 or n == 0:
        return np.zeros(0, dtype=np.int64)
    if p >= 1.0:
        return np.arange(n, dtype=np.int64)
    if p > 0.05:
        return np.flatnonzero(rng.random(n) < p)
    out = []
    pos = -1
    while True:
        want = int(max(64, (n - pos) * p * 1.1 + 6 * math.sqrt((n - pos) * p)))
        steps = np.cumsum(rng.geometric(p, size=want)) + pos
        done = steps[-1] >= n
        steps = steps[steps < n]
        out.append(steps)
        if done:
            break
        pos = int(steps[-1])
    return np.concatenate(out).astype(np.int64)


def dark_count_events(dcr_hz: float, duration_s: float, seed, t0: float = 0.0) -> np.ndarray:
    """Sorted times of a homogeneous Poisson process of rate ``dcr_hz`` on [t0, t0 + duration)."""
    if dcr_hz < 0 or duration_s < 0:
        raise DomainError("dcr_hz and duration_s must be >= 0")
    rng = np.random.default_rng(seed)
    n = rng.poisson(dcr_hz * duration_s) if dcr_hz > 0 else 0
    return t0 + np.sort(rng.uniform(0.0, duration_s, size=n))


def simulate_transmission(frame: SymbolFrame, budget: OpticalBudget, detector: DetectorParams,
                          seed, pair_offset: int = 0) -> DetectionRecord:
    """Raw avalanche events for one frame, before dead time and timing filter.

    Signal events sit exactly on their slot center; with probability
    ``detector.p_baseline`` a detected photon is registered in the other slot
    of its pair.  Dark events carry ``Slot.DARK`` and a pair index derived from
    their nearest slot.  ``pair_offset`` shifts the frame along the time axis.
    """
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    sig_seq, dark_seq, flip_seq = ss.spawn(3)
    rng = np.random.default_rng(sig_seq)
    period = budget.pulse_gap_s
    n_slots = frame.n_pulses
    p_click = -math.expm1(-frame.mu * channel_transmittance(budget, detector))

    cand = _bernoulli_positions(rng, n_slots, p_click)
    occupied = frame.occupancy().reshape(-1)
    sig_slots = cand[occupied[cand]]
    if detector.p_baseline > 0 and len(sig_slots):
        flip = np.random.default_rng(flip_seq).random(len(sig_slots)) < detector.p_baseline
        sig_slots = np.where(flip, sig_slots ^ 1, sig_slots)
        sig_slots.sort()
    sig_slots = sig_slots + 2 * pair_offset
    sig_t = sig_slots * period

    t0 = 2 * pair_offset * period - period / 2
    dark_t = dark_count_events(detector.dcr_hz, n_slots * period, dark_seq, t0=t0)
    dark_slot_idx = np.rint(dark_t / period).astype(np.int64)

    times = np.concatenate([sig_t, dark_t])
    slot_idx = np.concatenate([sig_slots, dark_slot_idx])
    kind = np.concatenate([(sig_slots % 2).astype(np.int8),
                           np.full(len(dark_t), Slot.DARK, dtype=np.int8)])
    dark = np.concatenate([np.zeros(len(sig_t), bool), np.ones(len(dark_t), bool)])
    order = np.argsort(times, kind="stable")
    return DetectionRecord(times[order], slot_idx[order] // 2, kind[order], dark[order])


def apply_dead_time(events, dead_time_s: float, last_accept_s: float = -math.inf):
    """Greedy non-paralyzable filter.

    An event is kept iff it arrives at least ``dead_time_s`` after the last
    kept event.  ``events`` is a sorted array of times or a
    :class:`DetectionRecord`; the same type is returned.  ``last_accept_s``
    carries detector state across consecutive chunks.
    """
    times = events.time_s if isinstance(events, DetectionRecord) else np.asarray(events, float)
    if len(times) > 1 and np.any(np.diff(times) < 0):
        raise DomainError("events must be sorted by time")
    if dead_time_s < 0:
        raise DomainError("dead_time_s must be >= 0")
    if dead_time_s == 0 or len(times) == 0:
        return events
    keep = []
    i = int(np.searchsorted(times, last_accept_s + dead_time_s, side="left"))
    n = len(times)
    while i < n:
        keep.append(i)
        j = int(np.searchsorted(times, times[i] + dead_time_s, side="left"))
        # dead time below float resolution at times[i]: still skip coincident events
        i = j if j > i else int(np.searchsorted(times, times[i], side="right"))
    idx = np.asarray(keep, dtype=np.int64)
    if isinstance(events, DetectionRecord):
        return events.take(idx)
    return times[idx]


def time_window_filter(events: DetectionRecord, slot_period_s: float, window_s: float,
                       jitter_sigma_s: float, seed=None, t_origin_s: float = 0.0):
    """Jitter event times and classify them against the slot clock.

    Each time gets zero-mean Gaussian noise of width ``jitter_sigma_s``.
    Events strictly within ``window_s`` of a slot center become EARLY or LATE
    according to the slot's parity; the rest are dropped as out of window.

    Returns ``(accepted, filtering_fraction)`` where the fraction is
    accepted / total (1.0 for an empty input).
    """
    if window_s < 0:
        raise DomainError("window_s must be >= 0")
    n = len(events)
    if n == 0:
        return DetectionRecord.empty(), 1.0
    t = events.time_s
    if jitter_sigma_s > 0:
        t = t + np.random.default_rng(seed).normal(0.0, jitter_sigma_s, size=n)
    rel = (t - t_origin_s) / slot_period_s
    k = np.rint(rel).astype(np.int64)
    offset = np.abs(rel - k) * slot_period_s
    ok = offset < window_s
    order = np.argsort(t[ok], kind="stable")
    kk = k[ok][order]
    accepted = DetectionRecord(t[ok][order], kk // 2, (kk % 2).astype(np.int8),
                               events.is_dark[ok][order])
    return accepted, float(np.count_nonzero(ok)) / n


def signal_click_prob(budget: OpticalBudget, detector: DetectorParams, f: float = 0.5) -> float:
    """Click probability of one non-empty slot."""
    return -math.expm1(-nonempty_mu(budget, f) * channel_transmittance(budget, detector))


def dark_click_prob_per_pair(budget: OpticalBudget, detector: DetectorParams) -> float:
    """Probability that a dark count lands inside one of the pair's two acceptance windows."""
    gate = min(2.0 * detector.window_s, budget.pulse_gap_s)
    return -math.expm1(-detector.dcr_hz * 2.0 * gate)


def qber_model(budget: OpticalBudget, detector: DetectorParams, f: float = 0.5) -> float:
    """Expected error fraction of the sifted key.

    ``(0.5 * dark + p_baseline * signal) / (signal + dark)``, with ``signal``
    the click probability of the occupied slot and ``dark`` the in-window
    dark-count probability over both slots of a pair.  Returns 0 when nothing
    clicks.
    """
    s = signal_click_prob(budget, detector, f)
    d = dark_click_prob_per_pair(budget, detector)
    if s + d == 0:
        return 0.0
    return (0.5 * d + detector.p_baseline * s) / (s + d)


def baseline_for_qber(budget: OpticalBudget, detector: DetectorParams, target: float,
                      f: float = 0.5) -> float:
    """The ``p_baseline`` at which :func:`qber_model` equals ``target``."""
    s = signal_click_prob(budget, detector, f)
    d = dark_click_prob_per_pair(budget, detector)
    if s == 0:
        raise DomainError("no signal: QBER is fixed at 0.5")
    p = (target * (s + d) - 0.5 * d) / s
    if not 0.0 <= p <= 0.5:
        raise DomainError(f"target QBER {target} unreachable (needs p_baseline={p:.4g})")
    return p


@dataclass
class LinkRun:
    """Aggregated outcome of a simulated stretch of pulse pairs."""

    n_pairs: int
    duration_s: float
    raw_events: int
    raw_signal_events: int
    accepted_clicks: int
    in_window_clicks: int
    filtering_fraction: float
    alice: BitBlock
    bob: BitBlock
    double_clicks: int
    decoy_clicks: int

    @property
    def raw_signal_rate_hz(self) -> float:
        return self.raw_signal_events / self.duration_s

    @property
    def click_rate_hz(self) -> float:
        return self.accepted_clicks / self.duration_s

    @property
    def effective_click_rate_hz(self) -> float:
        return self.in_window_clicks / self.duration_s

    @property
    def sifted_qber(self) -> float:
        n = len(self.alice)
        return float(np.count_nonzero(self.alice.bits != self.bob.bits)) / n if n else 0.0


def detect(frame: SymbolFrame, budget: OpticalBudget, detector: DetectorParams, seed,
           pair_offset: int = 0, last_accept_s: float = -math.inf):
    """Run one frame through the physical layer.

    Returns ``(raw, accepted, in_window, filtering_fraction)``.
    """
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    tx_seq, jit_seq = ss.spawn(2)
    raw = simulate_transmission(frame, budget, detector, tx_seq, pair_offset)
    accepted = apply_dead_time(raw, detector.dead_time_s, last_accept_s)
    window, frac = time_window_filter(accepted, budget.pulse_gap_s, detector.window_s,
                                      detector.jitter_sigma_s, jit_seq)
    return raw, accepted, window, frac


def simulate_link(budget: OpticalBudget, detector: DetectorParams, n_pairs: int, seed: int,
                  f: float = 0.5, chunk_pairs: int = 1 << 22) -> LinkRun:
    """Simulate ``n_pairs`` pulse pairs in chunks and sift the result.

    Each chunk gets its own frame and seed substream; detector dead time is
    carried across chunk boundaries.  The run is deterministic for a given
    ``(seed, chunk_pairs)``.
    """
    if n_pairs < 1:
        raise DomainError("n_pairs must be >= 1")
    root = np.random.SeedSequence(seed)
    mu_slot = nonempty_mu(budget, f)
    last = -math.inf
    raw_n = raw_sig = acc_n = win_n = 0
    a_bits, b_bits, idx = [], [], []
    doubles = decoys = 0
    n_chunks = -(-n_pairs // chunk_pairs)
    for c, cseq in enumerate(root.spawn(n_chunks)):
        start = c * chunk_pairs
        size = min(chunk_pairs, n_pairs - start)
        fseq, dseq = cseq.spawn(2)
        frame = encode_sequence(int(fseq.generate_state(1, np.uint64)[0]), size, f, mu_slot)
        raw, accepted, window, _ = detect(frame, budget, detector, dseq, pair_offset=start,
                                          last_accept_s=last)
        if len(accepted):
            last = float(accepted.time_s[-1])
        raw_n += len(raw)
        raw_sig += int(np.count_nonzero(~raw.is_dark))
        acc_n += len(accepted)
        win_n += len(window)
        local = window.take(slice(None))
        local.pair_index = local.pair_index - start
        inside = (local.pair_index >= 0) & (local.pair_index < size)
        a, b = sift(frame, local.take(inside))
        a_bits.append(a.bits)
        b_bits.append(b.bits)
        idx.append(a.index + start)
        doubles += a.meta["double_clicks"]
        decoys += a.meta["decoy_clicks"]
    meta = {"seed": root.entropy, "f": f, "mu_slot": mu_slot, "n_pairs": int(n_pairs)}
    index = np.concatenate(idx)
    alice = BitBlock(np.concatenate(a_bits), 1, dict(meta), index)
    bob = BitBlock(np.concatenate(b_bits), 1, dict(meta), index.copy())
    duration = 2 * n_pairs * budget.pulse_gap_s
    return LinkRun(n_pairs, duration, raw_n, raw_sig, acc_n, win_n,
                   win_n / acc_n if acc_n else 1.0, alice, bob, doubles, decoys)


def renewal_click_counts(count_rate_hz: float, dead_time_s: float, edges_s: np.ndarray,
                         seed) -> np.ndarray:
    """Accepted-click counts per time bin for a Poisson source behind dead time.

    Uses the renewal structure of a non-paralyzable detector fed by a
    Poisson process: successive registered clicks are separated by the dead
    time plus an exponential wait.  Needs O(clicks) work instead of
    O(pulses), which makes hour-long runs cheap.
    """
    edges_s = np.asarray(edges_s, dtype=float)
    counts = np.zeros(len(edges_s) - 1, dtype=np.int64)
    if count_rate_hz <= 0:
        return counts
    rng = np.random.default_rng(seed)
    mean_gap = dead_time_s + 1.0 / count_rate_hz
    t = edges_s[0] + rng.exponential(1.0 / count_rate_hz)
    end = edges_s[-1]
    batch = 1 << 20
    while t < end:
        gaps = dead_time_s + rng.exponential(1.0 / count_rate_hz, size=batch)
        times = t + np.concatenate([[0.0], np.cumsum(gaps[:-1])])
        counts += np.histogram(times[times < end], bins=edges_s)[0]
        t = times[-1] + gaps[-1]
        if times[-1] >= end:
            break
        batch = int(min(1 << 22, max(1024, (end - t) / mean_gap * 1.05 + 64)))
    return counts
