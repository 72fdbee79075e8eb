"""Parameter sweeps, filtering calibration, stability runs and CSV output."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import detection, optics
from .errors import CalibrationError, ConfigError, SessionAbort
from .optics import KeyRateReport, OpticalBudget
from .privacy import output_length
from .reconciliation import choose_code_rate, decode, ldpc_generate, syndrome

DR_LADDER = (0.03125, 0.0625, 0.125, 0.25, 0.5)
CR_GRID = (0.5, 0.75, 0.9, 0.95)
DT_GRID_US = (20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0)
BASE_DISTANCES_KM = (40.0, 80.0, 120.0)
ATTENUATOR_DB = 5.0
DEFAULT_QBER_CEILING = 0.06
# Intrinsic error floor (interferometer / modulator extinction) of the lab model.
DEFAULT_P_BASELINE = 0.02
CSV_HEADER = ("distance_km", "extra_db", "dr", "cr", "dead_time_us", "bias_v",
              "total_clicks", "effective_clicks", "qber", "kr_bps")


class Mode(enum.Enum):
    ANALYTIC = "analytic"
    MONTE_CARLO = "montecarlo"
    END_TO_END = "endtoend"


@dataclass(frozen=True)
class KrTarget:
    """A reported key rate at one operating point."""

    kr_bps: float
    dr: float
    cr: float
    dead_time_s: float
    label: str = ""


# Reported operating points used to calibrate one filtering value per
# effective distance.  120 km and 145 km are calibrated on the endpoints of
# their reported ranges (max: DR 3.125 %, CR 50 %; min: DR 50 %, CR 90 %).
REPORTED_TARGETS: dict[float, tuple[KrTarget, ...]] = {
    40.0: (KrTarget(14562, 0.03125, 0.5, 20e-6, "40 km DT 20us CR 50%"),
           KrTarget(5923, 0.03125, 0.5, 50e-6, "40 km DT 50us CR 50%")),
    80.0: (KrTarget(934, 0.03125, 0.9, 45e-6, "80 km DT 45us CR 90%"),
           KrTarget(6853, 0.03125, 0.5, 30e-6, "80 km DT 30us CR 50%"),
           KrTarget(5637, 0.03125, 0.5, 45e-6, "80 km DT 45us CR 50%")),
    120.0: (KrTarget(2410, 0.03125, 0.5, 50e-6, "120 km range max"),
            KrTarget(241, 0.5, 0.9, 50e-6, "120 km range min")),
    145.0: (KrTarget(1184, 0.03125, 0.5, 50e-6, "145 km range max"),
            KrTarget(154, 0.5, 0.9, 50e-6, "145 km range min")),
}

# Reported values that are not calibration targets, kept for the report.
REPORTED_SIDE_VALUES: dict[float, tuple[KrTarget, ...]] = {
    40.0: (KrTarget(1466, 0.03125, 0.9, 40e-6, "40 km CR 90% best"),
           KrTarget(616, 0.5, 0.9, 50e-6, "40 km range min")),
    80.0: (KrTarget(476, 0.5, 0.9, 50e-6, "80 km range min"),),
    120.0: (KrTarget(671, 0.03125, 0.9, 50e-6, "120 km CR 90% best"),),
}


def preset_budget(distance_km: float, extra_db: float = 0.0, **changes) -> OpticalBudget:
    """Lab budget at the given fiber length, with the calibrated filtering value."""
    base = OpticalBudget(distance_km=distance_km, extra_loss_db=extra_db)
    eff = effective_distance_km(base)
    changes.setdefault("filtering_pct", filtering_for(eff))
    return base.with_(**changes)


def effective_distance_km(budget: OpticalBudget) -> float:
    return budget.loss_db / budget.loss_per_km if budget.loss_per_km > 0 else budget.distance_km


def _target_ratios(distance_km: float, targets: Sequence[KrTarget], template: OpticalBudget):
    ratios = []
    for t in targets:
        if t.kr_bps <= 0:
            raise CalibrationError(f"target {t} must be positive")
        b = template.with_(distance_km=distance_km, dead_time_s=t.dead_time_s, filtering_pct=1.0)
        unit = optics.analytic_report(b, t.dr, t.cr).secret_kr_bps
        if unit <= 0:
            raise CalibrationError(f"no clicks at the operating point of {t}")
        ratios.append(unit / t.kr_bps)
    return np.asarray(ratios)


def fit_filtering(distance_km: float, targets: Sequence[KrTarget], objective: str = "lsq",
                  template: Optional[OpticalBudget] = None) -> float:
    """One filtering fraction reproducing a set of reported key rates.

    With ``r_i`` the key rate at filtering 1 divided by the target:

    * ``"lsq"`` minimizes ``sum (F r_i - 1)^2``: ``F = sum r / sum r^2``;
    * ``"minimax"`` minimizes the largest relative error: ``F = 2 / (min r + max r)``.

    A fit above 1 is physically impossible and raises
    :class:`CalibrationError`.
    """
    if not targets:
        raise CalibrationError("need at least one target")
    r = _target_ratios(distance_km, targets, template or OpticalBudget())
    if objective == "lsq":
        fit = float(r.sum() / (r * r).sum())
    elif objective == "minimax":
        fit = float(2.0 / (r.min() + r.max()))
    else:
        raise ConfigError(f"unknown objective {objective!r}")
    if fit > 1.0:
        raise CalibrationError(f"required filtering {fit:.4f} exceeds 1 at {distance_km} km")
    return fit


def calibrate_presets(objective: str = "minimax", targets=None) -> dict[float, float]:
    targets = REPORTED_TARGETS if targets is None else targets
    return {d: fit_filtering(d, ts, objective) for d, ts in sorted(targets.items())}


_FITTED: dict[float, float] = {}


def filtering_for(effective_km: float, table: Optional[dict] = None) -> float:
    """Calibrated filtering at an effective distance.

    Linear interpolation between calibrated distances, clamped at the ends.
    """
    if table is None:
        if not _FITTED:
            _FITTED.update(calibrate_presets())
        table = _FITTED
    xs = sorted(table)
    return float(np.interp(effective_km, xs, [table[x] for x in xs]))


@dataclass
class SweepSpec:
    mode: Mode = Mode.ANALYTIC
    distances_km: Sequence[float] = BASE_DISTANCES_KM
    extra_db: Sequence[float] = (0.0,)
    dr: Sequence[float] = DR_LADDER
    cr: Sequence[float] = (0.5, 0.75, 0.9)
    dead_times_us: Sequence[float] = (50.0,)
    bias_v: Sequence[float] = (2.0,)
    seed: int = 0
    n_pairs: int = 10**7
    f: float = 0.5
    qber_ceiling: float = DEFAULT_QBER_CEILING
    p_baseline: float = DEFAULT_P_BASELINE
    allow_arbitrary_dr: bool = False
    filtering: Optional[dict] = None
    code_rate: object = "auto"
    recon_blocks: int = 8
    workers: int = 1
    output: Optional[Path] = None

    def validate(self) -> None:
        grids = dict(distances_km=self.distances_km, extra_db=self.extra_db, dr=self.dr, cr=self.cr,
                     dead_times_us=self.dead_times_us, bias_v=self.bias_v)
        for name, g in grids.items():
            if len(g) == 0:
                raise ConfigError(f"grid {name} is empty")
        for v in list(self.dr) + list(self.cr):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"DR/CR value {v} outside [0, 1]")
        if not self.allow_arbitrary_dr:
            off = [v for v in self.dr if not any(math.isclose(v, l) for l in DR_LADDER)]
            if off:
                raise ConfigError(f"DR values {off} are not on the ladder {DR_LADDER}; "
                                  "pass allow_arbitrary_dr to override")
        if self.n_pairs < 1:
            raise ConfigError("n_pairs must be >= 1")

    def points(self):
        return list(itertools.product(self.distances_km, self.extra_db, self.dead_times_us,
                                      self.bias_v, self.dr, self.cr))


@dataclass
class SweepResult:
    rows: list
    meta: dict = field(default_factory=dict)


def build_id() -> str:
    """Short content hash of the package sources."""
    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _recon_success(qber: float, seed: int, n_blocks: int, code_rate) -> float:
    """Fraction of synthetic 1024-bit blocks at the given QBER that decode."""
    if n_blocks <= 0:
        return 1.0
    rate = choose_code_rate(qber, code_rate)
    h = ldpc_generate(1024, rate, seed)
    rng = np.random.default_rng([seed, 7])
    ok = 0
    p = max(qber, 0.01)
    for _ in range(n_blocks):
        a = rng.integers(0, 2, 1024, dtype=np.uint8)
        b = a ^ (rng.random(1024) < qber).astype(np.uint8)
        res = decode(h, b, syndrome(h, a), p)
        ok += bool(res.ok and np.array_equal(res.bits, a))
    return ok / n_blocks


def _point(spec: SweepSpec, idx: int, dist, extra, dt_us, bv, dr, cr) -> KeyRateReport:
    dt = dt_us / 1e6
    budget = OpticalBudget(distance_km=dist, extra_loss_db=extra, dead_time_s=dt)
    fil = filtering_for(effective_distance_km(budget), spec.filtering)
    budget = budget.with_(filtering_pct=fil)
    detector = detection.detector_for(budget, bias_v=bv, p_baseline=spec.p_baseline)
    budget = budget.with_(dcr_hz=detector.dcr_hz)
    if dt < budget.pulse_gap_s:
        nan = float("nan")
        return KeyRateReport(budget, dr, cr, nan, nan, nan, nan, bias_v=bv, valid=False,
                             note="dead time below pulse gap")
    qber_expected = detection.qber_model(budget, detector, spec.f)
    if spec.mode is Mode.ANALYTIC:
        return optics.analytic_report(budget, dr, cr, bias_v=bv, qber=qber_expected)

    seed = [spec.seed, idx]
    if spec.mode is Mode.MONTE_CARLO:
        run = detection.simulate_link(budget, detector, spec.n_pairs, seed, spec.f)
        qber = run.sifted_qber if len(run.alice) else 0.5
        # the calibrated fraction covers the system filtering the simulated window does not model
        eff = optics.effective_clicks(run.effective_click_rate_hz, budget.filtering_pct)
        note = ""
        if qber > spec.qber_ceiling:
            kr, note = 0.0, "qber_exceeded"
        else:
            succ = _recon_success(qber, spec.seed + idx, spec.recon_blocks, spec.code_rate)
            kr = eff * (1.0 - dr) * output_length(1024, cr) / 1024 * succ
        return KeyRateReport(budget, dr, cr, run.click_rate_hz, eff, qber, kr, bias_v=bv, note=note,
                             extras={"sifted_bits": len(run.alice),
                                     "filtering_fraction": run.filtering_fraction})

    from .link import PhysicalChannel, SessionConfig, run_loopback

    cfg = SessionConfig(n_pairs=spec.n_pairs, f=spec.f, dr=dr, cr=cr, qber_ceiling=spec.qber_ceiling,
                        code_rate=spec.code_rate, budget=budget, quantum=PhysicalChannel(detector))
    res, _ = run_loopback(cfg, spec.seed + idx)
    if isinstance(res, SessionAbort):
        return KeyRateReport(budget, dr, cr, 0.0, 0.0, float("nan"), 0.0, bias_v=bv, note=res.reason)
    rep = res.report
    return KeyRateReport(budget, dr, cr, rep.total_clicks_hz, rep.effective_clicks_hz, rep.qber,
                         rep.secret_kr_bps, bias_v=bv, extras=rep.extras)


def _point_star(args):
    return _point(*args)


def run_sweep(spec: SweepSpec) -> SweepResult:
    """Evaluate every grid point; rows come back in grid order."""
    spec.validate()
    t0 = time.perf_counter()
    jobs = [(spec, i, *p) for i, p in enumerate(spec.points())]
    if spec.workers > 1 and spec.mode is not Mode.ANALYTIC:
        with ProcessPoolExecutor(spec.workers) as pool:
            rows = list(pool.map(_point_star, jobs))
    else:
        rows = [_point(*j) for j in jobs]
    meta = {"build_id": build_id(), "seed": spec.seed, "mode": spec.mode.value,
            "n_pairs": spec.n_pairs, "wall_time_s": time.perf_counter() - t0}
    result = SweepResult(rows, meta)
    if spec.output is not None:
        emit_csv(result, spec.output)
    return result


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def csv_text(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in result.rows:
        b = r.budget
        w.writerow([_fmt(b.distance_km), _fmt(b.extra_loss_db), _fmt(r.dr), _fmt(r.cr),
                    _fmt(b.dead_time_s * 1e6), _fmt(r.bias_v), _fmt(r.total_clicks_hz),
                    _fmt(r.effective_clicks_hz), _fmt(r.qber), _fmt(r.secret_kr_bps)])
    return buf.getvalue()


def emit_csv(result: SweepResult, path) -> Path:
    """Write the fixed-header CSV; identical results give identical bytes."""
    path = Path(path)
    try:
        path.write_text(csv_text(result))
    except OSError as exc:
        raise OSError(f"cannot write sweep CSV to {path}: {exc}") from exc
    return path


@dataclass
class StabilitySeries:
    t_s: np.ndarray
    kr_bps: np.ndarray
    qber: float

    @property
    def rel_std(self) -> float:
        if len(self.kr_bps) < 2 or np.ptp(self.kr_bps) == 0:
            return 0.0
        m = float(np.mean(self.kr_bps))
        return float(np.std(self.kr_bps, ddof=1)) / m if m > 0 and len(self.kr_bps) > 1 else 0.0

    def trend(self):
        """Least-squares slope and its two-sided p-value (t-test on the slope)."""
        if np.ptp(self.kr_bps) == 0:
            return 0.0, 1.0
        fit = stats.linregress(self.t_s, self.kr_bps)
        return float(fit.slope), float(fit.pvalue)


def stability_run(budget: OpticalBudget, duration_s: float = 7200.0, interval_s: float = 60.0,
                  seed: int = 0, *, dr: float = 0.03125, cr: float = 0.9, bias_v: float = 2.0,
                  mode: Mode = Mode.MONTE_CARLO, f: float = 0.5,
                  qber_ceiling: float = DEFAULT_QBER_CEILING,
                  p_baseline: float = DEFAULT_P_BASELINE) -> StabilitySeries:
    """Key rate sampled once per interval at fixed operating parameters.

    Monte Carlo mode draws registered clicks with the renewal sampler
    (signal plus dark counts behind the dead time), keeps dark clicks that
    fall inside an acceptance window, scales by the calibrated filtering
    fraction and applies the key-rate formula per interval.
    """
    if duration_s < 2 * interval_s:
        raise ConfigError("duration must cover at least two intervals")
    n = int(duration_s // interval_s)
    edges = np.arange(n + 1) * interval_s
    mids = edges[:-1] + interval_s / 2
    detector = detection.detector_for(budget, bias_v=bias_v, p_baseline=p_baseline)
    qber = detection.qber_model(budget, detector, f)
    if mode is Mode.ANALYTIC:
        kr = optics.analytic_report(budget, dr, cr).secret_kr_bps
        return StabilitySeries(mids, np.full(n, kr), qber)
    sig = optics.detected_photon_rate(budget)
    dcr = detector.dcr_hz
    root = np.random.SeedSequence(seed)
    s_clicks, s_thin = root.spawn(2)
    counts = detection.renewal_click_counts(sig + dcr, budget.dead_time_s, edges, s_clicks)
    rng = np.random.default_rng(s_thin)
    dark = rng.binomial(counts, dcr / (sig + dcr)) if sig + dcr > 0 else np.zeros_like(counts)
    gate_frac = min(1.0, 2.0 * detector.window_s / budget.pulse_gap_s)
    dark_kept = rng.binomial(dark, gate_frac)
    eff = optics.effective_clicks((counts - dark + dark_kept) / interval_s, budget.filtering_pct)
    kr = optics.secret_key_rate(1.0, dr, cr) * eff
    if qber > qber_ceiling:
        kr = np.zeros_like(kr)
    return StabilitySeries(mids, kr.astype(float), qber)
