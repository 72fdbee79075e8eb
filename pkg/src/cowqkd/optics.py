"""Closed-form link budget and key-rate arithmetic.

Every function here is pure and cheap.  The chain is::

    loss_db      = distance * loss_per_km + extra_loss_db
    mu_detector  = mu * 10**(-loss_db / 10) * coupler_data_fraction * efficiency
    count_rate   = pulse_rate * mu_detector
    clicks       = 1 / (1 / count_rate + dead_time)          (non-paralyzable)
    effective    = clicks * filtering_pct
    key_rate     = effective * (1 - DR) * (1 - CR)

The Monte Carlo simulator in :mod:`cowqkd.detection` is checked against these
expressions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from .errors import DomainError

# Total loss is resolved to the nanodecibel so that "x km of fiber" and
# "an attenuator of x * loss_per_km dB" give bit-identical budgets.
_LOSS_DECIMALS = 9


def _check_fraction(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {value!r}")


def _check_nonneg(name: str, value: float) -> None:
    if not value >= 0.0:
        raise DomainError(f"{name} must be >= 0, got {value!r}")


@dataclass(frozen=True)
class OpticalBudget:
    """Physical-layer parameters of one link configuration.

    Defaults are the lab system: 0.5 photons per pulse at 500 MHz over
    0.2 dB/km fiber, a 90:10 data/monitor coupler and a 10 % efficient SPAD
    with 50 us dead time.
    """

    distance_km: float = 80.0
    loss_per_km: float = 0.2
    extra_loss_db: float = 0.0
    mu: float = 0.5
    pulse_rate_hz: float = 5e8
    coupler_data_fraction: float = 0.9
    detector_efficiency: float = 0.1
    dead_time_s: float = 50e-6
    dcr_hz: float = 0.0
    filtering_pct: float = 1.0

    def __post_init__(self):
        _check_nonneg("distance_km", self.distance_km)
        _check_nonneg("loss_per_km", self.loss_per_km)
        _check_nonneg("extra_loss_db", self.extra_loss_db)
        _check_nonneg("dead_time_s", self.dead_time_s)
        _check_nonneg("dcr_hz", self.dcr_hz)
        if not self.mu > 0:
            raise DomainError(f"mu must be > 0, got {self.mu!r}")
        if not self.pulse_rate_hz > 0:
            raise DomainError(f"pulse_rate_hz must be > 0, got {self.pulse_rate_hz!r}")
        _check_fraction("coupler_data_fraction", self.coupler_data_fraction)
        _check_fraction("detector_efficiency", self.detector_efficiency)
        _check_fraction("filtering_pct", self.filtering_pct)

    @property
    def loss_db(self) -> float:
        return fiber_loss_db(self.distance_km, self.loss_per_km, self.extra_loss_db)

    @property
    def transmittance(self) -> float:
        """Probability-scale factor from source to detector avalanche."""
        return (10.0 ** (-self.loss_db / 10.0)) * self.coupler_data_fraction * self.detector_efficiency

    @property
    def pulse_gap_s(self) -> float:
        """Spacing of consecutive laser pulses."""
        return 1.0 / self.pulse_rate_hz

    def with_(self, **changes) -> "OpticalBudget":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class KeyRateReport:
    """One evaluated operating point."""

    budget: OpticalBudget
    dr: float
    cr: float
    total_clicks_hz: float
    effective_clicks_hz: float
    qber: float
    secret_kr_bps: float
    bias_v: float = 2.0
    valid: bool = True
    note: str = ""
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.effective_clicks_hz > self.total_clicks_hz * (1 + 1e-12) + 1e-12:
            raise DomainError("effective clicks cannot exceed total clicks")


def fiber_loss_db(distance_km: float, loss_per_km: float, extra_loss_db: float = 0.0) -> float:
    """Total channel loss in dB: fiber attenuation plus lumped extra loss."""
    for name, v in (("distance_km", distance_km), ("loss_per_km", loss_per_km),
                    ("extra_loss_db", extra_loss_db)):
        _check_nonneg(name, v)
    return round(distance_km * loss_per_km + extra_loss_db, _LOSS_DECIMALS)


def attenuate_mean_photon(mu_in: float, loss_db: float) -> float:
    """Mean photon number after ``loss_db`` of attenuation."""
    if not mu_in > 0:
        raise DomainError(f"mu_in must be > 0, got {mu_in!r}")
    _check_nonneg("loss_db", loss_db)
    return mu_in * 10.0 ** (-loss_db / 10.0)


def detected_photons_per_pulse(budget: OpticalBudget) -> float:
    """Mean photons per pulse reaching the data-line detector, after efficiency."""
    at_bob = attenuate_mean_photon(budget.mu, budget.loss_db)
    return at_bob * budget.coupler_data_fraction * budget.detector_efficiency


def detected_photon_rate(budget: OpticalBudget) -> float:
    """Detector count rate (1/s) before dead time, linear in mu."""
    return budget.pulse_rate_hz * detected_photons_per_pulse(budget)


def click_rate_dead_time(count_rate_hz: float, dead_time_s: float) -> float:
    """Registered clicks per second for a non-paralyzable detector.

    Equals ``1 / (1/count_rate + dead_time)``, i.e. ``lam / (1 + lam * tau)``.
    A zero count rate gives zero clicks.
    """
    _check_nonneg("count_rate_hz", count_rate_hz)
    _check_nonneg("dead_time_s", dead_time_s)
    if count_rate_hz == 0:
        return 0.0
    return 1.0 / (1.0 / count_rate_hz + dead_time_s)


def effective_clicks(total_clicks_hz: float, filtering_pct: float) -> float:
    _check_fraction("filtering_pct", filtering_pct)
    return total_clicks_hz * filtering_pct


def secret_key_rate(effective_clicks_hz: float, dr: float, cr: float) -> float:
    """Final key rate after disclosure and compression, in bits per second."""
    _check_fraction("DR", dr)
    _check_fraction("CR", cr)
    return effective_clicks_hz * (1.0 - dr) * (1.0 - cr)


def equivalent_distance_km(extra_loss_db: float, loss_per_km: float) -> float:
    """Length of fiber whose attenuation equals ``extra_loss_db``."""
    if not loss_per_km > 0:
        raise DomainError(f"loss_per_km must be > 0, got {loss_per_km!r}")
    _check_nonneg("extra_loss_db", extra_loss_db)
    return extra_loss_db / loss_per_km


def total_clicks(budget: OpticalBudget, include_dcr: bool = False) -> float:
    """Click rate after dead time; ``include_dcr`` adds dark counts to the input rate."""
    rate = detected_photon_rate(budget)
    if include_dcr:
        rate += budget.dcr_hz
    return click_rate_dead_time(rate, budget.dead_time_s)


def analytic_report(
    budget: OpticalBudget,
    dr: float,
    cr: float,
    *,
    bias_v: float = 2.0,
    qber: float = 0.0,
    include_dcr: bool = False,
) -> KeyRateReport:
    """Evaluate the closed-form key rate at one operating point.

    ``qber`` is carried through unchanged; the analytic key rate never
    depends on it.
    """
    clicks = total_clicks(budget, include_dcr=include_dcr)
    eff = effective_clicks(clicks, budget.filtering_pct)
    kr = secret_key_rate(eff, dr, cr)
    return KeyRateReport(budget=budget, dr=dr, cr=cr, total_clicks_hz=clicks,
                         effective_clicks_hz=eff, qber=qber, secret_kr_bps=kr, bias_v=bias_v)


def round_sig(x: float, sig: int = 3) -> float:
    """Round ``x`` to ``sig`` significant figures."""
    if x == 0 or not math.isfinite(x):
        return x
    return round(x, sig - 1 - int(math.floor(math.log10(abs(x)))))


def budget_trace(budget: OpticalBudget, sig_figs: Optional[int] = None) -> dict:
    """Every intermediate of the hand calculation, in order.

    With ``sig_figs`` set, each inexact step (the power of ten, a reciprocal,
    a sum) is rounded before it feeds the next, while products with the
    stated fractions are carried as written, which is how the chain is done
    by hand.  Without it the chain stays in full floating point.
    """
    r = (lambda v: round_sig(v, sig_figs)) if sig_figs else (lambda v: v)
    # strips binary noise from exact decimal products without hiding digits
    exact = (lambda v: round_sig(v, 12)) if sig_figs else (lambda v: v)
    out = {}
    out["loss_db"] = r(budget.loss_db)
    out["photons_at_bob"] = r(budget.mu * 10.0 ** (-out["loss_db"] / 10.0))
    out["photons_data_line"] = exact(out["photons_at_bob"] * budget.coupler_data_fraction)
    out["photons_detected"] = exact(out["photons_data_line"] * budget.detector_efficiency)
    out["count_rate_hz"] = exact(budget.pulse_rate_hz * out["photons_detected"])
    if out["count_rate_hz"] > 0:
        out["gap_s"] = r(1.0 / out["count_rate_hz"])
        out["cycle_s"] = r(out["gap_s"] + budget.dead_time_s)
        out["clicks_hz"] = 1.0 / out["cycle_s"]
    else:
        out["gap_s"] = math.inf
        out["cycle_s"] = math.inf
        out["clicks_hz"] = 0.0
    return out
