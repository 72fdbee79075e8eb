"""Coherent one-way QKD link simulator: optics budget, detector Monte Carlo,
sifting, LDPC reconciliation, Toeplitz privacy amplification and a two-party
session runner."""

from .errors import (CalibrationError, ConfigError, CowQkdError, DomainError,
                     NumericalIntegrityError, ProtocolError, SessionAbort)
from .optics import KeyRateReport, OpticalBudget, analytic_report

__version__ = "0.1.0"

__all__ = ["CalibrationError", "ConfigError", "CowQkdError", "DomainError", "KeyRateReport",
           "NumericalIntegrityError", "OpticalBudget", "ProtocolError", "SessionAbort",
           "analytic_report", "__version__"]
