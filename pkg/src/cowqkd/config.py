"""INI configuration for the command-line tool.

Sections:

``[link]``        optical budget fields (distance, extra loss, source, detector efficiency)
``[detector]``    bias voltage, intrinsic error floor, jitter and window
``[postprocess]`` DR, CR, QBER ceiling, LDPC code rate and block size
``[sweep]``       comma-separated grids, mode, seed and pulse-pair count
``[calibration]`` fit objective
``[filtering]``   optional fixed filtering fraction per effective distance (km = value)

Command-line flags override file values, which override the built-in defaults.
"""

from __future__ import annotations

import configparser
import io
from pathlib import Path
from typing import Optional

from .errors import ConfigError

DEFAULTS: dict[str, dict[str, str]] = {
    "link": {
        "distance_km": "80",
        "extra_db": "0",
        "loss_per_km": "0.2",
        "mu": "0.5",
        "pulse_rate_hz": "5e8",
        "coupler_data_fraction": "0.9",
        "detector_efficiency": "0.1",
        "dead_time_us": "50",
    },
    "detector": {
        "bias_v": "2.0",
        "p_baseline": "0.02",
        "jitter_sigma_ps": "50",
        "window_ns": "0.5",
    },
    "postprocess": {
        "dr": "0.03125",
        "cr": "0.5",
        "qber_ceiling": "0.06",
        "code_rate": "auto",
        "block_size": "1024",
    },
    "sweep": {
        "mode": "analytic",
        "distances_km": "40, 80, 120",
        "extra_db": "0",
        "dr": "0.03125, 0.0625, 0.125, 0.25, 0.5",
        "cr": "0.5, 0.75, 0.9",
        "dead_times_us": "50",
        "bias_v": "2.0",
        "seed": "0",
        "n_pairs": "10000000",
        "allow_arbitrary_dr": "false",
        "workers": "1",
    },
    "calibration": {
        "objective": "minimax",
    },
    "filtering": {},
}


def load_config(path: Optional[str | Path] = None) -> configparser.ConfigParser:
    """Defaults, overlaid with ``path`` if given.  Unknown sections or keys are errors."""
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    if path is None:
        return cp
    user = configparser.ConfigParser()
    try:
        with open(path) as fh:
            user.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    for section in user.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}] in {path}")
        for key, value in user[section].items():
            if section != "filtering" and key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}] of {path}")
            cp[section][key] = value
    return cp


def dump_config(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def get_float(cp, section: str, key: str) -> float:
    try:
        return cp.getfloat(section, key)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} is not a number: {cp[section][key]!r}") from exc


def get_int(cp, section: str, key: str) -> int:
    try:
        return int(float(cp[section][key]))
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} is not an integer: {cp[section][key]!r}") from exc


def get_bool(cp, section: str, key: str) -> bool:
    try:
        return cp.getboolean(section, key)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} is not a boolean: {cp[section][key]!r}") from exc


def parse_list(text: str, what: str = "value") -> tuple[float, ...]:
    """Comma-separated floats; an empty string is an empty grid."""
    items = [t.strip() for t in text.split(",") if t.strip()]
    try:
        return tuple(float(t) for t in items)
    except ValueError as exc:
        raise ConfigError(f"bad {what} list {text!r}") from exc


def filtering_table(cp) -> Optional[dict[float, float]]:
    """Fixed filtering values from ``[filtering]``, or None to use the fitted presets."""
    sec = cp["filtering"]
    if not len(sec):
        return None
    try:
        return {float(k): float(v) for k, v in sec.items()}
    except ValueError as exc:
        raise ConfigError(f"bad [filtering] entry: {exc}") from exc
