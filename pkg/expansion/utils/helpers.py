"""Unit-suffixed configuration keys and their conversion to SI."""
import math
from typing import Optional, Tuple

from simulator.core_model import K_B, ConfigurationError

AXIS_LABELS = ("u", "v", "z", "x", "y")

# Multiplier from the unit suffix of a configuration key to SI.
# Frequencies in kHz become angular frequencies in rad/s.
UNIT_FACTORS = {
    "khz": 2 * math.pi * 1e3,
    "pm": 1e-12,
    "nm": 1e-9,
    "us": 1e-6,
    "fg": 1e-18,
    "k_per_s": K_B,
    "per_s": 1.0,
    "mbar": 100.0,
    "deg": math.pi / 180,
    "m2_per_hz": 1.0,
}

# Longest first so that "k_per_s" wins over "per_s"
_SUFFIXES = sorted(UNIT_FACTORS, key=len, reverse=True)


def split_key(key: str) -> Tuple[str, Optional[str], Optional[str]]:
    """
    Splits a flat configuration key into (quantity, axis, unit).

    'sigma0_z_pm' -> ('sigma0', 'z', 'pm'), 'mass_fg' -> ('mass', None, 'fg'),
    'potential_u' -> ('potential', 'u', None), 'shots' -> ('shots', None, None).
    """
    stem, unit = key, None
    for suffix in _SUFFIXES:
        if key.endswith("_" + suffix):
            stem, unit = key[: -len(suffix) - 1], suffix
            break
    if len(stem) > 2 and stem[-2] == "_" and stem[-1] in AXIS_LABELS:
        return stem[:-2], stem[-1], unit
    return stem, None, unit


def to_si(key: str, value: float) -> float:
    """Converts the value of a unit-suffixed key to SI."""
    _, _, unit = split_key(key)
    if unit is None:
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(f"expected a number, got {value!r}", key=key)
    return float(value) * UNIT_FACTORS[unit]


def from_si(unit: str, value: float) -> float:
    """Inverse of ``to_si`` for a bare unit name, used for console tables."""
    return value / UNIT_FACTORS[unit]


def axis_key(quantity: str, axis: str, unit: Optional[str] = None) -> str:
    """'sigma0', 'z', 'pm' -> 'sigma0_z_pm'."""
    return f"{quantity}_{axis}_{unit}" if unit else f"{quantity}_{axis}"
