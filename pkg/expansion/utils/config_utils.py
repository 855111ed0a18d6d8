"""
Flat TOML configuration -> validated run configuration.

Keys are flat and carry their unit as a suffix (``omega_z_khz``, ``sigma0_z_pm``);
per-axis keys follow ``<quantity>_<axis>_<unit>``. Every value is converted to SI
exactly once, here. Unknown keys are rejected.
"""
import logging
import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from simulator.core_model import (
    AxisParams,
    ConfigurationError,
    GaussianState,
    NoiseSpec,
    PaulTrapSpec,
    PhysicalParams,
    ProtocolSpec,
    broadening_phonons,
    check_initial_consistency,
    coherence_length,
    gamma1_from_heating_rate,
    ground_state_coherence_length,
    occupation_from_sigma,
    purity,
    thermal_like_state,
    thermal_state,
    zero_point_sigma,
)
from simulator.moment_propagator import (
    StiffnessSchedule,
    calibrate_mathieu_from_secular,
    dark_schedule,
    rotate_plane,
    validate_paul_trap,
)
from utils.helpers import AXIS_LABELS, axis_key, split_key, to_si

_logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "EXPANSION_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "data/processed"

GLOBAL_KEYS = {
    "mass_fg", "radius_nm", "charge_count", "pressure_mbar", "rf_freq_khz", "mathieu_a", "mathieu_q",
    "plane_rotation_deg", "rf_voltage_v", "feedback_off_us", "release_times_us", "measure_window_us",
    "shots", "seed_base", "output_dir", "axes", "samples_per_period", "rotate_initial_xy",
}
AXIS_QUANTITIES = {
    ("omega", "khz"), ("omega_dark", "khz"), ("potential", None), ("phase", "deg"), ("sigma0", "pm"),
    ("nbar", None), ("heating", "k_per_s"), ("gamma1", "per_s"), ("gas_damping", "per_s"),
    ("broadening", "pm"), ("detector_noise", "m2_per_hz"),
}

# Model field -> flat key, for error messages
_PHYSICAL_KEYS = {"mass": "mass_fg", "radius": "radius_nm", "charge_count": "charge_count"}
_PAUL_KEYS = {"rf_frequency": "rf_freq_khz", "mathieu_q": "mathieu_q", "mathieu_a": "mathieu_a",
              "plane_rotation": "plane_rotation_deg", "rf_voltage": "rf_voltage_v"}
_PROTOCOL_KEYS = {"feedback_off_lead": "feedback_off_us", "release_times": "release_times_us",
                  "measure_window": "measure_window_us", "shots_per_release": "shots",
                  "measurement_broadening": "broadening_<axis>_pm", "samples_per_period": "samples_per_period",
                  "detector_noise": "detector_noise_<axis>_m2_per_hz"}


class RunConfig(BaseModel):
    """Everything one CLI invocation needs, in SI units."""

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    physical: PhysicalParams
    axes: List[AxisParams]
    paul_trap: Optional[PaulTrapSpec] = None
    noise: Dict[str, NoiseSpec]
    protocol: ProtocolSpec
    initial_sigma: Dict[str, float]
    occupation: Dict[str, float]
    rotate_initial_xy: bool = False
    pressure: Optional[float] = None
    seed_base: int = 0
    output_dir: Path = Path(DEFAULT_OUTPUT_DIR)

    @model_validator(mode="after")
    def _check_axes(self) -> "RunConfig":
        labels = [axis.axis_label for axis in self.axes]
        if len(set(labels)) != len(labels):
            raise ValueError(f"axis labels must be unique, got {labels}")
        for label in labels:
            if label not in self.noise or label not in self.initial_sigma:
                raise ValueError(f"axis '{label}' lacks noise or initial-state settings")
        if self.rotate_initial_xy and not {"u", "v"} <= set(labels):
            raise ValueError("rotate_initial_xy needs both the u and v axes")
        return self

    @property
    def mass(self) -> float:
        return self.physical.mass

    @property
    def axis_labels(self) -> List[str]:
        return [axis.axis_label for axis in self.axes]

    def axis(self, label: str) -> AxisParams:
        for axis in self.axes:
            if axis.axis_label == label:
                return axis
        raise ConfigurationError(f"axis '{label}' is not configured (have {self.axis_labels})", key="--axis")

    def initial_state(self, label: str) -> GaussianState:
        """
        Release state of an axis.

        With ``rotate_initial_xy`` the optical thermal states stored on u and v are
        read as the x and y states and rotated into the Paul-trap axes.
        """
        axis = self.axis(label)
        if not (self.rotate_initial_xy and label in ("u", "v")):
            return thermal_like_state(self.initial_sigma[label], axis.trap_frequency, self.mass)
        source_x, source_y = self.axis("u"), self.axis("v")
        state_x = thermal_like_state(self.initial_sigma["u"], source_x.trap_frequency, self.mass)
        state_y = thermal_like_state(self.initial_sigma["v"], source_y.trap_frequency, self.mass)
        angle = self.paul_trap.plane_rotation if self.paul_trap else 0.0
        state_u, state_v = rotate_plane(state_x, state_y, angle)
        return state_u if label == "u" else state_v

    def schedule(self, label: str, t_end: float) -> StiffnessSchedule:
        return dark_schedule(self.axis(label), self.mass, max(t_end, 1e-12), self.paul_trap)


def _validated(model, values: Dict[str, Any], keys: Mapping[str, str], axis: Optional[str] = None):
    """Builds a pydantic model, re-raising validation errors under the flat key."""
    try:
        return model(**values)
    except ValidationError as error:
        first = error.errors()[0]
        field = str(first["loc"][0]) if first["loc"] else ""
        key = keys.get(field, field)
        if axis:
            key = key.replace("<axis>", axis)
        raise ConfigurationError(first["msg"], key=key) from error


def _require(raw: Mapping[str, Any], key: str) -> Any:
    if key not in raw:
        raise ConfigurationError("missing required key", key=key)
    return raw[key]


def _check_keys(raw: Mapping[str, Any], axes: List[str]) -> None:
    for key in raw:
        if key in GLOBAL_KEYS:
            continue
        quantity, axis, unit = split_key(key)
        if axis is None or (quantity, unit) not in AXIS_QUANTITIES:
            raise ConfigurationError("unknown configuration key", key=key)
        if axis not in axes:
            raise ConfigurationError(f"axis '{axis}' is not listed in 'axes'", key=key)


def _axis_value(raw: Mapping[str, Any], quantity: str, axis: str, unit: Optional[str], default=None,
                required: bool = False) -> Any:
    key = axis_key(quantity, axis, unit)
    if key not in raw:
        if required:
            raise ConfigurationError("missing required key", key=key)
        return default
    return to_si(key, raw[key]) if unit else raw[key]


def build_run_config(raw: Mapping[str, Any], output_dir: Optional[str] = None,
                     seed_base: Optional[int] = None) -> RunConfig:
    """
    Validates a flat key/value mapping and converts it to SI.

    Args:
        raw: Flat configuration as read from TOML.
        output_dir: Overrides ``output_dir`` and the environment default.
        seed_base: Overrides ``seed_base``.

    Raises:
        ConfigurationError: Unknown, missing or invalid key (named in the message).
    """
    # 1. Keys
    axes = _require(raw, "axes")
    if not isinstance(axes, list) or not axes or any(a not in AXIS_LABELS for a in axes):
        raise ConfigurationError(f"expected a non-empty list of axis labels from {AXIS_LABELS}", key="axes")
    _check_keys(raw, axes)

    # 2. Particle and Paul trap
    physical = _validated(PhysicalParams, {
        "mass": to_si("mass_fg", _require(raw, "mass_fg")),
        "radius": to_si("radius_nm", raw["radius_nm"]) if "radius_nm" in raw else None,
        "charge_count": raw.get("charge_count", 0),
    }, _PHYSICAL_KEYS)
    paul_trap = None
    if "rf_freq_khz" in raw:
        paul_trap = _validated(PaulTrapSpec, {
            "rf_frequency": to_si("rf_freq_khz", raw["rf_freq_khz"]),
            "mathieu_q": raw.get("mathieu_q"),
            "mathieu_a": raw.get("mathieu_a", 0.0),
            "plane_rotation": to_si("plane_rotation_deg", raw.get("plane_rotation_deg", 0.0)),
            "rf_voltage": raw.get("rf_voltage_v"),
        }, _PAUL_KEYS)
        try:
            validate_paul_trap(paul_trap)
        except ConfigurationError as error:
            raise ConfigurationError(str(error), key="mathieu_q") from error

    # 3. Axes, noise and initial states
    axis_params, noise, initial_sigma, occupation, broadening, detector = [], {}, {}, {}, {}, {}
    pressure = to_si("pressure_mbar", raw["pressure_mbar"]) if "pressure_mbar" in raw else None
    for label in axes:
        trap_frequency = _axis_value(raw, "omega", label, "khz", required=True)
        axis_keys = {"trap_frequency": axis_key("omega", label, "khz"),
                     "dark_frequency": axis_key("omega_dark", label, "khz"),
                     "potential_kind": axis_key("potential", label),
                     "release_phase": axis_key("phase", label, "deg")}
        axis_params.append(_validated(AxisParams, {
            "axis_label": label,
            "trap_frequency": trap_frequency,
            "dark_frequency": _axis_value(raw, "omega_dark", label, "khz", default=0.0),
            "potential_kind": _axis_value(raw, "potential", label, None, required=True),
            "release_phase": _axis_value(raw, "phase", label, "deg", default=0.0),
        }, axis_keys))

        heating = _axis_value(raw, "heating", label, "k_per_s")
        gamma1 = _axis_value(raw, "gamma1", label, "per_s")
        damping = _axis_value(raw, "gas_damping", label, "per_s", default=0.0)
        noise_keys = {"heating_rate": axis_key("heating", label, "k_per_s"),
                      "gamma1": axis_key("gamma1", label, "per_s"),
                      "gas_damping": axis_key("gas_damping", label, "per_s")}
        values = {"gas_damping": damping, "pressure": pressure, "reference_frequency": trap_frequency}
        if heating is not None:
            values["heating_rate"] = heating
            values["gamma1"] = gamma1 if gamma1 is not None else gamma1_from_heating_rate(heating, trap_frequency)
        elif gamma1 is not None:
            values["gamma1"] = gamma1
        try:
            noise[label] = _validated(NoiseSpec, values, noise_keys)
        except ConfigurationError as error:
            if heating is not None and gamma1 is not None:
                raise ConfigurationError("heating and gamma1 disagree (E_dot = hbar Omega gamma1)",
                                         key=axis_key("gamma1", label, "per_s")) from error
            raise

        sigma0 = _axis_value(raw, "sigma0", label, "pm", required=True)
        if not sigma0 > 0:
            raise ConfigurationError("must be > 0", key=axis_key("sigma0", label, "pm"))
        initial_sigma[label] = sigma0
        nbar = _axis_value(raw, "nbar", label, None)
        occupation[label] = float(nbar) if nbar is not None else occupation_from_sigma(
            sigma0, trap_frequency, physical.mass)
        if nbar is not None:
            check_initial_consistency(sigma0, float(nbar), trap_frequency, physical.mass)
        for target, quantity, unit in ((broadening, "broadening", "pm"), (detector, "detector_noise", "m2_per_hz")):
            value = _axis_value(raw, quantity, label, unit)
            if value is not None:
                target[label] = value

    # 4. Protocol
    release_times = raw.get("release_times_us", [])
    if not isinstance(release_times, list):
        raise ConfigurationError("expected a list of times", key="release_times_us")
    protocol_values = {
        "feedback_off_lead": to_si("feedback_off_us", raw.get("feedback_off_us", 0.0)),
        "release_times": [to_si("release_times_us", t) for t in release_times],
        "measure_window": to_si("measure_window_us", raw.get("measure_window_us", 500.0)),
        "shots_per_release": raw.get("shots", 400),
        "measurement_broadening": broadening,
        "detector_noise": detector,
    }
    if "samples_per_period" in raw:
        protocol_values["samples_per_period"] = raw["samples_per_period"]
    protocol = _validated(ProtocolSpec, protocol_values, _PROTOCOL_KEYS, axis=axes[0])

    # 5. Run-level settings; explicit arguments beat the file, the file beats the environment
    resolved_dir = output_dir or raw.get("output_dir") or os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR
    seed = seed_base if seed_base is not None else raw.get("seed_base", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigurationError(f"expected an integer >= 0, got {seed!r}", key="seed_base")
    rotate = raw.get("rotate_initial_xy", False)
    if not isinstance(rotate, bool):
        raise ConfigurationError("expected true or false", key="rotate_initial_xy")

    try:
        config = RunConfig(
            physical=physical, axes=axis_params, paul_trap=paul_trap, noise=noise, protocol=protocol,
            initial_sigma=initial_sigma, occupation=occupation, rotate_initial_xy=rotate, pressure=pressure,
            seed_base=seed, output_dir=Path(resolved_dir),
        )
    except ValidationError as error:
        key = "rotate_initial_xy" if "rotate_initial_xy" in str(error) else "axes"
        raise ConfigurationError(error.errors()[0]["msg"], key=key) from error
    _logger.info("Configuration with axes %s, output to %s", config.axis_labels, config.output_dir)
    return config


def read_config_file(path: str) -> Dict[str, Any]:
    """
    Reads a flat TOML file.

    Raises:
        ConfigurationError: Missing file, TOML syntax error or nested tables.
    """
    try:
        with open(path, "rb") as handle:
            raw = tomllib.load(handle)
    except FileNotFoundError as error:
        raise ConfigurationError(f"config file '{path}' not found", key="config") from error
    except tomllib.TOMLDecodeError as error:
        raise ConfigurationError(f"invalid TOML in '{path}': {error}", key="config") from error
    nested = [key for key, value in raw.items() if isinstance(value, dict)]
    if nested:
        raise ConfigurationError("tables are not supported, keys must be flat", key=nested[0])
    return raw


def load_config(path: str, output_dir: Optional[str] = None, seed_base: Optional[int] = None) -> RunConfig:
    """Reads and validates a configuration file."""
    return build_run_config(read_config_file(path), output_dir=output_dir, seed_base=seed_base)


def period_of(frequency: float) -> float:
    """T = 2 pi / omega; infinite for a zero frequency."""
    return 2 * math.pi / frequency if frequency > 0 else math.inf


def nominal_table(config: RunConfig) -> List[Tuple[str, Dict[str, float]]]:
    """Per-axis values printed by the ``protocol`` command (SI units)."""
    rows = []
    for axis in config.axes:
        label = axis.axis_label
        occupation = config.occupation[label]
        report = check_initial_consistency(config.initial_sigma[label], occupation, axis.trap_frequency,
                                           config.mass)
        thermal = thermal_state(max(occupation, 0.0), axis.trap_frequency, config.mass)
        row = {
            "sigma_zpm": zero_point_sigma(axis.trap_frequency, config.mass),
            "sigma0": config.initial_sigma[label],
            "sigma_thermal": report.sigma_thermal,
            "nbar": occupation,
            "mismatch": report.relative_mismatch,
            "purity": purity(thermal),
            "xi0": coherence_length(thermal),
            "xi_ground": ground_state_coherence_length(axis.trap_frequency, config.mass),
            "broadening_phonons": broadening_phonons(config.protocol.broadening_for(label), axis.trap_frequency,
                                                     config.mass),
            "gamma1": config.noise[label].gamma1,
            "heating_rate": config.noise[label].effective_heating_rate(),
            "period": period_of(axis.dark_frequency),
        }
        if config.paul_trap is not None and axis.potential_kind == "harmonic_jump":
            row["mathieu_q"] = calibrate_mathieu_from_secular(axis.dark_frequency, config.paul_trap.rf_frequency,
                                                              config.paul_trap.mathieu_a)
        rows.append((label, row))
    return rows
