"""
CSV/JSON artifacts of the simulator.

Every writer goes through a temporary file in the target directory followed by
``os.replace``, so an interrupted run never leaves a half-written artifact behind.
"""
import logging
import os
import tempfile
from contextlib import contextmanager
from typing import Any, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd

from simulator.analytic_dynamics import ExpansionCurve
from simulator.core_model import ConfigurationError, DomainError, GaussianState, state_moments
from simulator.estimation import CoherenceCurve, FitResult, MeasuredCurve
from simulator.trajectory_ensemble import Histogram2D, Shot

_logger = logging.getLogger(__name__)

CURVE_FIELDS = ["t_s", "sigma_m"]
CURVE_ERR_FIELD = "sigma_err_m"
SHOT_FIELDS = ["axis", "t_r_s", "z_m", "p_kgms", "seed", "valid"]
COHERENCE_FIELDS = ["t_s", "xi_m", "xi_improved_m"]
TRACE_FIELDS = ["t_s", "var_pos_m2", "covar", "var_mom"]
HISTOGRAM_FIELDS = ["z_lo_m", "z_hi_m", "p_lo_kgms", "p_hi_kgms", "count"]


@contextmanager
def atomic_path(filepath: str) -> Iterator[str]:
    """Yields a temporary path next to ``filepath`` that replaces it on success."""
    # 1. Create the directory if it doesn't exist
    directory = os.path.dirname(filepath)
    if directory and not os.path.exists(directory):
        os.makedirs(directory, exist_ok=True)
        _logger.info("Created the missing directory %s", directory)

    # 2. Write next to the target, then swap
    handle, tmp_path = tempfile.mkstemp(dir=directory or ".", suffix=".tmp")
    os.close(handle)
    try:
        yield tmp_path
        os.replace(tmp_path, filepath)
    finally:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)


def to_csv_file(filepath: str, fieldnames: List[str], data_list: List[Any]) -> None:
    """
    Saves rows to a CSV file, ensuring the target directory exists.

    Args:
        filepath (str): The full path where the CSV should be saved.
        fieldnames (List[str]): The column headers for the CSV.
        data_list (List[Any]): Rows (sequences or dicts keyed by ``fieldnames``).
    """
    df = pd.DataFrame(data=data_list, columns=fieldnames)
    with atomic_path(filepath) as tmp_path:
        df.to_csv(tmp_path, index=False, encoding="utf-8")
    _logger.info("%d rows written to '%s'", len(df), filepath)


def write_text_file(filepath: str, text: str) -> None:
    with atomic_path(filepath) as tmp_path:
        with open(tmp_path, "w", encoding="utf-8") as handle:
            handle.write(text if text.endswith("\n") else text + "\n")


def _read_csv(filepath: str, required: Sequence[str]) -> pd.DataFrame:
    """Reads a CSV and checks its header and that it has rows."""
    try:
        df = pd.read_csv(filepath)
    except FileNotFoundError as error:
        raise ConfigurationError(f"file '{filepath}' not found", key="data_csv") from error
    except pd.errors.EmptyDataError as error:
        raise DomainError(f"'{filepath}' is empty") from error
    except pd.errors.ParserError as error:
        raise DomainError(f"'{filepath}' is not a valid CSV: {error}") from error
    missing = [name for name in required if name not in df.columns]
    if missing:
        raise DomainError(f"'{filepath}' lacks the columns {missing}")
    if df.empty:
        raise DomainError(f"'{filepath}' has no data rows")
    return df


# --- Curves ---

def write_curve_csv(filepath: str, curve) -> None:
    """Writes ``t_s,sigma_m[,sigma_err_m]`` for an ExpansionCurve or MeasuredCurve."""
    columns = {"t_s": curve.times, "sigma_m": curve.sigma}
    if getattr(curve, "sigma_err", None) is not None:
        columns[CURVE_ERR_FIELD] = curve.sigma_err
    fieldnames = list(columns)
    to_csv_file(filepath, fieldnames, np.column_stack([columns[name] for name in fieldnames]))


def read_curve_csv(filepath: str) -> MeasuredCurve:
    """
    Reads a curve CSV; repeated and unsorted times are kept as measured.

    Raises:
        DomainError: Empty file, missing columns or non-numeric values.
    """
    df = _read_csv(filepath, CURVE_FIELDS)
    try:
        times = df["t_s"].to_numpy(dtype=float)
        sigma = df["sigma_m"].to_numpy(dtype=float)
        sigma_err = df[CURVE_ERR_FIELD].to_numpy(dtype=float) if CURVE_ERR_FIELD in df.columns else None
    except ValueError as error:
        raise DomainError(f"'{filepath}' holds non-numeric values: {error}") from error
    if not (np.all(np.isfinite(times)) and np.all(np.isfinite(sigma))):
        raise DomainError(f"'{filepath}' holds missing or non-finite values")
    return MeasuredCurve(times, sigma, sigma_err)


def read_expansion_curve(filepath: str, regime: str) -> ExpansionCurve:
    """Strict reader for curves written by ``scan``: times must be strictly increasing."""
    data = read_curve_csv(filepath)
    return ExpansionCurve(times=data.times, sigma=data.sigma, regime=regime, sigma_err=data.sigma_err)


# --- Shots and histograms ---

def write_shots_csv(filepath: str, shots: Sequence[Shot]) -> None:
    to_csv_file(filepath, SHOT_FIELDS, [shot.as_row() for shot in shots])


def read_shots_csv(filepath: str) -> List[Shot]:
    """Reads the shot CSV back; invalid shots keep their NaN coordinates."""
    df = _read_csv(filepath, SHOT_FIELDS)
    return [
        Shot(
            axis=str(row.axis),
            release_time=float(row.t_r_s),
            reconstructed_position=float(row.z_m),
            reconstructed_momentum=float(row.p_kgms),
            seed=int(row.seed),
            valid=bool(row.valid),
        )
        for row in df.itertuples(index=False)
    ]


def write_histogram_csv(filepath: str, histogram: Histogram2D) -> None:
    """One row per 2D bin (long format), rows ordered by z bin then p bin."""
    rows = []
    z_edges, p_edges = histogram.position_edges, histogram.momentum_edges
    for i in range(len(z_edges) - 1):
        for j in range(len(p_edges) - 1):
            rows.append([z_edges[i], z_edges[i + 1], p_edges[j], p_edges[j + 1], int(histogram.counts[i, j])])
    to_csv_file(filepath, HISTOGRAM_FIELDS, rows)


# --- Coherence, traces and fits ---

def write_coherence_csv(filepath: str, curve: CoherenceCurve) -> None:
    to_csv_file(filepath, COHERENCE_FIELDS, np.column_stack([curve.times, curve.xi, curve.xi_improved]))


def read_coherence_csv(filepath: str) -> pd.DataFrame:
    df = _read_csv(filepath, COHERENCE_FIELDS)
    return df[COHERENCE_FIELDS].astype(float)


def write_trace_csv(filepath: str, times: Sequence[float], states: Sequence[GaussianState]) -> None:
    """Moment time series ``t_s,var_pos_m2,covar,var_mom``."""
    rows = [[float(t), *state_moments(state)] for t, state in zip(times, states)]
    to_csv_file(filepath, TRACE_FIELDS, rows)


def write_fit_file(filepath: str, fit: FitResult) -> None:
    write_text_file(filepath, fit.to_json())
    _logger.info("Fit result written to '%s'", filepath)


def read_fit_file(filepath: str) -> FitResult:
    """
    Raises:
        ConfigurationError: The file does not exist.
        DomainError: The file is not a fit result.
    """
    try:
        with open(filepath, "r", encoding="utf-8") as handle:
            text = handle.read()
    except FileNotFoundError as error:
        raise ConfigurationError(f"file '{filepath}' not found", key="fit_file") from error
    return FitResult.from_json(text)


def output_path(output_dir: Optional[str], filename: str) -> str:
    return os.path.join(str(output_dir or "."), filename)
