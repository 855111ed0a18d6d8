"""
Batch front end of the expansion simulator.

    python expansion/main.py simulate --axis z --t-r 260 --shots 400
    python expansion/main.py scan --axis z --t-r-max 260 --points 100 --engine analytic
    python expansion/main.py fit data/processed/scan_z_analytic.csv --model inverted --report
    python expansion/main.py coherence data/processed/fit_inverted.json --heating-scale 1e-3
    python expansion/main.py protocol

Exit codes: 0 success, 2 configuration or input error, 3 simulation error, 4 fit error.
"""
import argparse
import logging
import math
import sys
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

from simulator.analytic_dynamics import ExpansionCurve, expansion_curve
from simulator.core_model import ConfigurationError, DomainError, InvalidStateError
from simulator.estimation import (
    IMPROVED_HEATING_SCALE,
    DegeneracyError,
    FitError,
    coherence_curve,
    fit_expansion,
    fit_report,
    fitted_sigma,
)
from simulator.moment_propagator import CalibrationError, IntegrationError, propagate_trace
from simulator.trajectory_ensemble import EnsembleError, ReconstructionError, run_ensemble, scan_ensemble
from utils import default_config_path
from utils.config_utils import RunConfig, load_config, nominal_table
from utils.file_utils import (
    output_path,
    read_curve_csv,
    read_fit_file,
    write_coherence_csv,
    write_curve_csv,
    write_fit_file,
    write_histogram_csv,
    write_shots_csv,
    write_text_file,
    write_trace_csv,
)
from utils.helpers import AXIS_LABELS, from_si
from utils.interface_utils import execute_mission, print_artifacts, print_banner, print_table
from utils.plot_utils import plot_coherence, plot_expansion_curves, plot_shot_histogram

_logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SIMULATION = 3
EXIT_FIT = 4

US = 1e-6


# --- Argument types ---

def _positive_int(minimum: int):
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'")
        if value < minimum:
            raise argparse.ArgumentTypeError(f"must be >= {minimum}, got {value}")
        return value
    return parse


def _non_negative_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got '{text}'")
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _load(args: argparse.Namespace) -> RunConfig:
    return load_config(args.config, output_dir=args.output_dir, seed_base=args.seed)


# --- Commands ---

def cmd_simulate(args: argparse.Namespace) -> int:
    """Runs one ensemble at a single release time and writes shots, histogram and panel."""
    config = _load(args)
    label, t_r = args.axis, args.t_r * US
    axis = config.axis(label)
    protocol = config.protocol
    if args.shots is not None:
        protocol = protocol.model_copy(update={"shots_per_release": args.shots})

    result = execute_mission(
        "ENSEMBLE", run_ensemble,
        axis, config.schedule(label, t_r), config.noise[label], protocol, t_r,
        config.initial_state(label), config.mass, config.seed_base, args.workers,
    )

    # 1. Artifacts
    stem = f"shots_{label}_{args.t_r:g}us"
    paths = [output_path(config.output_dir, f"{stem}.csv"), output_path(config.output_dir, f"{stem}_hist2d.csv")]
    write_shots_csv(paths[0], result.shots)
    write_histogram_csv(paths[1], result.histogram2d)
    if not args.no_plot:
        paths.append(output_path(config.output_dir, f"{stem}.svg"))
        plot_shot_histogram(paths[-1], result, title=f"axis {label}, t_r = {args.t_r:g} us")

    # 2. Summary
    print(f"📏 sigma_{label}({args.t_r:g} us) = {result.sample_sigma * 1e9:.4f} +- "
          f"{result.sample_sigma_err * 1e9:.4f} nm over {result.n_valid} shots")
    print(f"   major axis at {math.degrees(result.rotation_angle):.2f} deg, minor axis "
          f"{result.minor_sigma * 1e9:.4f} nm (low confidence), std(z) {result.position_sigma * 1e9:.4f} nm")
    if result.non_gaussian:
        print(f"⚠️  non-Gaussian shot cloud (p = {result.gaussianity_pvalue:.2e})")
    print_artifacts(paths)
    return EXIT_OK


def _scan_moments(config: RunConfig, label: str, times: np.ndarray):
    states = propagate_trace(config.initial_state(label), config.schedule(label, float(times[-1])),
                             config.noise[label], config.mass, times)
    curve = ExpansionCurve(times=times, sigma=np.sqrt([s.var_position for s in states]),
                           regime=config.axis(label).regime, axis=config.axis(label))
    return curve, states


def cmd_scan(args: argparse.Namespace) -> int:
    """sigma(t_r) over a release-time range with the analytic, moments or ensemble engine."""
    config = _load(args)
    if not args.t_r_max > args.t_r_min:
        raise DomainError(f"--t-r-max ({args.t_r_max}) must exceed --t-r-min ({args.t_r_min})")
    label = args.axis
    axis, noise, initial = config.axis(label), config.noise[label], config.initial_state(label)
    times = np.linspace(args.t_r_min, args.t_r_max, args.points) * US
    stem = f"scan_{label}_{args.engine}"
    paths = [output_path(config.output_dir, f"{stem}.csv")]
    curves = []

    if args.engine == "analytic":
        curve = execute_mission("ANALYTIC SCAN", expansion_curve, times, initial, axis, noise, config.mass)
        free = expansion_curve(times, initial, axis, noise, config.mass, regime="free")
        write_curve_csv(paths[0], curve)
        paths.append(output_path(config.output_dir, f"scan_{label}_free.csv"))
        write_curve_csv(paths[-1], free)
        curves = [(axis.regime, curve), ("free", free)]
    elif args.engine == "moments":
        curve, states = execute_mission("MOMENT SCAN", _scan_moments, config, label, times)
        write_curve_csv(paths[0], curve)
        paths.append(output_path(config.output_dir, f"trace_{label}.csv"))
        write_trace_csv(paths[-1], times, states)
        curves = [(axis.regime, curve)]
    else:
        protocol = config.protocol
        if args.shots is not None:
            protocol = protocol.model_copy(update={"shots_per_release": args.shots})
        scan = execute_mission(
            "ENSEMBLE SCAN", scan_ensemble,
            axis, config.schedule(label, float(times[-1])), noise, protocol, initial, config.mass,
            config.seed_base, args.workers, times,
        )
        curve = scan.curve
        write_curve_csv(paths[0], curve)
        curves = [("ensemble", curve), (axis.regime, expansion_curve(times, initial, axis, noise, config.mass))]
        if scan.non_gaussian_times:
            print(f"⚠️  non-Gaussian at t_r = {[f'{t / US:g}' for t in scan.non_gaussian_times]} us")

    if not args.no_plot:
        paths.append(output_path(config.output_dir, f"{stem}.svg"))
        plot_expansion_curves(paths[-1], curves, title=f"axis {label} ({args.engine})")
    print(f"📈 sigma_{label}: {curve.sigma[0] * 1e9:.4f} nm -> {curve.sigma[-1] * 1e9:.4f} nm "
          f"over {len(curve)} release times")
    print_artifacts(paths)
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    """Fits a sigma(t_r) CSV and writes the fit result (JSON) and the fitted curve."""
    data = read_curve_csv(args.data_csv)
    rf_frequency, mathieu_a = None, 0.0
    if args.mass_fg is not None:
        if not args.mass_fg > 0:
            raise ConfigurationError("must be > 0", key="--mass-fg")
        mass = args.mass_fg * 1e-18
        output_dir = args.output_dir or "."
    else:
        config = _load(args)
        mass, output_dir = config.mass, config.output_dir
        if args.model == "jump_micromotion" and config.paul_trap is not None:
            rf_frequency, mathieu_a = config.paul_trap.rf_frequency, config.paul_trap.mathieu_a

    fit = execute_mission(
        "FIT", lambda: fit_expansion(data, args.model, mass, broadening=args.broadening_pm * 1e-12,
                                     mathieu_a=mathieu_a, rf_frequency=rf_frequency)
    )
    paths = [output_path(output_dir, f"fit_{args.model}.json"), output_path(output_dir, f"fit_{args.model}_curve.csv")]
    write_fit_file(paths[0], fit)
    times = np.unique(data.times)
    write_curve_csv(paths[1], ExpansionCurve(times=times, sigma=fitted_sigma(fit, times), regime=args.model))
    report = fit_report(fit, data)
    if args.report:
        paths.append(output_path(output_dir, f"fit_{args.model}_report.txt"))
        write_text_file(paths[-1], report)
    print(report)
    print_artifacts(paths)
    return EXIT_OK


def cmd_coherence(args: argparse.Namespace) -> int:
    """xi(t) from a fit file for the fitted heating and a reduced heating."""
    fit = read_fit_file(args.fit_file)
    if args.nbar is not None:
        occupation, output_dir = args.nbar, args.output_dir or "."
    else:
        config = _load(args)
        occupation, output_dir = config.occupation[config.axis(args.axis).axis_label], config.output_dir
    t_grid = np.linspace(0.0, args.t_max, args.points) * US if args.t_max > 0 else np.array([0.0])

    curve = execute_mission("COHERENCE", coherence_curve, fit, fit.mass, occupation, t_grid, args.heating_scale)
    paths = [output_path(output_dir, f"coherence_{args.axis}.csv")]
    write_coherence_csv(paths[0], curve)
    if not args.no_plot:
        paths.append(output_path(output_dir, f"coherence_{args.axis}.svg"))
        plot_coherence(paths[-1], curve, title=f"axis {args.axis}")
    print(f"🌊 xi(0) = {curve.xi[0] * 1e12:.3f} pm, xi(t_max) = {curve.xi[-1] * 1e12:.3f} pm "
          f"(x{args.heating_scale:g} heating: {curve.xi_improved[-1] * 1e12:.3f} pm), "
          f"ground state {curve.xi_zpm_threshold * 1e12:.3f} pm")
    print_artifacts(paths)
    return EXIT_OK


def cmd_protocol(args: argparse.Namespace) -> int:
    """Prints the derived nominal values of every configured axis."""
    config = _load(args)
    rows = []
    for label, row in nominal_table(config):
        formatted = {
            "sigma_zpm (pm)": f"{from_si('pm', row['sigma_zpm']):.2f}",
            "sigma(0) (pm)": f"{from_si('pm', row['sigma0']):.2f}",
            "sigma_th (pm)": f"{from_si('pm', row['sigma_thermal']):.2f}",
            "n_bar": f"{row['nbar']:.1f}",
            "mismatch (%)": f"{100 * row['mismatch']:.2f}",
            "purity": f"{row['purity']:.3e}",
            "xi(0) (pm)": f"{from_si('pm', row['xi0']):.3f}",
            "xi_n=0 (pm)": f"{from_si('pm', row['xi_ground']):.3f}",
            "delta n_bar": f"{row['broadening_phonons']:.1f}",
            "gamma1 (1/s)": f"{row['gamma1']:.4e}",
            "E_dot (K/s)": f"{from_si('k_per_s', row['heating_rate']):.3f}",
            "T dark (us)": f"{from_si('us', row['period']):.1f}",
            "mathieu q": f"{row['mathieu_q']:.4f}" if "mathieu_q" in row else "-",
        }
        rows.append((label, formatted))
    print_table(rows)
    return EXIT_OK


# --- Parser ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expansion", description="Motional-state expansion simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", default=default_config_path(),
                        help="flat TOML configuration (default: the bundled nominal file)")
    common.add_argument("--axis", default="z", choices=AXIS_LABELS, help="axis label (default: z)")
    common.add_argument("--seed", type=_positive_int(0), default=None, help="overrides seed_base of the config")
    common.add_argument("--output-dir", default=None, help="overrides output_dir and EXPANSION_OUTPUT_DIR")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG logging")

    ensemble = argparse.ArgumentParser(add_help=False)
    ensemble.add_argument("--shots", type=_positive_int(2), default=None,
                          help="shots per release time (>= 2, default: from the config)")
    ensemble.add_argument("--workers", type=_positive_int(1), default=None, help="worker threads for the shots")
    ensemble.add_argument("--no-plot", action="store_true", help="skip the SVG panel")

    simulate = sub.add_parser("simulate", parents=[common, ensemble], help="one ensemble at a single release time")
    simulate.add_argument("--t-r", type=_non_negative_float, default=260.0, help="release time in us (default 260)")
    simulate.set_defaults(handler=cmd_simulate)

    scan = sub.add_parser("scan", parents=[common, ensemble], help="sigma(t_r) over a release-time range")
    scan.add_argument("--t-r-min", type=_non_negative_float, default=0.0, help="first release time in us")
    scan.add_argument("--t-r-max", type=_non_negative_float, default=260.0, help="last release time in us")
    scan.add_argument("--points", type=_positive_int(2), default=100, help="number of release times (>= 2)")
    scan.add_argument("--engine", choices=("analytic", "moments", "ensemble"), default="analytic",
                      help="closed forms, moment integration or stochastic shots")
    scan.set_defaults(handler=cmd_scan)

    fit = sub.add_parser("fit", parents=[common], help="fit a sigma(t_r) CSV")
    fit.add_argument("data_csv", help="CSV with columns t_s,sigma_m[,sigma_err_m]")
    fit.add_argument("--model", choices=("inverted", "jump_micromotion"), default="inverted", help="fit model")
    fit.add_argument("--mass-fg", type=float, default=None, help="particle mass in fg (default: from the config)")
    fit.add_argument("--broadening-pm", type=_non_negative_float, default=0.0,
                     help="measurement broadening delta sigma in pm")
    fit.add_argument("--report", action="store_true", help="also write the text report")
    fit.set_defaults(handler=cmd_fit)

    coherence = sub.add_parser("coherence", parents=[common], help="coherence length from a fit file")
    coherence.add_argument("fit_file", help="JSON written by the fit command")
    coherence.add_argument("--heating-scale", type=float, default=IMPROVED_HEATING_SCALE,
                           help="factor applied to the fitted heating for the improved curve")
    coherence.add_argument("--t-max", type=_non_negative_float, default=260.0, help="last time in us")
    coherence.add_argument("--points", type=_positive_int(2), default=200, help="number of times")
    coherence.add_argument("--nbar", type=_non_negative_float, default=None,
                           help="initial occupation (default: from the config axis)")
    coherence.add_argument("--no-plot", action="store_true", help="skip the SVG panel")
    coherence.set_defaults(handler=cmd_coherence)

    protocol = sub.add_parser("protocol", parents=[common], help="derived nominal values per axis")
    protocol.set_defaults(handler=cmd_protocol)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exit_request:
        return int(exit_request.code or 0)

    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    print_banner(args.command, getattr(args, "data_csv", None) or getattr(args, "fit_file", None) or args.config)

    try:
        return args.handler(args)
    except (FitError, DegeneracyError) as error:
        print(f"❌ Fit failed: {error}", file=sys.stderr)
        if isinstance(error, FitError) and error.trace:
            print(f"   last objective: {error.trace[-1].get('objective')}", file=sys.stderr)
        return EXIT_FIT
    except (IntegrationError, EnsembleError, InvalidStateError, ReconstructionError, CalibrationError) as error:
        print(f"❌ Simulation failed: {error}", file=sys.stderr)
        return EXIT_SIMULATION
    except (ConfigurationError, DomainError, ValidationError, OSError) as error:
        print(f"❌ Invalid input: {error}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\n👋 Interrupted, no partial files were written.")
        sys.exit(130)
