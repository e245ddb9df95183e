"""Command-line front end: simulate, sweep-gain, limits, calibrate, isolation."""
import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from levitwin import __version__
from levitwin.core.errors import ConfigError, LevitwinError
from levitwin.core.io import write_csv, write_json
from levitwin.core.reports import calibration_report, isolation_tables, limits_report, resonance_list
from levitwin.core.scenario import Scenario, load_scenario
from levitwin.core.sweep import average_point, run_points

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def configure_logging() -> None:
    load_dotenv()
    level = os.getenv("LEVITWIN_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format='%(asctime)s - %(levelname)s - %(message)s',
    )


def _with_seed(scenario: Scenario, seed: Optional[int]) -> Scenario:
    if seed is None:
        return scenario
    update: Dict[str, Any] = {}
    if scenario.simulation is not None:
        update["simulation"] = scenario.simulation.model_copy(update={"seed": seed})
    if scenario.calibration is not None:
        update["calibration"] = scenario.calibration.model_copy(update={"seed": seed})
    return scenario.model_copy(update=update)


def _mode_rows(summary: Dict[str, Any], index: int) -> List[Dict[str, Any]]:
    rows = []
    for label, entry in summary["modes"].items():
        row = {"point": index, "gain_factor": summary["gain_factor"], "mode": label}
        row.update({k: v for k, v in entry.items() if not isinstance(v, (dict, list))})
        rows.append(row)
    return rows


def cmd_simulate(scenario: Scenario, out: Path, threads: int = 1) -> Dict[str, Any]:
    """One realization per gain point: trajectory and spectrum CSVs plus report.json."""
    if scenario.simulation is None:
        raise ConfigError("simulate needs a simulation section", field="simulation")
    start = time.time()
    points = run_points(scenario, keep_trajectory=True, threads=threads, realizations=1)
    report: Dict[str, Any] = {"scenario": scenario.name, "seed": scenario.simulation.seed, "points": []}
    for i, (result,) in enumerate(points):
        result["trajectory"].to_csv(out / f"trajectory_p{i}.csv")
        result["detector_spectrum"].to_csv(out / f"spectrum_p{i}.csv", scenario.spectral.include_asd)
        if scenario.spectral.measure_through_lockin:
            for label, spec in result["mode_spectra"].items():
                spec.to_csv(out / f"spectrum_p{i}_{label}_lockin.csv", scenario.spectral.include_asd)
        report["points"].append({
            "index": i,
            "gain_factor": result["gain_factor"],
            "seed": result["seed"],
            "modes": result["modes"],
            "energy_budget": result["trajectory"].energy_budget(),
        })
    write_json(report, out / "report.json")
    logger.info(f"simulate finished {len(points)} point(s) in {time.time() - start:.1f} s")
    return report


def cmd_sweep_gain(scenario: Scenario, out: Path, threads: int = 1) -> Dict[str, Any]:
    """All realizations per gain point, averaged spectra, sweep.csv and report.json."""
    if scenario.simulation is None or scenario.sweep is None:
        raise ConfigError("sweep-gain needs simulation and sweep sections", field="sweep")
    start = time.time()
    points = run_points(scenario, threads=threads)
    report: Dict[str, Any] = {"scenario": scenario.name, "seed": scenario.simulation.seed, "points": []}
    rows = []
    for i, point in enumerate(points):
        summary = average_point(point, scenario)
        for label, spec in summary.pop("spectra").items():
            spec.to_csv(out / f"spectrum_p{i}_{label}.csv", scenario.spectral.include_asd)
        summary["index"] = i
        summary["seeds"] = [r["seed"] for r in point]
        report["points"].append(summary)
        rows.extend(_mode_rows(summary, i))
    write_csv(pd.DataFrame(rows), out / "sweep.csv")
    write_json(report, out / "report.json")
    logger.info(f"sweep-gain finished {len(points)} point(s) in {time.time() - start:.1f} s")
    return report


def cmd_limits(scenario: Scenario, out: Path) -> Dict[str, Any]:
    report = limits_report(scenario)
    write_json(report, out / "limits.json")
    return report


def cmd_calibrate(scenario: Scenario, out: Path) -> Dict[str, Any]:
    report = calibration_report(scenario)
    write_json(report, out / "calibration.json")
    return report


def cmd_isolation(scenario: Scenario, out: Path) -> Dict[str, Any]:
    if scenario.isolation is None:
        raise ConfigError("isolation needs an isolation section", field="isolation")
    table, resonances, attenuation = isolation_tables(scenario.isolation, scenario.bode)
    write_csv(table, out / "bode.csv")
    write_csv(resonances, out / "resonances.csv")
    report = {"scenario": scenario.name, "attenuation": attenuation, "resonances": resonance_list(resonances)}
    write_json(report, out / "isolation.json")
    return report


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep-gain": cmd_sweep_gain,
    "limits": cmd_limits,
    "calibrate": cmd_calibrate,
    "isolation": cmd_isolation,
}
THREADED = {"simulate", "sweep-gain"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="levitwin", description="Digital twin of a feedback-cooled levitated magnet.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="Scenario YAML path or the name of a shipped scenario.")
        p.add_argument("--out", type=Path, default=None, help="Output directory; defaults to the scenario's output_dir.")
        p.add_argument("--seed", type=int, default=None, help="Override the scenario seed (unsigned 64-bit).")
        if name in THREADED:
            p.add_argument("--threads", type=int, default=1, help="Worker processes for sweep points.")
    return parser


def _fail(error: Exception, field: Optional[str] = None) -> None:
    payload = {"error": type(error).__name__, "message": str(error), "field": field}
    print(json.dumps(payload), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {args.seed}", field="seed")
        if getattr(args, "threads", 1) < 1:
            raise ConfigError("threads must be >= 1", field="threads")
        scenario = _with_seed(load_scenario(args.config), args.seed)
        out = args.out or Path(scenario.output_dir)
        command = COMMANDS[args.command]
        if args.command in THREADED:
            command(scenario, out, args.threads)
        else:
            command(scenario, out)
    except ConfigError as e:
        _fail(e, e.field)
        return EXIT_CONFIG
    except ValidationError as e:
        first = e.errors()[0]
        _fail(e, ".".join(str(part) for part in first["loc"]) or None)
        return EXIT_CONFIG
    except LevitwinError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        _fail(e, getattr(e, "field", None))
        return EXIT_RUNTIME
    except OSError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        _fail(e)
        return EXIT_RUNTIME
    print(str(out))
    return EXIT_OK
