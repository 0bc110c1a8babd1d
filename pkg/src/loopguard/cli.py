"""Command-line interface.

Verbs: `run` executes one scenario and writes trace.csv, report.json and
figures into the output directory; `list-scenarios` prints the catalog;
`calibrate` runs the seeded calibration procedure and writes a calibration
file; `batch` runs several scenarios into per-scenario subdirectories.

Exit codes: 0 clean run, 2 configuration error, 3 simulation fault.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .attacks import AttackSpec, Scenario, all_scenarios, find_scenario
from .ids import DetectorConfig
from .plants import LoadDisturbance
from .runner import Calibration, calibrate, run_scenario
from . import report as report_mod

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAULT = 3


class ConfigError(Exception):
    pass


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="loopguard",
        description="Networked control-loop simulator with a physics-based "
                    "intrusion detection and localization engine.")
    sub = parser.add_subparsers(dest="verb", required=True)

    run_p = sub.add_parser("run", help="execute one scenario")
    run_p.add_argument("--scenario", help="scenario id (see list-scenarios)")
    run_p.add_argument("--config", help="JSON config file with scenario and "
                                        "detector documents")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--duration", type=float, default=None)
    run_p.add_argument("--out", default=".", help="output directory")
    run_p.add_argument("--detector", default=None,
                       choices=["off", "adaptive-threshold", "adaptive-estimation"],
                       help="context mode")
    run_p.add_argument("--attribution", default=None,
                       choices=["scheduled-slot", "as-applied"])
    run_p.add_argument("--p-fa", type=float, default=None)
    run_p.add_argument("--calibration", default=None,
                       help="calibration JSON produced by `calibrate`")
    run_p.add_argument("--no-figures", action="store_true")

    list_p = sub.add_parser("list-scenarios", help="print the scenario catalog")
    list_p.add_argument("--json", action="store_true")

    cal_p = sub.add_parser("calibrate", help="run the seeded calibration")
    cal_p.add_argument("--seed", type=int, default=None)
    cal_p.add_argument("--p-fa", type=float, default=1e-3)
    cal_p.add_argument("--plant", default="dc-motor")
    cal_p.add_argument("--out", default="calibration.json")

    batch_p = sub.add_parser("batch", help="run several scenarios")
    batch_p.add_argument("--scenarios", default="all",
                         help="comma-separated ids, or 'all'")
    batch_p.add_argument("--seed", type=int, default=None)
    batch_p.add_argument("--duration", type=float, default=None)
    batch_p.add_argument("--out", default=".")
    batch_p.add_argument("--detector", default=None,
                         choices=["off", "adaptive-threshold", "adaptive-estimation"])
    batch_p.add_argument("--no-figures", action="store_true")
    return parser


def _detector_from_args(args):
    overrides = {}
    if getattr(args, "detector", None):
        overrides["context_mode"] = args.detector
    if getattr(args, "attribution", None):
        overrides["attribution"] = args.attribution
    if getattr(args, "p_fa", None):
        overrides["p_fa"] = args.p_fa
    return overrides


_SCENARIO_KEYS = {"id", "description", "plant", "attack", "load",
                  "duration", "seed"}
_ATTACK_KEYS = {f.name for f in dataclasses.fields(AttackSpec)}
_LOAD_KEYS = {"t_on", "t_off", "speed_drag", "current_rise"}
_DETECTOR_KEYS = {f.name for f in dataclasses.fields(DetectorConfig)}


def _check_keys(doc, allowed, what):
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")


def load_config_file(path):
    """Parse a run config: {"scenario": {...}, "detector": {...}}.

    Field names mirror the Scenario and DetectorConfig dataclasses verbatim;
    unknown keys are errors.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    _check_keys(doc, {"scenario", "detector"}, "config")
    scenario = None
    detector = None
    if "scenario" in doc:
        sdoc = dict(doc["scenario"])
        _check_keys(sdoc, _SCENARIO_KEYS, "scenario")
        if "attack" in sdoc and sdoc["attack"] is not None:
            adoc = dict(sdoc["attack"])
            _check_keys(adoc, _ATTACK_KEYS, "attack")
            sdoc["attack"] = AttackSpec(**adoc)
        if "load" in sdoc and sdoc["load"] is not None:
            ldoc = dict(sdoc["load"])
            _check_keys(ldoc, _LOAD_KEYS, "load")
            sdoc["load"] = LoadDisturbance(**ldoc)
        sdoc.setdefault("description", "config-file scenario")
        try:
            scenario = Scenario(**sdoc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad scenario document: {exc}") from None
    if "detector" in doc:
        ddoc = dict(doc["detector"])
        _check_keys(ddoc, _DETECTOR_KEYS, "detector")
        try:
            detector = DetectorConfig(**ddoc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad detector document: {exc}") from None
    return scenario, detector


def _load_calibration(path):
    try:
        with open(path) as fh:
            return Calibration.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        raise ConfigError(f"cannot read calibration {path}: {exc}") from None


def _resolve_scenario(args):
    scenario = None
    detector_cfg = None
    if args.config:
        scenario, detector_cfg = load_config_file(args.config)
    if args.scenario:
        try:
            scenario = find_scenario(args.scenario)
        except KeyError:
            valid = ", ".join(sc.id for sc in all_scenarios())
            raise ConfigError(f"unknown scenario {args.scenario!r}; "
                              f"valid ids: {valid}") from None
    if scenario is None:
        raise ConfigError("no scenario given: pass --scenario or --config")
    overrides = _detector_from_args(args)
    if overrides:
        base = detector_cfg if detector_cfg is not None else DetectorConfig()
        detector_cfg = dataclasses.replace(base, **overrides)
    return scenario, detector_cfg


def _execute_run(scenario, detector_cfg, args, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise ConfigError(f"output directory {out_dir} is not writable")
    calibration = None
    if getattr(args, "calibration", None):
        calibration = _load_calibration(args.calibration)
    trace_path = os.path.join(out_dir, "trace.csv")
    report_path = os.path.join(out_dir, "report.json")
    result = run_scenario(scenario, detector=detector_cfg,
                          calibration=calibration, seed=args.seed,
                          duration=args.duration,
                          trace_files=["trace.csv"])
    report_mod.write_trace_csv(trace_path, result.rows)
    report_mod.write_report_json(report_path, result.report)
    if not getattr(args, "no_figures", False):
        report_mod.render_figures(out_dir, result.rows, scenario.id)
    print(f"{scenario.id}: {result.report['final_classification']} "
          f"(first detection: {result.report['first_detection_time']})")
    return result


def cmd_run(args):
    scenario, detector_cfg = _resolve_scenario(args)
    _execute_run(scenario, detector_cfg, args, args.out)
    return EXIT_OK


def cmd_list(args):
    scenarios = all_scenarios()
    if args.json:
        doc = [{"id": sc.id, "plant": sc.plant, "description": sc.description}
               for sc in scenarios]
        print(json.dumps(doc, indent=2))
    else:
        for sc in scenarios:
            print(f"{sc.id:24s} [{sc.plant}] {sc.description}")
    return EXIT_OK


def cmd_calibrate(args):
    kwargs = {"p_fa": args.p_fa, "plant": args.plant}
    if args.seed is not None:
        kwargs["seed"] = args.seed
    try:
        calibration = calibrate(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    report_mod.write_calibration_json(args.out, calibration)
    print(f"calibration written to {args.out} "
          f"(a={calibration.a:.6g}, d={calibration.d:.6g})")
    return EXIT_OK


def cmd_batch(args):
    if args.scenarios == "all":
        scenarios = all_scenarios()
    else:
        ids = [s.strip() for s in args.scenarios.split(",") if s.strip()]
        try:
            scenarios = [find_scenario(i) for i in ids]
        except KeyError as exc:
            raise ConfigError(f"unknown scenario {exc.args[0]!r}") from None
    overrides = _detector_from_args(args)
    detector_cfg = (dataclasses.replace(DetectorConfig(), **overrides)
                    if overrides else None)
    for sc in scenarios:
        _execute_run(sc, detector_cfg, args, os.path.join(args.out, sc.id))
    return EXIT_OK


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"run": cmd_run, "list-scenarios": cmd_list,
                "calibrate": cmd_calibrate, "batch": cmd_batch}
    try:
        return handlers[args.verb](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # simulation fault
        print(f"simulation fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
