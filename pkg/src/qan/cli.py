"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 no key (rate 0).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Any

from . import __version__
from ._io import atomic_write
from .keyrate import analytic_session_rate
from .montecarlo import run_session, tally_to_reports, write_tally_csv
from .params import NetworkScenario, ScenarioError, read_scenario_dict, scenario_from_dict
from .sweep import (
    DEFAULT_DISTANCES_KM,
    MEASURED_CAPACITIES,
    replicate_fig3,
    sweep_fig4b,
    write_fig3,
    write_grid,
)

EXIT_OK, EXIT_CONFIG, EXIT_NO_KEY = 0, 1, 2
DEFAULT_GATES = 10 ** 8


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` overrides to a scenario dict.

    Keys are dotted paths (``detector.p_dark``, ``users.0.fibre_km``);
    ``users.<field>`` sets the field on every user.
    """
    for item in overrides or []:
        if "=" not in item:
            raise ScenarioError(f"override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        value = _parse_value(raw)
        parts = key.split(".")
        if parts[0] == "users" and len(parts) == 2:
            for u in d.get("users", []):
                u[parts[1]] = value
            continue
        target = d
        for p in parts[:-1]:
            if isinstance(target, list):
                target = target[int(p)]
            else:
                target = target.setdefault(p, {})
        last = parts[-1]
        if isinstance(target, list):
            target[int(last)] = value
        else:
            target[last] = value
    return d


def _load(path: str, overrides: list[str]) -> NetworkScenario:
    try:
        d = read_scenario_dict(path)
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return scenario_from_dict(apply_overrides(d, overrides))


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _write_json(path: Path, obj: Any) -> Path:
    atomic_write(path, lambda fh: fh.write(_dump_json(obj) + "\n"))
    return path


def cmd_rate(args, manifest: dict) -> int:
    scenario = _load(args.scenario, args.params)
    if not 0 <= args.user < scenario.active_users:
        raise ScenarioError(f"--user {args.user} out of range for {scenario.active_users} active users")
    report = analytic_session_rate(scenario, args.user)
    out = report.to_dict() | {"user": args.user}
    print(_dump_json(out))
    manifest["outputs"].append(str(_write_json(Path(args.out) / f"rate_user{args.user}.json", out)))
    return EXIT_NO_KEY if report.no_key else EXIT_OK


def cmd_mc(args, manifest: dict) -> int:
    scenario = _load(args.scenario, args.params)
    gates = args.gates if args.gates is not None else scenario.bins * (DEFAULT_GATES // scenario.bins)
    if gates % scenario.bins or gates < scenario.bins:
        raise ScenarioError(f"--gates {gates} must be a positive multiple of N={scenario.bins}")
    tally = run_session(scenario, args.seed, gates, jobs=args.jobs)
    reports = [r.to_dict() | {"user": u} for u, r in enumerate(tally_to_reports(tally, scenario))]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_tally_csv(tally, out / "mc_tally.csv")
    manifest["outputs"].append(str(csv_path))
    manifest["outputs"].append(str(_write_json(out / "mc_reports.json", reports)))
    print(_dump_json(reports))
    return EXIT_NO_KEY if all(r["no_key"] for r in reports) else EXIT_OK


def _sweep_config(path: str | None) -> dict:
    cfg = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read sweep config {path}: {exc}") from exc
    return cfg


def cmd_sweep(args, manifest: dict) -> int:
    cfg = _sweep_config(args.config)
    capacities = cfg.get("capacities", list(MEASURED_CAPACITIES))
    if not capacities:
        raise ScenarioError("sweep config has an empty capacities list")
    distances = cfg.get("distances_km", list(DEFAULT_DISTANCES_KM))
    try:
        grids = sweep_fig4b(capacities, distances, jobs=args.jobs, extended=cfg.get("extended", False))
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    for g in grids:
        manifest["outputs"] += [str(p) for p in write_grid(g, args.out)]
    print(_dump_json({"outputs": manifest["outputs"]}))
    return EXIT_OK


def cmd_fig3(args, manifest: dict) -> int:
    scenario = _load(args.scenario, args.params)
    mode = "mc" if args.mode in ("mc", "montecarlo") else "analytic"
    points = replicate_fig3(scenario, n_sessions=args.sessions, mode=mode, seed=args.seed,
                            gates_per_session=args.gates, jobs=args.jobs)
    name = args.name or Path(args.scenario).stem
    path = write_fig3(points, Path(args.out) / f"fig3_{name}.csv")
    manifest["outputs"].append(str(path))
    print(_dump_json({"outputs": [str(path)], "sessions": args.sessions}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qan", description="Key rates for an upstream TDM quantum access network.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("scenario", help="scenario JSON file")
            sp.add_argument("--params", nargs="*", default=[], metavar="K=V",
                            help="override scenario values, e.g. session_s=7200 users.fibre_km=25")
        sp.add_argument("--out", default="./out", help="output directory (default ./out)")
        sp.add_argument("--jobs", type=int, default=1, help="parallel workers")

    s = sub.add_parser("rate", help="analytic key rate of one user")
    common(s)
    s.add_argument("--user", type=int, default=0)
    s.set_defaults(func=cmd_rate)

    s = sub.add_parser("mc", help="Monte Carlo session tally and key rates")
    common(s)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gates", type=int, default=None, help=f"gates to simulate (default ~{DEFAULT_GATES:.0e})")
    s.set_defaults(func=cmd_mc)

    s = sub.add_parser("sweep", help="per-user rate heatmaps over distance and active users")
    s.add_argument("config", nargs="?", default=None,
                   help='optional JSON: {"capacities": [...], "distances_km": [...], "extended": false}')
    common(s, scenario=False)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("fig3", help="per-session QBER and rate series")
    common(s)
    s.add_argument("--mode", choices=["analytic", "mc", "montecarlo"], default="analytic")
    s.add_argument("--sessions", type=int, default=36)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gates", type=int, default=None, help="gates per Monte Carlo session (default: full session)")
    s.add_argument("--name", default=None, help="scenario label used in the output file name")
    s.set_defaults(func=cmd_fig3)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"qan: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    manifest = {
        "command": args.cmd,
        "argv": argv,
        "scenario": getattr(args, "scenario", None) or getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "mode": getattr(args, "mode", "analytic" if args.cmd != "mc" else "mc"),
        "outputs": [],
        "version": __version__,
        "status": "running",
    }
    t0 = time.perf_counter()
    code = EXIT_CONFIG
    try:
        code = args.func(args, manifest)
        manifest["status"] = "ok" if code == EXIT_OK else "no_key"
    except ScenarioError as exc:
        print(f"qan: config error: {exc}", file=sys.stderr)
        manifest["status"] = "config_error"
        manifest["error"] = str(exc)
    except ValueError as exc:
        print(f"qan: error: {exc}", file=sys.stderr)
        manifest["status"] = "error"
        manifest["error"] = str(exc)
    finally:
        manifest["wall_time_s"] = time.perf_counter() - t0
        manifest["exit_code"] = code
        try:
            _write_json(Path(args.out) / "manifest.json", manifest)
        except OSError as exc:
            print(f"qan: cannot write manifest: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
