"""Command line entry point: ``plan``, ``device`` and ``sweep``.

Exit codes: 0 success, 1 configuration or request error, 2 infeasible plan
(or a sweep in which every row is infeasible), 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from typing import Sequence

from .config import ConfigError, ExperimentConfig, load_config
from .control import (
    ContractError,
    InfeasiblePlanError,
    RouteRequest,
    plan_route,
    quantize_voltages,
)
from .device import DeviceDomainError, dump_spectrum, zero_bias_states
from .harness import SWEEPS, Mode, emit_results

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(f"mrrswitch: {msg}", file=sys.stderr)


def _cmd_plan(args, cfg: ExperimentConfig) -> int:
    spec = cfg.device.for_band(args.wavelength)
    req = RouteRequest.from_bits(args.wavelength, args.bitmap, bitrate=args.bitrate)
    plan = plan_route(req, spec, **cfg.device.plan_kwargs())
    doc = plan.to_dict()
    doc["voltage_words_v"] = list(quantize_voltages(plan.voltages, cfg.device.voltage_resolution))
    doc["reconfiguration_latency_us"] = cfg.sweep.reconfiguration_latency_us
    print(json.dumps(doc, indent=2))
    if not args.json_only:
        print(plan.table())
    return EXIT_OK


def _cmd_device(args, cfg: ExperimentConfig) -> int:
    spec = cfg.device.for_band(args.band) if args.band else cfg.device.base
    states = zero_bias_states(spec)
    if args.bitmap:
        wl = args.wavelength or args.band or spec.rings[0].zero_bias_resonance
        req = RouteRequest.from_bits(wl, args.bitmap)
        states = plan_route(req, spec, **cfg.device.plan_kwargs()).states
    dump = dump_spectrum(spec, states, resolution_pm=args.resolution,
                         start_nm=args.start, stop_nm=args.stop, isolated=args.isolated)
    dump.write_csv(args.out)
    print(f"wrote {len(dump.wavelength)} points x {len(dump.power_db)} ports to {args.out}")
    return EXIT_OK


def _cmd_sweep(args, cfg: ExperimentConfig) -> int:
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.symbols is not None or args.jobs is not None:
        sweep = cfg.sweep
        if args.symbols is not None:
            sweep = replace(sweep, symbols=args.symbols)
        if args.jobs is not None:
            sweep = replace(sweep, jobs=args.jobs)
        cfg = ExperimentConfig(cfg.device, cfg.superchannel, cfg.fiber, cfg.noise, cfg.dsp, sweep)
    progress = None if args.quiet else (lambda m: print(m, file=sys.stderr))
    result = SWEEPS[Mode(args.mode)](cfg, progress)
    emit_results(result, args.format, args.out)
    n_fail = sum(1 for r in result.rows if r.status == "ok" and not r.fec_pass)
    print(f"{len(result.rows)} rows written to {args.out} ({n_fail} above the FEC limit)")
    return EXIT_INFEASIBLE if result.all_infeasible else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrrswitch", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="TOML experiment file")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("plan", help="plan a unicast or multicast route")
    sp.add_argument("--wavelength", type=float, required=True, help="input wavelength [nm]")
    sp.add_argument("--bitmap", required=True, help="8 characters, port 1 first, e.g. 00100000")
    sp.add_argument("--bitrate", type=float, default=120.0, help="[Gb/s]")
    sp.add_argument("--json-only", action="store_true", help="omit the text table")
    sp.set_defaults(func=_cmd_plan)

    sd = sub.add_parser("device", help="dump per-port spectra as CSV")
    sd.add_argument("--out", required=True)
    sd.add_argument("--resolution", type=float, default=1.44, help="[pm]")
    sd.add_argument("--start", type=float, default=None, help="[nm]")
    sd.add_argument("--stop", type=float, default=None, help="[nm]")
    sd.add_argument("--band", type=float, default=None, help="use this band's bandwidth table [nm]")
    sd.add_argument("--bitmap", default=None, help="apply the plan for this route first")
    sd.add_argument("--wavelength", type=float, default=None, help="route wavelength [nm]")
    sd.add_argument("--isolated", action="store_true", help="each drop port shows its ring alone")
    sd.set_defaults(func=_cmd_device)

    sw = sub.add_parser("sweep", help="run an EVM sweep")
    sw.add_argument("--mode", choices=[m.value for m in Mode], default="unicast")
    sw.add_argument("--out", required=True)
    sw.add_argument("--format", choices=["csv", "json"], default="csv")
    sw.add_argument("--seed", type=int, default=None)
    sw.add_argument("--symbols", type=int, default=None)
    sw.add_argument("--jobs", type=int, default=None)
    sw.add_argument("--quiet", action="store_true")
    sw.set_defaults(func=_cmd_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except InfeasiblePlanError as exc:
        _err(f"infeasible: {exc}")
        return EXIT_INFEASIBLE
    except OSError as exc:
        _err(str(exc))
        return EXIT_IO
    except (ConfigError, ContractError, DeviceDomainError, ValueError) as exc:
        _err(str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
