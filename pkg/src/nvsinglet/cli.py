"""Command-line interface.

Exit codes: 0 success, 2 bad input or configuration, 3 simulation failure,
4 fit did not converge.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass

import numpy as np

from . import fit as fitting
from .model import (
    Channel,
    RateSet,
    energy_to_wavelength,
    load_rates,
    wavelength_to_energy,
)
from .propagator import PropagationError
from .sequence import (
    EXCITATION,
    TimingConfig,
    curve_to_csv,
    fmt,
    pnp_curve,
    population_sweep,
    run_sequence,
    standard_protocol,
    timing_from_dict,
)

EXIT_OK, EXIT_INPUT, EXIT_SIMULATION, EXIT_NOT_CONVERGED = 0, 2, 3, 4

LEVEL_NAMES = ("g0", "g1", "e0", "e1", "s_e", "s_g", "nv0_g", "nv0_e")


class InputError(Exception):
    """Bad configuration or data; maps to exit code 2."""


@dataclass(frozen=True)
class Grid:
    start: float
    stop: float
    count: int
    log: bool = False

    def values(self) -> np.ndarray:
        if self.log:
            return np.geomspace(self.start, self.stop, self.count)
        return np.linspace(self.start, self.stop, self.count)


def parse_grid(text: str) -> Grid:
    """Parse ``start:stop:count[:log]``."""
    parts = text.split(":")
    if len(parts) not in (3, 4) or (len(parts) == 4 and parts[3] != "log"):
        raise InputError(f"grid must look like start:stop:count[:log], got {text!r}")
    try:
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise InputError(f"bad number in grid {text!r}") from None
    log = len(parts) == 4
    if count < 1 or start < 0 or stop < start:
        raise InputError(f"grid needs count >= 1 and 0 <= start <= stop, got {text!r}")
    if log and start <= 0:
        raise InputError("log grid needs start > 0")
    return Grid(start, stop, count, log)


@dataclass
class RunConfig:
    channel: str
    grid: Grid
    rates: RateSet
    timing: TimingConfig
    out: str
    seed: int
    with_pi: bool


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from None


def build_config(args) -> RunConfig:
    try:
        rates = load_rates(args.rates) if args.rates else RateSet.defaults()
        timing = timing_from_dict(_load_json(args.timing)) if args.timing else TimingConfig()
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        raise InputError(str(exc)) from None
    channel = args.channel
    try:
        rates.channel(channel)
    except KeyError:
        raise InputError(f"unknown channel {channel!r}") from None
    if getattr(args, "tie_sics", False):
        rates = rates.with_channel(EXCITATION, k_sics=rates.channel(channel).k_sics)
    return RunConfig(channel, parse_grid(args.powers), rates, timing, args.out, args.seed,
                     getattr(args, "with_pi", False))


def _write(out: str, text: str) -> None:
    if out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _parse_params(text: str | None) -> dict[str, float]:
    params = {}
    if not text:
        return params
    for item in text.split(","):
        name, sep, value = item.partition("=")
        if not sep or name.strip() not in fitting.FREE_NAMES:
            raise InputError(f"bad parameter {item!r}; use name=value with name in {fitting.FREE_NAMES}")
        try:
            params[name.strip()] = float(value)
        except ValueError:
            raise InputError(f"bad value in {item!r}") from None
    return params


# --- commands -------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = build_config(args)
    power = cfg.grid.values()[-1]
    seq = standard_protocol(cfg.channel, power, cfg.with_pi, cfg.timing, cfg.rates)
    run = run_sequence(seq, cfg.rates)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("stage", "label", "duration_ns", *LEVEL_NAMES, "emission"))
    for k, (stage, state, emission) in enumerate(zip(seq.stages, run.boundary_states, run.emissions), 1):
        writer.writerow((k, stage.label, fmt(stage.duration), *map(fmt, state), fmt(emission)))
    _write(cfg.out, buf.getvalue())
    return EXIT_OK


def cmd_pnp(args) -> int:
    cfg = build_config(args)
    curve = pnp_curve(cfg.channel, cfg.grid.values(), cfg.rates, cfg.timing)
    _write(cfg.out, curve_to_csv(curve))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = build_config(args)
    if args.noise < 0:
        raise InputError("--noise must be >= 0")
    params = _parse_params(args.params)
    tie = args.tie_sics
    if tie is None:
        name = fitting._SCENARIO_BY_CHANNEL.get(cfg.channel)
        tie = bool(name and fitting.SCENARIOS[name]["tie_excitation_sics"])
    rows = fitting.synth_dataset(cfg.channel, cfg.grid.values(), params, args.noise, cfg.seed,
                                 cfg.rates, cfg.timing, tie_excitation_sics=tie)
    _write(cfg.out, fitting.dataset_to_csv(rows))
    return EXIT_OK


def cmd_fit(args) -> int:
    try:
        with open(args.dataset, encoding="utf-8") as fh:
            rows = fitting.dataset_from_csv(fh.read())
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read dataset: {exc}") from None
    if not rows:
        raise InputError("dataset has no rows")
    try:
        rates = load_rates(args.rates) if args.rates else RateSet.defaults()
        timing = timing_from_dict(_load_json(args.timing)) if args.timing else TimingConfig()
        if args.problem:
            problem = fitting.problem_from_dict(_load_json(args.problem), dataset=rows)
        else:
            scenario = args.scenario
            if scenario == "auto":
                scenario = fitting.scenario_for_channel(rows[0].channel)
            if scenario == "red" and rows[0].channel != Channel.RED_FILTER.value:
                raise ValueError("the red scenario needs RedFilter data")
            observable = args.observable
            if all(r.with_pi is None for r in rows):
                observable = "pnp"  # the file already holds ratios
            elif observable == "pnp":
                rows = fitting.pnp_dataset(rows)
            problem = fitting.scenario_problem(scenario, rows, rates, timing, observable)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(str(exc)) from None
    result = fitting.fit_with_intervals(problem, restarts=args.restarts, seed=args.seed)
    _write(args.out, json.dumps(fitting.result_to_dict(result), indent=2, sort_keys=True) + "\n")
    if not result.converged:
        print("fit did not converge: restart objectives "
              + ", ".join(fmt(v) for v in result.restart_objectives), file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_energy(args) -> int:
    try:
        if args.unit == "nm":
            print(f"{fmt(args.value)} nm = {fmt(wavelength_to_energy(args.value))} eV")
        else:
            print(f"{fmt(args.value)} eV = {fmt(energy_to_wavelength(args.value))} nm")
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return EXIT_OK


def cmd_popsweep(args) -> int:
    cfg = build_config(args)
    durations = parse_grid(args.durations).values()
    powers = cfg.grid.values()
    matrix = population_sweep(durations, powers, cfg.rates, cfg.timing, with_pi=cfg.with_pi)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("power_mw", *map(fmt, durations)))
    for power, row in zip(powers, matrix.T):
        writer.writerow((fmt(power), *map(fmt, row)))
    _write(cfg.out, buf.getvalue())
    i, j = np.unravel_index(np.argmax(matrix), matrix.shape)
    interior = 0 < i < len(durations) - 1 and 0 < j < len(powers) - 1
    print(f"max singlet population {fmt(matrix[i, j])} at {fmt(durations[i])} ns, "
          f"{fmt(powers[j])} mW ({'interior' if interior else 'grid edge'})", file=sys.stderr)
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, powers: str = "0:50:20", pi_default: bool = False) -> None:
    p.add_argument("--channel", default=Channel.GREEN_FILTER.value,
                   help="laser channel id (default: %(default)s)")
    p.add_argument("--powers", default=powers, help="power grid start:stop:count[:log] in mW")
    p.add_argument("--rates", help="JSON file of rate overrides")
    p.add_argument("--timing", help="JSON file of timing overrides")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-", help="output path, '-' for stdout")
    p.add_argument("--with-pi", dest="with_pi", action="store_true", default=pi_default)
    p.add_argument("--no-pi", dest="with_pi", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nvsinglet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="per-stage populations of one protocol run")
    _common(p, powers="10:10:1")
    p.add_argument("--tie-sics", action="store_true", help="set the 532 nm SICS to the channel's")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pnp", help="normalized PL and PNP ratio versus ionization power")
    _common(p)
    p.add_argument("--tie-sics", action="store_true", help="set the 532 nm SICS to the channel's")
    p.set_defaults(func=cmd_pnp)

    p = sub.add_parser("synth", help="synthetic normalized-PL dataset")
    _common(p)
    p.add_argument("--params", help="channel overrides, e.g. k_sics=20,power_scaling=0.11")
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sd")
    p.add_argument("--tie-sics", dest="tie_sics", action="store_true", default=None)
    p.add_argument("--no-tie-sics", dest="tie_sics", action="store_false")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a dataset CSV")
    p.add_argument("dataset")
    p.add_argument("--scenario", default="auto", choices=("auto", *fitting.SCENARIOS))
    p.add_argument("--problem", help="FitProblem JSON (free parameters, rates, timing)")
    p.add_argument("--observable", default="pl", choices=fitting.OBSERVABLES)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--rates")
    p.add_argument("--timing")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("energy", help="photon wavelength <-> energy")
    p.add_argument("value", type=float)
    p.add_argument("--unit", choices=("nm", "eV"), default="nm")
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("popsweep", help="singlet population versus population-pulse settings")
    _common(p, powers="0:1:11", pi_default=True)
    p.add_argument("--durations", default="0:1000:11", help="duration grid in ns")
    p.set_defaults(func=cmd_popsweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except fitting.FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (PropagationError, FloatingPointError, ValueError) as exc:
        # configuration problems were turned into InputError before simulating
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
