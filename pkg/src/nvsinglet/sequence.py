"""Staged pulse sequences, normalized PL and PNP-ratio curves."""

from __future__ import annotations

import csv
import dataclasses
import functools
import io
import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import (
    Channel,
    DriveSetting,
    Level,
    N_LEVELS,
    MHZ_TO_PER_NS,
    RateSet,
    build_generator,
    dark_generator,
    optical_generator,
)
from .propagator import (
    CLAMP_TOL,
    PropagationError,
    clamp,
    emission_functional,
    expm_propagate,
    propagate_with_emission,
    propagator_matrix,
)

PI_PULSE = "PiPulse"
INSTANTANEOUS_OPS = (PI_PULSE,)
EXCITATION = Channel.GREEN532.value

# Thermal start: ground triplet with the three spin sublevels equally populated.
DEFAULT_INITIAL_STATE = (1 / 3, 2 / 3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class TimingConfig:
    """Stage durations (ns) and 532 nm powers (mW) of the standard protocol."""

    init_duration: float = 5000.0
    init_dark: float = 1000.0
    population_duration: float = 400.0
    delay: float = 30.0
    ionization_duration: float = 100.0
    readout_window: float = 300.0
    init_power: float = 0.2
    population_power: float = 0.2
    readout_power: float = 0.2

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")

    def replace(self, **changes) -> "TimingConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class PulseStage:
    label: str
    duration: float
    drives: tuple[DriveSetting, ...] = ()
    instantaneous_pre: str | None = None
    record_emission: bool = False

    def __post_init__(self):
        if not np.isfinite(self.duration) or self.duration < 0:
            raise ValueError(f"stage {self.label!r}: duration must be >= 0 ns")
        if self.instantaneous_pre not in (None, *INSTANTANEOUS_OPS):
            raise ValueError(f"stage {self.label!r}: unknown operation {self.instantaneous_pre!r}")
        drives = tuple(d if isinstance(d, DriveSetting) else DriveSetting(*d) for d in self.drives)
        object.__setattr__(self, "drives", drives)


@dataclass(frozen=True)
class PulseSequence:
    stages: tuple[PulseStage, ...]
    initial_state: tuple[float, ...] = DEFAULT_INITIAL_STATE

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a pulse sequence needs at least one stage")
        object.__setattr__(self, "stages", tuple(self.stages))
        p = tuple(float(x) for x in self.initial_state)
        if len(p) != N_LEVELS or min(p) < -1e-12 or abs(sum(p) - 1.0) > 1e-10:
            raise ValueError("initial_state must be 8 nonnegative populations summing to 1")
        object.__setattr__(self, "initial_state", p)


@dataclass(frozen=True)
class SequenceRun:
    final_state: np.ndarray
    emissions: tuple[float, ...]
    boundary_states: tuple[np.ndarray, ...]  # state after each stage


@dataclass
class CurveSet:
    channel: str
    powers: np.ndarray
    pl_pi: np.ndarray
    pl_nopi: np.ndarray
    pnp: np.ndarray


def apply_pi(p) -> np.ndarray:
    """Perfect pi pulse: swap the ms=0 and ms=+-1 ground-triplet populations."""
    out = np.array(p, dtype=np.float64, copy=True)
    out[[Level.G0, Level.G1]] = out[[Level.G1, Level.G0]]
    return out


_OPERATIONS = {PI_PULSE: apply_pi}


def emission_weights(rates: RateSet) -> np.ndarray:
    """Collected PL: radiative decay of the NV- excited triplet only (ns^-1)."""
    w = np.zeros(N_LEVELS)
    w[[Level.E0, Level.E1]] = rates.intrinsic.k_f_minus * MHZ_TO_PER_NS
    return w


def standard_protocol(
    ion_channel,
    ion_power: float,
    with_pi: bool,
    timing: TimingConfig | None = None,
    rates: RateSet | None = None,
) -> PulseSequence:
    """The singlet-ionization sequence: init, dark, [pi], population, delay, ionization, readout."""
    timing = timing or TimingConfig()
    ion = DriveSetting(ion_channel, ion_power)
    (rates or RateSet.defaults()).channel(ion.channel)
    green = EXCITATION
    stages = (
        PulseStage("init", timing.init_duration, (DriveSetting(green, timing.init_power),)),
        PulseStage("init_dark", timing.init_dark),
        PulseStage("pi", 0.0, (), PI_PULSE if with_pi else None),
        PulseStage("population", timing.population_duration, (DriveSetting(green, timing.population_power),)),
        PulseStage("delay", timing.delay),
        PulseStage("ionization", timing.ionization_duration, (ion,) if ion.power > 0 else ()),
        PulseStage("readout", timing.readout_window, (DriveSetting(green, timing.readout_power),),
                   record_emission=True),
    )
    return PulseSequence(stages)


def run_sequence(seq: PulseSequence, rates: RateSet | None = None, weights=None) -> SequenceRun:
    rates = rates or RateSet.defaults()
    optics = rates.optics
    w = emission_weights(rates) if weights is None else np.asarray(weights, dtype=np.float64)
    p = np.array(seq.initial_state)
    emissions = []
    states = []
    for stage in seq.stages:
        if stage.instantaneous_pre is not None:
            p = _OPERATIONS[stage.instantaneous_pre](p)
        q = build_generator(rates.intrinsic, optics, stage.drives)
        if stage.record_emission:
            prop = propagate_with_emission(q, p, stage.duration, w)
            p, e = prop.final_state, prop.emission_integral
        else:
            p, e = expm_propagate(q, p, stage.duration), 0.0
        emissions.append(e)
        states.append(p)
    return SequenceRun(p, tuple(emissions), tuple(states))


# --- fast evaluation over power grids -------------------------------------------
#
# Stages before the ionization pulse and the readout do not depend on the
# ionization power, so a power sweep reduces to one 8x8 exponential per point:
# PL(P) = m @ exp((Q_dark + P Q_1) T_ion) @ p_pre, both spin preparations at once.

@functools.lru_cache(maxsize=256)
def _pre_ionization(rates: RateSet, timing: TimingConfig, with_pi: bool) -> np.ndarray:
    seq = standard_protocol(EXCITATION, 0.0, with_pi, timing)
    p = run_sequence(PulseSequence(seq.stages[:5], seq.initial_state), rates).final_state
    p.flags.writeable = False
    return p


@functools.lru_cache(maxsize=256)
def _readout_row(rates: RateSet, timing: TimingConfig, weights: tuple[float, ...]) -> np.ndarray:
    q = build_generator(rates.intrinsic, rates.optics, [DriveSetting(EXCITATION, timing.readout_power)])
    row = emission_functional(q, timing.readout_window, np.array(weights))[1]
    row.flags.writeable = False
    return row


def _prefix_key(rates: RateSet) -> RateSet:
    # Only the intrinsic rates and the 532 nm channel enter the shared stages.
    return RateSet(rates.intrinsic, ((EXCITATION, rates.channel(EXCITATION)),))


def pl_grid(ion_channel, powers, rates: RateSet | None = None,
            timing: TimingConfig | None = None, weights=None) -> np.ndarray:
    """Readout emission integrals, shape ``(len(powers), 2)``; column 0 with pi, 1 without."""
    rates = rates or RateSet.defaults()
    timing = timing or TimingConfig()
    channel = DriveSetting(ion_channel, 0.0).channel
    coeffs = rates.channel(channel)
    w = emission_weights(rates) if weights is None else np.asarray(weights, dtype=np.float64)
    key = _prefix_key(rates)
    states = np.column_stack([_pre_ionization(key, timing, True), _pre_ionization(key, timing, False)])
    row = _readout_row(key, timing, tuple(float(x) for x in w))
    powers = np.ascontiguousarray(powers, dtype=np.float64)
    q0 = dark_generator(rates.intrinsic)
    q1 = optical_generator(coeffs, 1.0)
    after = kernels.expm_grid(q0, q1, powers, float(timing.ionization_duration), states)
    if not np.all(np.isfinite(after)):
        raise PropagationError("non-finite state after the ionization pulse")
    if after.min() < -CLAMP_TOL:
        raise PropagationError(f"population {after.min():.3e} after the ionization pulse")
    return np.einsum("j,kjm->km", row, np.maximum(after, 0.0))


def raw_pl(ion_channel, powers, with_pi: bool, rates: RateSet | None = None,
           timing: TimingConfig | None = None, weights=None) -> np.ndarray:
    """Readout emission integral for each ionization power (unnormalized)."""
    return pl_grid(ion_channel, powers, rates, timing, weights)[:, 0 if with_pi else 1]


def _check_powers(powers) -> np.ndarray:
    powers = np.atleast_1d(np.asarray(powers, dtype=np.float64))
    if not np.all(np.isfinite(powers)) or np.any(powers < 0):
        raise ValueError("ionization powers must be finite and >= 0 mW")
    return powers


def normalized_pl(ion_channel, powers, with_pi: bool, rates: RateSet | None = None,
                  timing: TimingConfig | None = None, weights=None) -> np.ndarray:
    """PL(P) / PL(0) for the same spin initialization."""
    powers = _check_powers(powers)
    pl = raw_pl(ion_channel, np.concatenate([[0.0], powers]), with_pi, rates, timing, weights)
    if not pl[0] > 0:
        raise ValueError("reference PL at zero ionization power is zero; rates are degenerate")
    out = pl[1:] / pl[0]
    out[powers == 0] = 1.0
    return out


def normalized_pl_pair(ion_channel, powers, rates: RateSet | None = None,
                       timing: TimingConfig | None = None, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """``(with pi, without pi)`` normalized PL from a single sweep."""
    powers = _check_powers(powers)
    pl = pl_grid(ion_channel, np.concatenate([[0.0], powers]), rates, timing, weights)
    if not np.all(pl[0] > 0):
        raise ValueError("reference PL at zero ionization power is zero; rates are degenerate")
    out = pl[1:] / pl[0]
    out[powers == 0] = 1.0
    return out[:, 0], out[:, 1]


def pnp_curve(ion_channel, powers, rates: RateSet | None = None,
              timing: TimingConfig | None = None, weights=None) -> CurveSet:
    powers = _check_powers(powers)
    pl_pi, pl_nopi = normalized_pl_pair(ion_channel, powers, rates, timing, weights)
    return CurveSet(DriveSetting(ion_channel, 0.0).channel, powers, pl_pi, pl_nopi, pl_pi / pl_nopi)


def population_sweep(durations, powers, rates: RateSet | None = None,
                     timing: TimingConfig | None = None, with_pi: bool = True) -> np.ndarray:
    """Ground-singlet population at the start of the ionization pulse.

    Rows follow ``durations`` (ns), columns ``powers`` (mW) of the
    population pulse.
    """
    rates = rates or RateSet.defaults()
    timing = timing or TimingConfig()
    durations = np.atleast_1d(np.asarray(durations, dtype=np.float64))
    powers = np.atleast_1d(np.asarray(powers, dtype=np.float64))
    if durations.size == 0 or powers.size == 0:
        raise ValueError("population_sweep needs non-empty grids")
    seq = standard_protocol(EXCITATION, 0.0, with_pi, timing)
    p_init = run_sequence(PulseSequence(seq.stages[:3], seq.initial_state), rates).final_state
    q_dark = build_generator(rates.intrinsic, rates.optics)
    u_delay = propagator_matrix(q_dark, timing.delay)
    out = np.empty((durations.size, powers.size))
    for j, power in enumerate(powers):
        q = build_generator(rates.intrinsic, rates.optics, [DriveSetting(EXCITATION, float(power))])
        for i, duration in enumerate(durations):
            p = expm_propagate(q, p_init, float(duration))
            out[i, j] = clamp(u_delay @ p)[Level.SG]
    return out


# --- serialization ------------------------------------------------------------------

def timing_to_dict(timing: TimingConfig) -> dict:
    return dataclasses.asdict(timing)


def timing_from_dict(data: dict) -> TimingConfig:
    names = {f.name for f in dataclasses.fields(TimingConfig)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown timing keys: {sorted(unknown)}")
    return TimingConfig(**{k: float(v) for k, v in data.items()})


def sequence_to_dict(seq: PulseSequence) -> dict:
    return {
        "initial_state": list(seq.initial_state),
        "stages": [
            {
                "label": s.label,
                "duration": s.duration,
                "drives": [{"channel": d.channel, "power": d.power} for d in s.drives],
                "instantaneous_pre": s.instantaneous_pre,
                "record_emission": s.record_emission,
            }
            for s in seq.stages
        ],
    }


def sequence_from_dict(data: dict) -> PulseSequence:
    stages = []
    for s in data["stages"]:
        unknown = set(s) - {"label", "duration", "drives", "instantaneous_pre", "record_emission"}
        if unknown:
            raise ValueError(f"unknown stage keys: {sorted(unknown)}")
        stages.append(PulseStage(
            label=s["label"],
            duration=float(s["duration"]),
            drives=tuple(DriveSetting(d["channel"], float(d["power"])) for d in s.get("drives", ())),
            instantaneous_pre=s.get("instantaneous_pre"),
            record_emission=bool(s.get("record_emission", False)),
        ))
    return PulseSequence(tuple(stages), tuple(data.get("initial_state", DEFAULT_INITIAL_STATE)))


def sequence_to_json(seq: PulseSequence) -> str:
    return json.dumps(sequence_to_dict(seq), indent=2)


def sequence_from_json(text: str) -> PulseSequence:
    return sequence_from_dict(json.loads(text))


CURVE_HEADER = ("channel", "power_mw", "pl_pi", "pl_nopi", "pnp")


def fmt(x: float) -> str:
    return format(float(x), ".9g")


def curve_to_csv(curve: CurveSet) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    for row in zip(curve.powers, curve.pl_pi, curve.pl_nopi, curve.pnp):
        writer.writerow([curve.channel, *map(fmt, row)])
    return buf.getvalue()


def curve_from_csv(text: str) -> CurveSet:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != CURVE_HEADER:
        raise ValueError(f"bad curve header {header}")
    rows = [r for r in reader if r]
    channels = {r[0] for r in rows}
    if len(channels) != 1:
        raise ValueError("curve CSV must hold exactly one channel")
    cols = np.array([[float(x) for x in r[1:]] for r in rows]).T
    return CurveSet(channels.pop(), *cols)
