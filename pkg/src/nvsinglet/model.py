"""Eight-level NV rate model.

Rates are quoted in MHz (intrinsic) and MHz/mW (laser driven) at every
external surface and converted to ns^-1 when the generator is assembled.
The generator ``Q`` acts on column vectors, ``dP/dt = Q @ P``, so
``Q[to, from]`` holds the rate of the ``from -> to`` transition.
"""

from __future__ import annotations

import dataclasses
import functools
import json
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Mapping

import numpy as np

MHZ_TO_PER_NS = 1e-3
HC_EV_NM = 1239.84

N_LEVELS = 8


class Level(IntEnum):
    G0 = 0   # NV- ground triplet, ms=0
    G1 = 1   # NV- ground triplet, ms=+-1
    E0 = 2   # NV- excited triplet, ms=0
    E1 = 3   # NV- excited triplet, ms=+-1
    SE = 4   # NV- excited singlet
    SG = 5   # NV- ground singlet (metastable)
    N0G = 6  # NV0 ground
    N0E = 7  # NV0 excited


NV_MINUS = (Level.G0, Level.G1, Level.E0, Level.E1, Level.SE, Level.SG)
NV_ZERO = (Level.N0G, Level.N0E)


class Channel(str, Enum):
    GREEN532 = "Green532"
    GREEN_FILTER = "GreenFilter"
    BLUE_FILTER = "BlueFilter"
    RED_FILTER = "RedFilter"
    LONG_RED_FILTER = "LongRedFilter"
    NIR = "NIR"


@dataclass(frozen=True)
class IntrinsicRates:
    """Laser-independent decay rates in MHz."""

    k_f_minus: float = 77.0
    k_f_0: float = 53.0
    k_es0: float = 0.0
    k_es1: float = 30.0
    k_s: float = 10000.0
    k_sg0: float = 3.3
    k_sg1: float = 0.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class OpticalCoefficients:
    """Per-channel rate coefficients in MHz/mW plus a power scaling factor."""

    k_e_minus: float = 0.0
    k_e_0: float = 0.0
    k_ss: float = 0.0
    k_i: float = 0.0
    k_r: float = 0.0
    k_d_minus: float = 0.0
    k_d_0: float = 0.0
    k_sics: float = 0.0
    power_scaling: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")
        if not 0.0 < self.power_scaling <= 1.0:
            raise ValueError(f"power_scaling must lie in (0, 1], got {self.power_scaling}")

    def replace(self, **changes) -> "OpticalCoefficients":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DriveSetting:
    channel: str
    power: float  # mW, before power_scaling

    def __post_init__(self):
        object.__setattr__(self, "channel", _channel_id(self.channel))
        if not np.isfinite(self.power) or self.power < 0:
            raise ValueError(f"drive power must be >= 0 mW, got {self.power}")


_GREEN = dict(k_e_minus=135.0, k_e_0=243.0, k_ss=0.0, k_i=43.0, k_r=17.75, k_d_minus=0.0, k_d_0=0.0)

# Table columns; "fitted" cells carry the published best-fit values.
_PRESETS: dict[str, OpticalCoefficients] = {
    Channel.GREEN532.value: OpticalCoefficients(**_GREEN, k_sics=20.0, power_scaling=1.0),
    Channel.GREEN_FILTER.value: OpticalCoefficients(**_GREEN, k_sics=20.0, power_scaling=0.11),
    Channel.BLUE_FILTER.value: OpticalCoefficients(**_GREEN, k_sics=22.8, power_scaling=0.129),
    Channel.RED_FILTER.value: OpticalCoefficients(
        k_e_minus=26.0, k_e_0=0.0, k_ss=0.0, k_i=8.2, k_r=0.008,
        k_d_minus=10.0, k_d_0=18.0, k_sics=0.006, power_scaling=0.11),
    Channel.LONG_RED_FILTER.value: OpticalCoefficients(
        k_e_minus=0.0, k_e_0=0.0, k_ss=0.0, k_i=28.0, k_r=0.0,
        k_d_minus=30.0, k_d_0=12.0, k_sics=0.08, power_scaling=1.0),
    Channel.NIR.value: OpticalCoefficients(
        k_e_minus=0.0, k_e_0=0.0, k_ss=0.92, k_i=13.0, k_r=0.2,
        k_d_minus=0.0, k_d_0=0.0, k_sics=0.002, power_scaling=1.0),
}


def _channel_id(channel) -> str:
    return channel.value if isinstance(channel, Channel) else str(channel)


def default_rates(channel) -> tuple[IntrinsicRates, OpticalCoefficients]:
    """Published intrinsic rates and the optical preset for one channel."""
    return IntrinsicRates(), _PRESETS[Channel(_channel_id(channel)).value]


@dataclass(frozen=True)
class RateSet:
    """Intrinsic rates plus a table of optical channels.

    Hashable, so it can key simulation caches. Use :meth:`with_channel` to
    derive modified copies.
    """

    intrinsic: IntrinsicRates = field(default_factory=IntrinsicRates)
    channels: tuple[tuple[str, OpticalCoefficients], ...] = ()

    @classmethod
    def defaults(cls) -> "RateSet":
        return cls(IntrinsicRates(), tuple(_PRESETS.items()))

    @property
    def optics(self) -> dict[str, OpticalCoefficients]:
        return dict(self.channels)

    def channel(self, name) -> OpticalCoefficients:
        name = _channel_id(name)
        for key, coeffs in self.channels:
            if key == name:
                return coeffs
        raise KeyError(f"unknown channel {name!r}")

    def with_channel(self, name, coeffs: OpticalCoefficients | None = None, **changes) -> "RateSet":
        name = _channel_id(name)
        if coeffs is None:
            coeffs = self.channel(name)
        if changes:
            coeffs = coeffs.replace(**changes)
        items = dict(self.channels)
        items[name] = coeffs
        return RateSet(self.intrinsic, tuple(items.items()))

    def with_intrinsic(self, **changes) -> "RateSet":
        return RateSet(dataclasses.replace(self.intrinsic, **changes), self.channels)


# --- generator ----------------------------------------------------------------

def _add(q, src, dst, rate):
    q[dst, src] += rate
    q[src, src] -= rate


def dark_generator(intrinsic: IntrinsicRates) -> np.ndarray:
    """Generator with every laser off, in ns^-1."""
    return _dark_generator(intrinsic).copy()


@functools.lru_cache(maxsize=64)
def _dark_generator(intrinsic: IntrinsicRates) -> np.ndarray:
    q = np.zeros((N_LEVELS, N_LEVELS))
    r = {f.name: getattr(intrinsic, f.name) * MHZ_TO_PER_NS for f in dataclasses.fields(intrinsic)}
    _add(q, Level.E0, Level.G0, r["k_f_minus"])
    _add(q, Level.E1, Level.G1, r["k_f_minus"])
    _add(q, Level.E0, Level.SE, r["k_es0"])
    _add(q, Level.E1, Level.SE, r["k_es1"])
    _add(q, Level.SE, Level.SG, r["k_s"])
    _add(q, Level.SG, Level.G0, r["k_sg0"])
    _add(q, Level.SG, Level.G1, r["k_sg1"])
    _add(q, Level.N0E, Level.N0G, r["k_f_0"])
    q.flags.writeable = False
    return q


def optical_generator(coeffs: OpticalCoefficients, power: float) -> np.ndarray:
    """Laser-driven part of the generator for one channel at commanded power (mW)."""
    q = np.zeros((N_LEVELS, N_LEVELS))
    scale = power * coeffs.power_scaling * MHZ_TO_PER_NS
    if scale == 0.0:
        return q
    _add(q, Level.G0, Level.E0, coeffs.k_e_minus * scale)
    _add(q, Level.G1, Level.E1, coeffs.k_e_minus * scale)
    _add(q, Level.E0, Level.G0, coeffs.k_d_minus * scale)
    _add(q, Level.E1, Level.G1, coeffs.k_d_minus * scale)
    _add(q, Level.SG, Level.SE, coeffs.k_ss * scale)
    _add(q, Level.E0, Level.N0G, coeffs.k_i * scale)
    _add(q, Level.E1, Level.N0G, coeffs.k_i * scale)
    _add(q, Level.SG, Level.N0G, coeffs.k_sics * scale)
    _add(q, Level.N0G, Level.N0E, coeffs.k_e_0 * scale)
    _add(q, Level.N0E, Level.N0G, coeffs.k_d_0 * scale)
    _add(q, Level.N0E, Level.G0, coeffs.k_r * scale)
    _add(q, Level.N0E, Level.G1, coeffs.k_r * scale)
    return q


def build_generator(
    intrinsic: IntrinsicRates,
    optics: Mapping[str, OpticalCoefficients] | RateSet,
    drives: Iterable[DriveSetting] = (),
) -> np.ndarray:
    """Assemble the 8x8 master-equation generator (ns^-1) for the given drives.

    Each drive contributes ``coefficient * power * power_scaling``. Raises
    ``KeyError`` for a drive on a channel missing from ``optics``.
    """
    if isinstance(optics, RateSet):
        optics = optics.optics
    q = dark_generator(intrinsic)
    for drive in drives:
        if not isinstance(drive, DriveSetting):
            drive = DriveSetting(*drive)
        if drive.channel not in optics:
            raise KeyError(f"unknown channel {drive.channel!r}")
        q += optical_generator(optics[drive.channel], drive.power)
    return q


# --- photon energy --------------------------------------------------------------

def wavelength_to_energy(wavelength_nm: float) -> float:
    if not wavelength_nm > 0:
        raise ValueError(f"wavelength must be > 0 nm, got {wavelength_nm}")
    return HC_EV_NM / wavelength_nm


def energy_to_wavelength(energy_ev: float) -> float:
    if not energy_ev > 0:
        raise ValueError(f"energy must be > 0 eV, got {energy_ev}")
    return HC_EV_NM / energy_ev


# --- JSON -------------------------------------------------------------------------

def _units(cls) -> dict[str, str]:
    if cls is IntrinsicRates:
        return {f.name: "MHz" for f in dataclasses.fields(cls)}
    units = {f.name: "MHz/mW" for f in dataclasses.fields(cls)}
    units["power_scaling"] = "1"
    return units


def _strict(cls, data: Mapping, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**{k: float(v) for k, v in data.items()})


def rates_to_dict(rates: RateSet) -> dict:
    return {
        "intrinsic": dataclasses.asdict(rates.intrinsic),
        "channels": {name: dataclasses.asdict(c) for name, c in rates.channels},
        "units": {
            "intrinsic": _units(IntrinsicRates),
            "channels": _units(OpticalCoefficients),
        },
    }


def rates_from_dict(data: Mapping, base: RateSet | None = None) -> RateSet:
    """Build a RateSet from a JSON document.

    Fields absent from the document keep the value in ``base`` (the
    published presets by default), so an overrides file only has to list
    what it changes. Unknown keys raise ``ValueError``.
    """
    base = RateSet.defaults() if base is None else base
    unknown = set(data) - {"intrinsic", "channels", "units"}
    if unknown:
        raise ValueError(f"unknown top-level keys: {sorted(unknown)}")
    rates = base
    if "intrinsic" in data:
        merged = {**dataclasses.asdict(base.intrinsic), **data["intrinsic"]}
        rates = RateSet(_strict(IntrinsicRates, merged, "intrinsic"), rates.channels)
    for name, fields in data.get("channels", {}).items():
        try:
            start = dataclasses.asdict(rates.channel(name))
        except KeyError:
            start = {}
        coeffs = _strict(OpticalCoefficients, {**start, **fields}, f"channels.{name}")
        rates = rates.with_channel(name, coeffs)
    return rates


def dump_rates(rates: RateSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rates_to_dict(rates), fh, indent=2)
        fh.write("\n")


def load_rates(path, base: RateSet | None = None) -> RateSet:
    with open(path, encoding="utf-8") as fh:
        return rates_from_dict(json.load(fh), base)
