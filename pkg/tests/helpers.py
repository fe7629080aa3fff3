"""Shared random generators for the test suite."""

import dataclasses

import numpy as np

from nvsinglet.model import Channel, IntrinsicRates, OpticalCoefficients, RateSet

# Scale for table entries that are zero, so "within 10x" still has a magnitude.
_ZERO_SCALE = {"k_es0": 30.0, "k_sg1": 3.3, "k_e_0": 243.0, "k_ss": 1.0, "k_i": 43.0, "k_r": 17.75,
               "k_d_minus": 30.0, "k_d_0": 18.0, "k_sics": 20.0, "k_e_minus": 135.0}


def _draw(rng, value, name, factor=10.0):
    if value == 0.0:
        return rng.uniform(0.0, factor * _ZERO_SCALE.get(name, 1.0))
    return value * np.exp(rng.uniform(-np.log(factor), np.log(factor)))


def random_rateset(rng, factor=10.0) -> RateSet:
    """Every rate log-uniform within ``factor`` of its tabulated value."""
    base = RateSet.defaults()
    intrinsic = IntrinsicRates(**{
        f.name: _draw(rng, getattr(base.intrinsic, f.name), f.name, factor)
        for f in dataclasses.fields(IntrinsicRates)
    })
    channels = []
    for name, coeffs in base.channels:
        values = {}
        for f in dataclasses.fields(OpticalCoefficients):
            v = getattr(coeffs, f.name)
            values[f.name] = v if f.name == "power_scaling" else _draw(rng, v, f.name, factor)
        channels.append((name, OpticalCoefficients(**values)))
    return RateSet(intrinsic, tuple(channels))


def random_drives(rng, max_power=1.0, max_drives=2):
    names = [c.value for c in Channel]
    k = rng.integers(0, max_drives + 1)
    chosen = rng.choice(names, size=k, replace=False)
    return [(str(c), float(rng.uniform(0.0, max_power))) for c in chosen]


def random_simplex(rng, n=8) -> np.ndarray:
    return rng.dirichlet(np.ones(n))
