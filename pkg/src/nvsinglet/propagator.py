"""Piecewise-constant propagation of the rate equations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

CLAMP_TOL = 1e-12
# Column sums below this (relative to the largest rate) count as conservative.
CONSERVE_TOL = 1e-12


class PropagationError(RuntimeError):
    """Raised when a propagated state is not a valid probability vector."""


@dataclass(frozen=True)
class Propagation:
    final_state: np.ndarray
    emission_integral: float


def _check_generator(q) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValueError(f"generator must be square, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise PropagationError("generator has non-finite entries")
    return q


def _check_dt(dt: float) -> float:
    dt = float(dt)
    if not math.isfinite(dt) or dt < 0:
        raise ValueError(f"dt must be finite and >= 0 ns, got {dt}")
    return dt


def conserved_block(q) -> int:
    """Size of the leading block whose columns sum to zero (0 if none)."""
    n = q.shape[0]
    scale = max(np.abs(q).max(), 1.0)
    return n if np.abs(q.sum(axis=0)).max() <= CONSERVE_TOL * scale else 0


def clamp(p: np.ndarray) -> np.ndarray:
    """Zero out roundoff negatives; anything below -CLAMP_TOL is an error."""
    if not np.all(np.isfinite(p)):
        raise PropagationError("state has non-finite entries")
    if p.min() < -CLAMP_TOL:
        raise PropagationError(f"population {p.min():.3e} below -{CLAMP_TOL}")
    return np.where(p < 0.0, 0.0, p)


def propagator_matrix(q, dt: float) -> np.ndarray:
    """exp(Q dt) for a validated generator."""
    q = _check_generator(q)
    return kernels.expm(q * _check_dt(dt), conserved_block(q))


def expm_propagate(q, p0, dt: float) -> np.ndarray:
    """Return ``exp(Q dt) @ p0``."""
    q = _check_generator(q)
    dt = _check_dt(dt)
    p0 = np.asarray(p0, dtype=np.float64)
    if dt == 0.0:
        return p0.copy()
    return clamp(kernels.expm(q * dt, conserved_block(q)) @ p0)


def rk4_propagate(q, p0, dt: float, step: float) -> np.ndarray:
    """Classical fixed-step RK4 integration of ``dP/dt = Q P``.

    The step is shrunk to ``dt / ceil(dt / step)`` so the last step lands
    exactly on ``dt``.
    """
    q = _check_generator(q)
    dt = _check_dt(dt)
    if not step > 0:
        raise ValueError(f"step must be > 0 ns, got {step}")
    p0 = np.ascontiguousarray(p0, dtype=np.float64)
    if dt == 0.0:
        return p0.copy()
    n = max(1, math.ceil(dt / step - 1e-9))
    return kernels.rk4(q, p0, dt / n, n)


def rk4_trajectory(q, p0, dt: float, step: float) -> tuple[np.ndarray, np.ndarray]:
    """RK4 states on a uniform grid; returns ``(times, states)``."""
    q = _check_generator(q)
    dt = _check_dt(dt)
    if not step > 0:
        raise ValueError(f"step must be > 0 ns, got {step}")
    n = max(1, math.ceil(dt / step - 1e-9))
    states = kernels.rk4_trajectory(q, np.ascontiguousarray(p0, dtype=np.float64), dt / n, n)
    return np.linspace(0.0, dt, n + 1), states


def augmented_generator(q, weights) -> np.ndarray:
    """Append an absorbing accumulator whose population grows at ``weights @ P``."""
    n = q.shape[0]
    a = np.zeros((n + 1, n + 1))
    a[:n, :n] = q
    a[n, :n] = weights
    return a


def _check_weights(weights, n) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"weights must have shape ({n},), got {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and >= 0")
    return w


def propagate_with_emission(q, p0, dt: float, weights) -> Propagation:
    """Propagate and integrate ``weights @ P(t)`` over ``[0, dt]``."""
    q = _check_generator(q)
    dt = _check_dt(dt)
    n = q.shape[0]
    w = _check_weights(weights, n)
    p0 = np.asarray(p0, dtype=np.float64)
    if dt == 0.0:
        return Propagation(p0.copy(), 0.0)
    m = kernels.expm(augmented_generator(q, w) * dt, conserved_block(q))
    final = clamp(m[:n, :n] @ p0)
    emission = float(m[n, :n] @ p0)
    return Propagation(final, max(emission, 0.0))


def emission_functional(q, dt: float, weights) -> tuple[np.ndarray, np.ndarray]:
    """Linear maps ``(U, m)`` with ``P(dt) = U @ p0`` and emission ``= m @ p0``."""
    q = _check_generator(q)
    dt = _check_dt(dt)
    n = q.shape[0]
    w = _check_weights(weights, n)
    m = kernels.expm(augmented_generator(q, w) * dt, conserved_block(q))
    return m[:n, :n].copy(), m[n, :n].copy()
