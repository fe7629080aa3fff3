"""Least-squares estimation of channel rate coefficients from normalized PL.

Parameters are fitted in box-normalized coordinates with a bounded
Nelder-Mead simplex and several jittered restarts; uncertainties come from
the profile of the chi-square objective (delta chi^2 = 1).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .model import RateSet, rates_from_dict, rates_to_dict
from .sequence import (
    EXCITATION,
    TimingConfig,
    fmt,
    normalized_pl_pair,
    timing_from_dict,
    timing_to_dict,
)

log = logging.getLogger(__name__)

FREE_NAMES = ("k_sics", "k_e_minus", "k_i", "k_r", "power_scaling")
OBSERVABLES = ("pl", "pnp")
DATASET_HEADER = ("channel", "power_mw", "with_pi", "pl_norm", "sigma")
CONVERGENCE_SPREAD = 1e-8


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class Observation:
    channel: str
    power_mw: float
    with_pi: bool | None  # None for PNP-ratio rows
    value: float
    sigma: float | None = None


@dataclass(frozen=True)
class FreeParam:
    name: str
    lower: float
    upper: float
    initial: float


@dataclass
class FitProblem:
    dataset: list[Observation]
    free_params: list[FreeParam]
    fixed_rates: RateSet = field(default_factory=RateSet.defaults)
    timing: TimingConfig = field(default_factory=TimingConfig)
    observable: str = "pl"
    # Hold the 532 nm singlet ionization equal to the fitted channel's.
    tie_excitation_sics: bool = False

    def __post_init__(self):
        if not self.dataset:
            raise ValueError("dataset is empty")
        channels = {row.channel for row in self.dataset}
        if len(channels) != 1:
            raise ValueError(f"dataset must hold a single channel, got {sorted(channels)}")
        self.fixed_rates.channel(self.channel)
        if self.observable not in OBSERVABLES:
            raise ValueError(f"observable must be one of {OBSERVABLES}")
        if self.observable == "pl" and any(row.with_pi is None for row in self.dataset):
            raise ValueError("PL rows need a with_pi flag")
        if not self.free_params:
            raise ValueError("no free parameters")
        names = [p.name for p in self.free_params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate free parameter")
        for p in self.free_params:
            if p.name not in FREE_NAMES:
                raise ValueError(f"cannot fit {p.name!r}; choose from {FREE_NAMES}")
            if not (np.isfinite(p.lower) and np.isfinite(p.upper) and p.lower < p.upper):
                raise ValueError(f"{p.name}: bounds must be finite with lower < upper")
            if not p.lower <= p.initial <= p.upper:
                raise ValueError(f"{p.name}: initial guess outside bounds")
            if p.lower < 0:
                raise ValueError(f"{p.name}: rates cannot be negative")
            if p.name == "power_scaling" and not (p.lower > 0 and p.upper <= 1):
                raise ValueError("power_scaling bounds must lie in (0, 1]")

    @property
    def channel(self) -> str:
        return self.dataset[0].channel

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.free_params]

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.lower for p in self.free_params])

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.upper for p in self.free_params])

    @property
    def initial(self) -> np.ndarray:
        return np.array([p.initial for p in self.free_params])


@dataclass
class FitResult:
    best: dict[str, float]
    objective: float
    intervals: dict[str, tuple[float, float]]
    n_evals: int
    converged: bool
    restart_objectives: list[float] = field(default_factory=list)

    @property
    def restarts_agree(self) -> bool:
        """True when every restart ended within the convergence spread of the best."""
        objs = self.restart_objectives
        return bool(objs) and max(objs) - min(objs) < CONVERGENCE_SPREAD


# --- simulation of a dataset --------------------------------------------------------

def rates_for(params: dict[str, float], problem: FitProblem) -> RateSet:
    rates = problem.fixed_rates.with_channel(problem.channel, **{k: float(v) for k, v in params.items()})
    if problem.tie_excitation_sics:
        rates = rates.with_channel(EXCITATION, k_sics=rates.channel(problem.channel).k_sics)
    return rates


def predict(params: dict[str, float], problem: FitProblem) -> np.ndarray:
    """Model value for every dataset row."""
    rates = rates_for(params, problem)
    powers = np.array([row.power_mw for row in problem.dataset])
    grid, where = np.unique(powers, return_inverse=True)
    pl_pi, pl_nopi = normalized_pl_pair(problem.channel, grid, rates, problem.timing)
    if problem.observable == "pnp":
        return (pl_pi / pl_nopi)[where]
    with_pi = np.array([bool(row.with_pi) for row in problem.dataset])
    return np.where(with_pi, pl_pi[where], pl_nopi[where])


def residuals(params: dict[str, float], problem: FitProblem) -> np.ndarray:
    missing = set(problem.names) - set(params)
    if missing:
        raise ValueError(f"missing parameters {sorted(missing)}")
    measured = np.array([row.value for row in problem.dataset])
    sigma = np.array([1.0 if row.sigma is None else row.sigma for row in problem.dataset])
    return (predict(params, problem) - measured) / sigma


class _Objective:
    """Chi-square in physical units, counting evaluations."""

    def __init__(self, problem: FitProblem):
        self.problem = problem
        self.n_evals = 0

    def __call__(self, x) -> float:
        self.n_evals += 1
        params = dict(zip(self.problem.names, x))
        try:
            r = residuals(params, self.problem)
        except (ValueError, RuntimeError) as exc:
            log.debug("objective failed at %s: %s", params, exc)
            return np.inf
        value = float(r @ r)
        return value if np.isfinite(value) else np.inf


# --- bounded simplex ------------------------------------------------------------------

def _to_box(y):
    return 0.5 * (1.0 + np.sin(y))


def _from_box(u):
    return np.arcsin(np.clip(2.0 * u - 1.0, -1.0, 1.0))


def minimize_box(f: Callable[[np.ndarray], float], x0, lower, upper,
                 xatol: float = 1e-9, fatol: float = 1e-11, polish: int = 4,
                 edge: float = 0.4):
    """Nelder-Mead inside a box.

    The search runs unconstrained on ``y`` with ``x = lower + (upper - lower)
    * (1 + sin y) / 2``, so the simplex never degenerates against a face
    and the bounds stay reachable. After the first descent the simplex is
    rebuilt around the optimum with a halved edge, up to ``polish`` times or
    until the objective stops improving. Returns ``(x, f(x))``.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    width = upper - lower

    def g(y):
        return f(lower + _to_box(y) * width)

    y = _from_box((np.asarray(x0, dtype=float) - lower) / width)
    best = g(y)
    h = edge
    for _ in range(polish + 1):
        simplex = np.vstack([y, y + h * np.eye(len(y))])
        options = {"xatol": xatol, "fatol": fatol, "maxfev": 400 * (len(y) + 1),
                   "adaptive": len(y) > 2, "initial_simplex": simplex}
        res = minimize(g, y, method="Nelder-Mead", options=options)
        if not np.isfinite(res.fun):
            break
        improved = best - res.fun
        if res.fun <= best:
            y, best = res.x, float(res.fun)
        if not improved > fatol:
            break
        h *= 0.5
    return lower + _to_box(y) * width, best


def start_points(problem: FitProblem, restarts: int = 5, seed: int = 0, jitter: float = 0.2) -> list[np.ndarray]:
    """The initial guess followed by ``restarts - 1`` jittered copies, clipped to the box."""
    if restarts < 1:
        raise ValueError("need at least one restart")
    lo, hi = problem.lower, problem.upper
    rng = np.random.default_rng(seed)
    starts = [problem.initial]
    for _ in range(restarts - 1):
        starts.append(np.clip(problem.initial + rng.uniform(-jitter, jitter, len(lo)) * (hi - lo), lo, hi))
    return starts


def fit(problem: FitProblem, restarts: int = 5, seed: int = 0, jitter: float = 0.2) -> FitResult:
    """Minimize chi-square from ``restarts`` starting points.

    The first start is the problem's initial guess; the others add uniform
    jitter of +-``jitter`` box widths, drawn from ``seed``. ``converged`` is
    set when at least two restarts reach the best objective to within
    ``CONVERGENCE_SPREAD``; ``FitResult.restarts_agree`` is the stricter
    all-restarts test.
    """
    objective = _Objective(problem)
    lo, hi = problem.lower, problem.upper
    runs = []
    for x0 in start_points(problem, restarts, seed, jitter):
        x, fx = minimize_box(objective, x0, lo, hi)
        runs.append((fx, x))
    finite = [r for r in runs if np.isfinite(r[0])]
    if not finite:
        raise FitError("every restart diverged (non-finite objective)")
    f_best, x_best = min(finite, key=lambda r: r[0])
    # The optimum counts as converged once two independent restarts reproduce it;
    # restarts trapped in a secondary basin are reported, not treated as failure.
    n_at_best = sum(1 for fx, _ in finite if fx - f_best < CONVERGENCE_SPREAD)
    return FitResult(
        best=dict(zip(problem.names, map(float, x_best))),
        objective=float(f_best),
        intervals={},
        n_evals=objective.n_evals,
        converged=n_at_best >= min(2, len(runs)),
        restart_objectives=[float(r[0]) for r in runs],
    )


# --- profile likelihood ------------------------------------------------------------------

def profile_bounds(f: Callable[[np.ndarray], float], x_best, f_best: float, index: int,
                   lower, upper, delta: float = 1.0, rel_tol: float = 1e-3) -> tuple[float, float]:
    """Offsets from ``x_best[index]`` to where the profile of ``f`` rises by ``delta``.

    Nuisance coordinates are re-minimized at every probe, warm-started from
    the previous probe. An offset stops at the box edge if the threshold is
    never reached.
    """
    x_best = np.asarray(x_best, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    others = [k for k in range(len(x_best)) if k != index]
    target = f_best + delta
    width = upper[index] - lower[index]

    def profile(v, nuisance):
        if not others:
            x = x_best.copy()
            x[index] = v
            return f(x), nuisance

        def g(y):
            x = np.empty_like(x_best)
            x[index] = v
            x[others] = y
            return f(x)

        y, fy = minimize_box(g, nuisance, lower[others], upper[others], polish=2)
        return fy, y

    offsets = []
    for direction, edge in ((-1.0, lower[index]), (1.0, upper[index])):
        room = abs(edge - x_best[index])
        if room == 0.0:
            offsets.append(0.0)
            continue
        nuisance = x_best[others]
        inside, step = 0.0, min(0.01 * width, room)
        outside = None
        while True:
            trial = min(inside + step, room)
            value, y = profile(x_best[index] + direction * trial, nuisance)
            if value > target:
                outside = trial
                break
            inside, nuisance = trial, y
            if trial >= room:
                break
            step *= 2.0
        if outside is None:
            offsets.append(room)
            continue
        while outside - inside > rel_tol * max(outside, 1e-12 * width):
            mid = 0.5 * (inside + outside)
            value, y = profile(x_best[index] + direction * mid, nuisance)
            if value > target:
                outside = mid
            else:
                inside, nuisance = mid, y
        offsets.append(0.5 * (inside + outside))
    return offsets[0], offsets[1]


def profile_interval(problem: FitProblem, result: FitResult, name: str,
                     delta: float = 1.0) -> tuple[float, float]:
    """Asymmetric ``(minus, plus)`` offsets for one parameter at delta chi^2 = ``delta``."""
    if not result.converged:
        raise FitError("profile requires a converged fit")
    if name not in problem.names:
        raise ValueError(f"{name!r} is not a free parameter")
    objective = _Objective(problem)
    x_best = np.array([result.best[n] for n in problem.names])
    interval = profile_bounds(objective, x_best, result.objective, problem.names.index(name),
                              problem.lower, problem.upper, delta)
    result.intervals[name] = interval
    result.n_evals += objective.n_evals
    return interval


def fit_with_intervals(problem: FitProblem, restarts: int = 5, seed: int = 0) -> FitResult:
    result = fit(problem, restarts=restarts, seed=seed)
    if result.converged:
        for name in problem.names:
            profile_interval(problem, result, name)
    return result


# --- synthetic data -------------------------------------------------------------------------

def synth_dataset(channel, powers, params: dict[str, float] | None = None, noise_sd: float = 0.0,
                  seed: int = 0, rates: RateSet | None = None, timing: TimingConfig | None = None,
                  tie_excitation_sics: bool = False) -> list[Observation]:
    """Normalized PL rows for both spin initializations, with seeded Gaussian noise.

    Zero-power rows are the normalization anchor and stay exactly 1. Rows
    carry ``sigma = noise_sd`` when noise is added.
    """
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    rates = rates or RateSet.defaults()
    probe = FitProblem([Observation(str(getattr(channel, "value", channel)), 0.0, True, 1.0)],
                       [FreeParam("k_sics", 0.0, 1.0, 0.0)], rates, timing or TimingConfig(),
                       tie_excitation_sics=tie_excitation_sics)
    sim_rates = rates_for(params or {}, probe)
    powers = np.asarray(powers, dtype=float)
    rng = np.random.default_rng(seed)
    sigma = noise_sd if noise_sd > 0 else None
    rows = []
    pair = normalized_pl_pair(probe.channel, powers, sim_rates, probe.timing)
    for flag, clean in zip((True, False), pair):
        noisy = clean + rng.normal(0.0, noise_sd, clean.shape) if noise_sd > 0 else clean
        noisy = np.where(powers == 0, 1.0, noisy)
        rows += [Observation(probe.channel, float(p), flag, float(v), sigma) for p, v in zip(powers, noisy)]
    return rows


def pnp_dataset(rows: Sequence[Observation]) -> list[Observation]:
    """Pair PL rows at equal power into PNP-ratio rows, propagating sigma."""
    pi = {r.power_mw: r for r in rows if r.with_pi}
    nopi = {r.power_mw: r for r in rows if r.with_pi is False}
    out = []
    for power in sorted(set(pi) & set(nopi)):
        a, b = pi[power], nopi[power]
        ratio = a.value / b.value
        sigma = None
        if a.sigma is not None and b.sigma is not None:
            sigma = ratio * float(np.hypot(a.sigma / a.value, b.sigma / b.value)) if power > 0 else None
        out.append(Observation(a.channel, power, None, ratio, sigma))
    return out


# --- preset scenarios ------------------------------------------------------------------------

_SICS_SCALING = (FreeParam("k_sics", 0.0, 100.0, 10.0), FreeParam("power_scaling", 0.01, 1.0, 0.2))
_CONTROL = (FreeParam("k_sics", 0.0, 50.0, 1.0), FreeParam("k_i", 0.0, 100.0, 43.0),
            FreeParam("k_r", 0.0, 50.0, 17.75))

SCENARIOS: dict[str, dict] = {
    "green": {"channel": "GreenFilter", "free": _SICS_SCALING, "tie_excitation_sics": True},
    "blue": {"channel": "BlueFilter", "free": _SICS_SCALING, "tie_excitation_sics": False},
    "red": {"channel": "RedFilter", "tie_excitation_sics": False,
            "free": (FreeParam("k_sics", 0.0, 50.0, 1.0), FreeParam("k_e_minus", 0.0, 135.0, 60.0),
                     FreeParam("k_i", 0.0, 100.0, 43.0), FreeParam("k_r", 0.0, 50.0, 17.75))},
    "longred": {"channel": "LongRedFilter", "free": _CONTROL, "tie_excitation_sics": False},
    "nir": {"channel": "NIR", "free": _CONTROL, "tie_excitation_sics": False},
}

_SCENARIO_BY_CHANNEL = {v["channel"]: k for k, v in SCENARIOS.items()}


def scenario_for_channel(channel: str) -> str:
    try:
        return _SCENARIO_BY_CHANNEL[channel]
    except KeyError:
        raise ValueError(f"no preset fit scenario for channel {channel!r}") from None


def scenario_problem(name: str, dataset: list[Observation], rates: RateSet | None = None,
                     timing: TimingConfig | None = None, observable: str = "pl") -> FitProblem:
    scenario = SCENARIOS[name]
    rates = rates or RateSet.defaults()
    if name == "red":
        # Scaling for the red filter is held at the green value.
        rates = rates.with_channel("RedFilter", power_scaling=0.11)
    return FitProblem(list(dataset), list(scenario["free"]), rates, timing or TimingConfig(),
                      observable=observable, tie_excitation_sics=scenario["tie_excitation_sics"])


# --- I/O --------------------------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no"):
        return False
    raise ValueError(f"bad with_pi value {text!r}")


def dataset_to_csv(rows: Sequence[Observation]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DATASET_HEADER)
    for r in rows:
        with_pi = "" if r.with_pi is None else int(r.with_pi)
        writer.writerow([r.channel, fmt(r.power_mw), with_pi, fmt(r.value),
                         "" if r.sigma is None else fmt(r.sigma)])
    return buf.getvalue()


def dataset_from_csv(text: str) -> list[Observation]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = tuple(h.strip() for h in next(reader))
    except StopIteration:
        raise ValueError("dataset CSV is empty") from None
    if header != DATASET_HEADER:
        raise ValueError(f"dataset header must be {','.join(DATASET_HEADER)}, got {','.join(header)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(DATASET_HEADER):
            raise ValueError(f"line {lineno}: expected {len(DATASET_HEADER)} fields")
        channel, power, with_pi, value, sigma = (x.strip() for x in rec)
        s = float(sigma) if sigma else None
        if s is not None and not s > 0:
            raise ValueError(f"line {lineno}: sigma must be > 0")
        rows.append(Observation(channel, float(power), _parse_bool(with_pi) if with_pi else None,
                                float(value), s))
    return rows


def result_to_dict(result: FitResult) -> dict:
    params = {}
    for name, value in result.best.items():
        minus, plus = result.intervals.get(name, (None, None))
        params[name] = {"value": value, "minus": minus, "plus": plus}
    return {"params": params, "objective": result.objective,
            "converged": result.converged, "n_evals": result.n_evals}


def result_from_dict(data: dict) -> FitResult:
    best = {k: float(v["value"]) for k, v in data["params"].items()}
    intervals = {k: (float(v["minus"]), float(v["plus"])) for k, v in data["params"].items()
                 if v.get("minus") is not None}
    return FitResult(best, float(data["objective"]), intervals, int(data["n_evals"]), bool(data["converged"]))


def problem_to_dict(problem: FitProblem) -> dict:
    return {
        "free_params": [dataclasses.asdict(p) for p in problem.free_params],
        "observable": problem.observable,
        "tie_excitation_sics": problem.tie_excitation_sics,
        "rates": rates_to_dict(problem.fixed_rates),
        "timing": timing_to_dict(problem.timing),
        "dataset": [dataclasses.asdict(r) for r in problem.dataset],
    }


def problem_from_dict(data: dict, dataset: list[Observation] | None = None) -> FitProblem:
    """Build a FitProblem from JSON; an explicit ``dataset`` overrides the embedded one."""
    known = {"free_params", "observable", "tie_excitation_sics", "rates", "timing", "dataset"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown problem keys: {sorted(unknown)}")
    if dataset is None:
        dataset = [Observation(**row) for row in data.get("dataset", [])]
    return FitProblem(
        dataset=list(dataset),
        free_params=[FreeParam(**p) for p in data["free_params"]],
        fixed_rates=rates_from_dict(data["rates"]) if "rates" in data else RateSet.defaults(),
        timing=timing_from_dict(data["timing"]) if "timing" in data else TimingConfig(),
        observable=data.get("observable", "pl"),
        tie_excitation_sics=bool(data.get("tie_excitation_sics", False)),
    )


def problem_to_json(problem: FitProblem) -> str:
    return json.dumps(problem_to_dict(problem), indent=2)
