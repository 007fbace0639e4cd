"""Division-rate model family, discretisation grids and density fields.

The division rate is ``K(t, x) = kappa * psi(t) * B(x) * 1[x >= a]`` where
``psi`` is a periodic time modulation and ``B`` an age modulation.  Times and
ages share one unit; the characteristic scheme in :mod:`pde_solver` uses
``dt = dx`` so that transport is an exact index shift.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

Number = Union[int, float, Fraction, str]

# Floats within this relative distance of a simple rational are read as it.
_SNAP_RTOL = 1e-12
_SNAP_DENOMINATOR = 10**9


def as_fraction(x: Number) -> Fraction:
    """Exact rational value of ``x``.

    Floats are snapped to the simplest nearby rational (denominator at most
    1e9) when one lies within 1e-12 relative distance, so that ``0.22`` is
    read as ``11/50`` rather than its binary expansion.  Other floats are
    converted exactly.
    """
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    if isinstance(x, str):
        return Fraction(x.strip())
    xf = float(x)
    if not math.isfinite(xf):
        raise ValueError(f"non-finite value {x!r}")
    snapped = Fraction(xf).limit_denominator(_SNAP_DENOMINATOR)
    if abs(float(snapped) - xf) <= _SNAP_RTOL * max(1.0, abs(xf)):
        return snapped
    return Fraction(xf)


# ---------------------------------------------------------------------------
# time modulations


@dataclass(frozen=True)
class Constant:
    """psi(t) = level for all t."""

    level: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.level) and self.level >= 0):
            raise ValueError("constant level must be finite and >= 0")

    period = None

    def value(self, t):
        if np.ndim(t):
            return np.full(np.shape(t), float(self.level))
        return float(self.level)

    def cumulative(self, t):
        """Integral of psi over [0, t]."""
        if isinstance(t, Fraction):
            return as_fraction(self.level) * t
        return float(self.level) * np.asarray(t, dtype=float) if np.ndim(t) else float(self.level) * float(t)

    def breakpoints(self, t0: float, t1: float) -> list:
        return []

    @property
    def minimum(self) -> float:
        return float(self.level)

    @property
    def maximum(self) -> float:
        return float(self.level)

    def to_dict(self) -> dict:
        return {"type": "constant", "level": self.level}


@dataclass(frozen=True)
class SquareWave:
    """Day/night switch: 1 on [0, tau) and 0 on [tau, period), repeated."""

    tau: Fraction
    period: Fraction = Fraction(1)
    epsilon: float = 0.0

    def __init__(self, tau: Number, period: Number = 1, epsilon: float = 0.0):
        tau_f, period_f = as_fraction(tau), as_fraction(period)
        if not 0 < tau_f < period_f:
            raise ValueError(f"need 0 < tau < period, got tau={tau}, period={period}")
        if not (math.isfinite(epsilon) and epsilon >= 0):
            raise ValueError("epsilon must be finite and >= 0")
        object.__setattr__(self, "tau", tau_f)
        object.__setattr__(self, "period", period_f)
        object.__setattr__(self, "epsilon", float(epsilon))

    def _phase(self, t) -> Fraction:
        return as_fraction(t) % self.period

    def value(self, t):
        if np.ndim(t):
            t = np.asarray(t, dtype=float)
            T, tau = float(self.period), float(self.tau)
            phase = t - T * np.floor(t / T)
            return np.where(phase < tau, 1.0, 0.0) + self.epsilon
        return (1.0 if self._phase(t) < self.tau else 0.0) + self.epsilon

    def cumulative(self, t):
        """Integral of psi over [0, t]; exact for Fraction input."""
        if isinstance(t, Fraction):
            n = math.floor(t / self.period)
            r = t - n * self.period
            return n * self.tau + min(r, self.tau) + as_fraction(self.epsilon) * t
        t = np.asarray(t, dtype=float)
        T, tau = float(self.period), float(self.tau)
        n = np.floor(t / T)
        out = n * tau + np.minimum(t - n * T, tau) + self.epsilon * t
        return out if out.ndim else float(out)

    def breakpoints(self, t0: float, t1: float) -> list:
        T, tau = float(self.period), float(self.tau)
        pts = []
        n = math.floor(t0 / T)
        while n * T <= t1:
            for p in (n * T, n * T + tau):
                if t0 < p < t1:
                    pts.append(p)
            n += 1
        return pts

    @property
    def minimum(self) -> float:
        return self.epsilon

    @property
    def maximum(self) -> float:
        return 1.0 + self.epsilon

    def to_dict(self) -> dict:
        d = {"type": "square", "tau": str(self.tau), "period": str(self.period)}
        if self.epsilon:
            d = {"type": "shifted_square", "tau": str(self.tau), "period": str(self.period),
                 "epsilon": self.epsilon}
        return d


def ShiftedSquareWave(tau: Number, period: Number = 1, epsilon: float = 0.0) -> SquareWave:
    """Square wave lifted by ``epsilon`` everywhere, so that it never vanishes."""
    return SquareWave(tau, period, epsilon)


TimeModulation = Union[Constant, SquareWave]


# ---------------------------------------------------------------------------
# age modulations


@dataclass(frozen=True)
class One:
    """B(x) = 1."""

    nondecreasing = True
    constant_from = 0.0

    def value(self, x):
        return np.ones(np.shape(x)) if np.ndim(x) else 1.0

    def cumulative(self, x):
        """Integral of B over [0, x]."""
        return np.asarray(x, dtype=float) if np.ndim(x) else float(x)

    def breakpoints(self, x0: float, x1: float) -> list:
        return []

    def to_dict(self) -> dict:
        return {"type": "one"}


@dataclass(frozen=True, eq=False)
class Tabulated:
    """Piecewise-constant B: ``samples[k]`` on ``[k*spacing, (k+1)*spacing)``.

    The last sample is extended to infinity.
    """

    samples: np.ndarray
    spacing: float
    nondecreasing: bool = False
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("samples must be a nonempty 1-d sequence")
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("age modulation must be bounded and strictly positive")
        if not (self.spacing > 0):
            raise ValueError("spacing must be positive")
        if self.nondecreasing and np.any(np.diff(s) < 0):
            raise ValueError("samples flagged nondecreasing but they decrease")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        cum = np.concatenate([[0.0], np.cumsum(s) * self.spacing])
        cum.setflags(write=False)
        object.__setattr__(self, "_cum", cum)

    @property
    def constant_from(self) -> float:
        return (self.samples.size - 1) * self.spacing

    def _index(self, x):
        k = np.floor(np.asarray(x, dtype=float) / self.spacing).astype(int)
        return np.clip(k, 0, self.samples.size - 1)

    def value(self, x):
        out = self.samples[self._index(x)]
        return out if np.ndim(x) else float(out)

    def cumulative(self, x):
        xa = np.maximum(np.asarray(x, dtype=float), 0.0)
        k = self._index(xa)
        out = self._cum[k] + self.samples[k] * (xa - k * self.spacing)
        return out if np.ndim(x) else float(out)

    def breakpoints(self, x0: float, x1: float) -> list:
        lo = max(1, math.floor(x0 / self.spacing))
        hi = min(self.samples.size - 1, math.ceil(x1 / self.spacing))
        return [k * self.spacing for k in range(lo, hi + 1) if x0 < k * self.spacing < x1]

    def to_dict(self) -> dict:
        return {"type": "tabulated", "samples": self.samples.tolist(),
                "nondecreasing": self.nondecreasing}


AgeModulation = Union[One, Tabulated]


# ---------------------------------------------------------------------------
# grid and densities


@dataclass(frozen=True)
class Grid:
    """Uniform age/time grid with ``dt = dx``.

    Age cell ``j`` covers ``[j*dx, (j+1)*dx)``; ``n_ages = x_max / dx`` cells.
    One period is ``steps_per_period`` steps.
    """

    dx: float
    x_max: float
    steps_per_period: int

    def __post_init__(self):
        if not self.dx > 0:
            raise ValueError("dx must be positive")
        if int(self.steps_per_period) != self.steps_per_period or self.steps_per_period < 1:
            raise ValueError("steps_per_period must be a positive integer")
        ratio = self.x_max / self.dx
        if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
            raise ValueError(f"x_max / dx must be a positive integer, got {ratio}")

    @classmethod
    def from_period(cls, period: Number, steps_per_period: int, x_max: Optional[float] = None,
                    a: float = 0.0) -> "Grid":
        """Grid with ``dx = period / steps_per_period``.

        ``x_max`` defaults to ``a + 3 * period`` rounded up to a grid node.
        """
        dx = float(as_fraction(period) / steps_per_period)
        if x_max is None:
            x_max = a + 3 * float(as_fraction(period))
        n = math.ceil(x_max / dx - 1e-9)
        return cls(dx, n * dx, int(steps_per_period))

    @property
    def n_ages(self) -> int:
        return int(round(self.x_max / self.dx))

    @property
    def period(self) -> float:
        return self.dx * self.steps_per_period

    @property
    def dx_exact(self) -> Fraction:
        return as_fraction(self.dx)

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.n_ages) * self.dx

    def snap(self, value: float):
        """Nearest node index, its position, and the snap distance."""
        j = int(round(value / self.dx))
        return j, j * self.dx, abs(j * self.dx - value)

    def to_dict(self) -> dict:
        return {"dx": self.dx, "x_max": self.x_max, "steps_per_period": self.steps_per_period}


@dataclass(frozen=True, eq=False)
class DensityField:
    """Nonnegative density on the age cells of a grid."""

    values: np.ndarray
    dx: float
    time: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("density must be 1-d")
        if not np.all(np.isfinite(v)):
            raise ValueError("density contains NaN or inf")
        if np.any(v < 0):
            raise ValueError("density must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def mass(self) -> float:
        return float(self.dx * self.values.sum())

    @classmethod
    def indicator(cls, grid: Grid, lo: float, hi: float, time: float = 0.0) -> "DensityField":
        x = grid.ages
        return cls(((x >= lo - 1e-12) & (x < hi - 1e-12)).astype(float), grid.dx, time)


# ---------------------------------------------------------------------------
# the kernel


class DivisionKernel:
    """``K(t, x) = kappa * psi(t) * B(x) * 1[x >= a]``."""

    def __init__(self, kappa: float, psi: TimeModulation = Constant(1.0),
                 B: AgeModulation = One(), a: float = 1.0):
        if not (math.isfinite(kappa) and kappa >= 0):
            raise ValueError("kappa must be finite and >= 0")
        if not a >= 0:
            raise ValueError("majority age must be >= 0")
        self.kappa = float(kappa)
        self.psi = psi
        self.B = B
        self.a = float(a)

    def __repr__(self):
        return f"DivisionKernel(kappa={self.kappa}, psi={self.psi!r}, B={self.B!r}, a={self.a})"

    @property
    def period(self) -> Optional[float]:
        return None if self.psi.period is None else float(self.psi.period)

    def scaled(self, factor: float) -> "DivisionKernel":
        return DivisionKernel(self.kappa * factor, self.psi, self.B, self.a)

    def __call__(self, t, x):
        if np.ndim(t) or np.ndim(x):
            x = np.asarray(x, dtype=float)
            return self.kappa * self.psi.value(t) * self.B.value(x) * (x >= self.a)
        if x < self.a:
            return 0.0
        return self.kappa * self.psi.value(t) * self.B.value(x)

    def char_integral(self, t0: float, x0: float, duration: float) -> float:
        """Integral of K along the characteristic through ``(t0, x0)``.

        Returns ``int_0^duration K(t0 + s, x0 + s) ds``, integrating the
        piecewise-constant integrand exactly between its breakpoints.
        """
        if duration < 0:
            raise ValueError("negative duration")
        start = t0 + max(0.0, self.a - x0)
        end = t0 + duration
        if end <= start or self.kappa == 0:
            return 0.0
        if isinstance(self.B, One):
            return self.kappa * (self.psi.cumulative(end) - self.psi.cumulative(start))
        shift = x0 - t0
        pts = sorted({start, end, *self.psi.breakpoints(start, end),
                      *(b - shift for b in self.B.breakpoints(start + shift, end + shift))})
        pts = np.array(pts)
        mid = 0.5 * (pts[1:] + pts[:-1])
        vals = self.psi.value(mid) * self.B.value(mid + shift)
        return float(self.kappa * np.sum(vals * np.diff(pts)))

    def survival_integral(self, v: float, t: float) -> float:
        """``int_v^t K(s, s - v) ds``: cumulative hazard of a cell born at ``v``."""
        if v > t:
            raise ValueError(f"birth time v={v} after t={t}")
        return self.char_integral(v, 0.0, t - v)

    def discretize(self, grid: Grid) -> "SeparableAbsorption":
        return SeparableAbsorption(self, grid)

    def to_dict(self) -> dict:
        return {"kappa": self.kappa, "psi": self.psi.to_dict(), "B": self.B.to_dict(), "a": self.a}


def eval_kernel(k, t: float, x: float) -> float:
    """Division rate at time ``t`` and age ``x``."""
    if t < 0 or x < 0:
        raise ValueError("t and x must be nonnegative")
    return k(t, x)


def survival_integral(k, v: float, t: float) -> float:
    return k.survival_integral(v, t)


def check_period(kernel, grid: Grid) -> None:
    T = kernel.period
    if T is not None and abs(T - grid.period) > 1e-9 * T:
        raise ValueError(f"grid period {grid.period} does not match kernel period {T}")


class SeparableAbsorption:
    """Per-step absorption ``int_0^dx K(t_m + s, x_j + s) ds`` on a grid.

    Exact for square-wave psi and cellwise-constant B.  A majority age that
    is not a grid node gives a fractional first fertile cell.
    """

    def __init__(self, kernel: DivisionKernel, grid: Grid):
        check_period(kernel, grid)
        self.grid = grid
        M = grid.steps_per_period
        h = grid.dx_exact
        psi = kernel.psi
        cum = [psi.cumulative(p * h) for p in range(M + 1)]
        self.time_weights = np.array([float((cum[p + 1] - cum[p]) / h) for p in range(M)])
        x = grid.ages
        lo = np.maximum(x, kernel.a)
        hi = x + grid.dx
        fertile = np.clip(kernel.B.cumulative(hi) - kernel.B.cumulative(lo), 0.0, None)
        fertile[hi <= kernel.a] = 0.0
        self.age_profile = kernel.kappa * fertile
        self.first_fertile = int(np.argmax(self.age_profile > 0)) if np.any(self.age_profile > 0) else grid.n_ages

    def absorption(self, m: int) -> np.ndarray:
        return self.time_weights[m % self.grid.steps_per_period] * self.age_profile

    def factor_key(self, m: int) -> float:
        """Steps with equal time weight share their absorption vector."""
        return float(self.time_weights[m % self.grid.steps_per_period])


# ---------------------------------------------------------------------------
# structural monotonicity condition


class MonotonicityReport(NamedTuple):
    holds: bool
    witness: Optional[tuple]  # (v, v_later, t) with hazard increasing in birth time


def hazard_table(kernel, grid: Grid, horizon: float) -> np.ndarray:
    """Cumulative hazards ``H[p, m] = int_{t_p}^{t_m} K(s, s - t_p) ds``.

    Entries with ``p > m`` are zero.  Built from diagonal sums of the per-step
    absorption, which matches :meth:`survival_integral` on grid times.
    """
    n = int(round(horizon / grid.dx))
    if n * grid.dx > grid.x_max:
        grid = Grid(grid.dx, (n + 1) * grid.dx, grid.steps_per_period)
    disc = kernel.discretize(grid)
    A = np.stack([disc.absorption(q)[:n] for q in range(n)])  # A[q, age index]
    H = np.zeros((n + 1, n + 1))
    for p in range(n):
        d = np.arange(n - p)
        H[p, p + 1:] = np.cumsum(A[p + d, d])
    return H


def check_monotonicity_condition(kernel, grid: Grid, horizon: float) -> MonotonicityReport:
    """Check that the survival probability to time t does not decrease when birth is delayed.

    Equivalently ``v -> int_v^t K(s, s - v) ds`` is nonincreasing on grid
    times ``0 <= v <= t <= horizon``.  The first violating triple is returned.
    """
    T = kernel.period or grid.period
    if horizon <= 0 or abs(horizon / T - round(horizon / T)) > 1e-9:
        raise ValueError("horizon must be a positive multiple of the period")
    H = hazard_table(kernel, grid, horizon)
    n = H.shape[0] - 1
    tol = 1e-12 * max(1.0, float(H.max()))
    for m in range(1, n + 1):
        col = H[: m + 1, m]
        bad = np.nonzero(np.diff(col) > tol)[0]
        if bad.size:
            p = int(bad[0])
            return MonotonicityReport(False, (p * grid.dx, (p + 1) * grid.dx, m * grid.dx))
    return MonotonicityReport(True, None)


# ---------------------------------------------------------------------------
# JSON model descriptor


def _strict(d: dict, allowed: Sequence[str], required: Sequence[str], where: str) -> None:
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ValueError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = [k for k in required if k not in d]
    if missing:
        raise ValueError(f"{where}: missing field(s) {missing}")


def parse_psi(d: dict) -> TimeModulation:
    kind = d.get("type") if isinstance(d, dict) else None
    if kind == "constant":
        _strict(d, ["type", "level"], ["type"], "psi")
        return Constant(float(d.get("level", 1.0)))
    if kind == "square":
        _strict(d, ["type", "tau", "period"], ["type", "tau"], "psi")
        return SquareWave(d["tau"], d.get("period", 1))
    if kind == "shifted_square":
        _strict(d, ["type", "tau", "period", "epsilon"], ["type", "tau", "epsilon"], "psi")
        return ShiftedSquareWave(d["tau"], d.get("period", 1), float(d["epsilon"]))
    raise ValueError(f"psi: unknown type {kind!r}")


def parse_B(d: dict, spacing: float) -> AgeModulation:
    kind = d.get("type") if isinstance(d, dict) else None
    if kind == "one":
        _strict(d, ["type"], ["type"], "B")
        return One()
    if kind == "tabulated":
        _strict(d, ["type", "samples", "nondecreasing"], ["type", "samples"], "B")
        return Tabulated(d["samples"], spacing, bool(d.get("nondecreasing", False)))
    raise ValueError(f"B: unknown type {kind!r}")


def load_model(d: dict):
    """Parse a model descriptor into ``(DivisionKernel, Grid)``.

    Descriptor layout::

        {"kappa": 50, "a": 0.22,
         "psi": {"type": "square", "tau": "3/5", "period": 1},
         "B": {"type": "one"},
         "grid": {"dx": 0.001, "x_max": 3.5, "steps_per_period": 1000}}

    Unknown fields are rejected at every level.
    """
    _strict(d, ["kappa", "psi", "B", "a", "grid"], ["kappa", "psi", "a", "grid"], "model")
    g = d["grid"]
    _strict(g, ["dx", "x_max", "steps_per_period"], ["dx", "steps_per_period"], "grid")
    psi = parse_psi(d["psi"])
    a = float(d["a"])
    dx = float(g["dx"])
    steps = int(g["steps_per_period"])
    if psi.period is not None and abs(float(psi.period) - dx * steps) > 1e-9 * float(psi.period):
        raise ValueError("grid: steps_per_period * dx must equal the psi period")
    x_max = g.get("x_max")
    grid = Grid.from_period(dx * steps if psi.period is None else psi.period, steps, x_max, a=a)
    B = parse_B(d.get("B", {"type": "one"}), grid.dx)
    return DivisionKernel(float(d["kappa"]), psi, B, a), grid
