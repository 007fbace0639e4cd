"""Closed-form and semi-analytic reference values.

* the two-phase birth-dependent model, whose total populations obey a
  switched 2x2 linear ODE;
* the eigenvalue equation for a time-constant division rate;
* the renewal formulation: the growth rate is the ``lambda`` at which the
  one-period birth operator has spectral radius 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from .model_core import Grid, One, SquareWave, Tabulated, as_fraction, check_period

LOG2 = math.log(2.0)


class NoRootError(ValueError):
    """The eigenvalue equation has no sign change on the search interval."""


class RenewalNotConverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# 2x2 exponentials


class Matrix2(NamedTuple):
    a: float
    b: float
    c: float
    d: float

    @classmethod
    def from_array(cls, m) -> "Matrix2":
        m = np.asarray(m, dtype=float)
        return cls(float(m[0, 0]), float(m[0, 1]), float(m[1, 0]), float(m[1, 1]))

    def to_array(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.c, self.d]])

    def __matmul__(self, o: "Matrix2") -> "Matrix2":
        return Matrix2(self.a * o.a + self.b * o.c, self.a * o.b + self.b * o.d,
                       self.c * o.a + self.d * o.c, self.c * o.b + self.d * o.d)


def _ch_sh(delta: float) -> Tuple[float, float]:
    """``cosh(sqrt(delta))`` and ``sinh(sqrt(delta))/sqrt(delta)`` by series (|delta| <= 1)."""
    ch, sh, term_c, term_s = 1.0, 1.0, 1.0, 1.0
    for k in range(1, 30):
        term_c *= delta / ((2 * k - 1) * (2 * k))
        term_s *= delta / ((2 * k) * (2 * k + 1))
        ch += term_c
        sh += term_s
        if abs(term_c) < 1e-18 * abs(ch) and abs(term_s) < 1e-18 * abs(sh):
            break
    return ch, sh


def expm2(M, s: float = 1.0) -> Matrix2:
    """``exp(s * M)`` for a real 2x2 matrix in closed form.

    Writing ``A = s M = m I + N`` with ``m = tr(A)/2`` and ``N^2 = delta I``:
    distinct real eigenvalues use Sylvester's formula (exact on triangular
    matrices), a complex pair uses cos/sin, and nearly equal eigenvalues
    (including the defective case) use the power series of cosh and sinh.
    """
    M = M if isinstance(M, Matrix2) else Matrix2.from_array(M)
    p, q, r, t = (s * v for v in M)
    if not all(math.isfinite(v) for v in (p, q, r, t)):
        raise ValueError("non-finite matrix entry")
    m = 0.5 * (p + t)
    h = 0.5 * (p - t)
    delta = h * h + q * r
    if delta > 1.0:
        # eigenvalues without cancellation: big one by sum, small one from det
        root = math.sqrt(delta)
        l1 = m + root if m >= 0 else m - root
        det = p * t - q * r
        l2 = det / l1 if l1 != 0 else m - root
        if l1 < l2:
            l1, l2 = l2, l1
        e1, e2 = math.exp(l1), math.exp(l2)
        w = l1 - l2
        # exp(A) = (e1 (A - l2 I) - e2 (A - l1 I)) / (l1 - l2)
        return Matrix2((e1 * (p - l2) - e2 * (p - l1)) / w, (e1 - e2) * q / w,
                       (e1 - e2) * r / w, (e1 * (t - l2) - e2 * (t - l1)) / w)
    if delta < -1.0:
        om = math.sqrt(-delta)
        em = math.exp(m)
        ch, sh = math.cos(om), math.sin(om) / om
    else:
        em = math.exp(m)
        ch, sh = _ch_sh(delta)
    return Matrix2(em * (ch + sh * h), em * sh * q, em * sh * r, em * (ch - sh * h))


def perron_root(P: Matrix2) -> float:
    """Spectral radius of an entrywise nonnegative 2x2 matrix."""
    h = 0.5 * (P.a - P.d)
    return 0.5 * (P.a + P.d) + math.sqrt(h * h + P.b * P.c)


# ---------------------------------------------------------------------------
# two-phase birth-dependent model


@dataclass(frozen=True)
class TwoPhaseRates:
    """Division rates of a model where the rate depends on the birth phase.

    Cells born in ``[0, alpha)`` (phase 1) divide at rate ``a1`` during
    ``[0, alpha)`` and ``b1`` during ``[alpha, 1)``; cells born in phase 2
    divide at ``a2`` and ``b2``.  Period 1.
    """

    alpha: float
    a1: float
    a2: float
    b1: float
    b2: float

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        for name in ("a1", "a2", "b1", "b2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")

    @property
    def M_a(self) -> Matrix2:
        return Matrix2(self.a1, 2 * self.a2, 0.0, -self.a2)

    @property
    def M_b(self) -> Matrix2:
        return Matrix2(-self.b1, 0.0, 2 * self.b1, self.b2)

    def monodromy(self) -> Matrix2:
        return expm2(self.M_b, 1 - self.alpha) @ expm2(self.M_a, self.alpha)


def counterexample_lambda(r: TwoPhaseRates) -> float:
    """Growth rate of the two-phase model: log of the Perron root of the monodromy."""
    return math.log(perron_root(r.monodromy()))


class Surface(NamedTuple):
    b1: np.ndarray
    b2: np.ndarray
    lam: np.ndarray  # lam[i, j] at (b1[i], b2[j])

    def decreasing_in_b1(self) -> np.ndarray:
        """Per b2 column: is lambda strictly decreasing along b1."""
        return np.all(np.diff(self.lam, axis=0) < 0, axis=0)

    def b1_slope_signs(self) -> np.ndarray:
        return np.sign(np.diff(self.lam, axis=0))

    def max_neighbor_jump(self) -> float:
        return float(max(np.abs(np.diff(self.lam, axis=0)).max(initial=0.0),
                         np.abs(np.diff(self.lam, axis=1)).max(initial=0.0)))


def counterexample_surface(a1: float, a2: float, b1_range=(0.0, 5.0), b2_range=(0.0, 5.0),
                           resolution: int = 51, alpha: float = 0.5) -> Surface:
    """Sample the two-phase growth rate over a ``(b1, b2)`` grid."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    b1 = np.linspace(*b1_range, resolution)
    b2 = np.linspace(*b2_range, resolution)
    lam = np.array([[counterexample_lambda(TwoPhaseRates(alpha, a1, a2, x, y)) for y in b2] for x in b1])
    return Surface(b1, b2, lam)


class OdeTrajectory(NamedTuple):
    times: np.ndarray  # phase switch times 0, alpha, 1, 1 + alpha, ...
    P: np.ndarray  # normalised state at those times, shape (len(times), 2)
    log_scale: np.ndarray  # log of the normalisation carried so far

    def growth_rate(self) -> float:
        """Log-growth of ``P1 + P2`` over the last period."""
        tot = np.log(self.P.sum(axis=1)) + self.log_scale
        return float(tot[-1] - tot[-3])


def aggregated_ode_simulate(r: TwoPhaseRates, periods: int, P0: Sequence[float] = (1.0, 1.0)) -> OdeTrajectory:
    """Evolve the total populations of both birth phases phase by phase."""
    if periods < 1:
        raise ValueError("periods must be >= 1")
    Ea, Eb = expm2(r.M_a, r.alpha), expm2(r.M_b, 1 - r.alpha)
    x = np.array(P0, dtype=float)
    if np.any(x < 0) or not x.sum() > 0:
        raise ValueError("initial populations must be nonnegative and not both zero")
    times, states, scales = [0.0], [x.copy()], [0.0]
    scale = 0.0
    for k in range(periods):
        for E, t in ((Ea, k + r.alpha), (Eb, k + 1.0)):
            x = E.to_array() @ x
            s = x.sum()
            x /= s
            scale += math.log(s)
            times.append(t)
            states.append(x.copy())
            scales.append(scale)
    return OdeTrajectory(np.array(times), np.array(states), np.array(scales))


class _PhaseAbsorption:
    """Per-step absorption of :class:`BirthPhaseKernel` (birth phase from the cell's node)."""

    def __init__(self, kernel: "BirthPhaseKernel", grid: Grid):
        check_period(kernel, grid)
        M = grid.steps_per_period
        j_alpha = as_fraction(kernel.rates.alpha) * M
        if j_alpha.denominator != 1:
            raise ValueError("alpha * steps_per_period must be an integer")
        self.grid = grid
        self.M = M
        self.j_alpha = int(j_alpha)
        self.h = grid.dx
        ages = np.arange(grid.n_ages)
        self._ages = ages
        r = kernel.rates
        self._day = np.array([r.a1, r.a2])
        self._night = np.array([r.b1, r.b2])

    def absorption(self, m: int) -> np.ndarray:
        birth = (m - self._ages) % self.M
        cls = (birth >= self.j_alpha).astype(int)  # 0: born in phase 1
        rate = self._day[cls] if (m % self.M) < self.j_alpha else self._night[cls]
        return rate * self.h

    def factor_key(self, m: int) -> int:
        return m % self.M


class BirthPhaseKernel:
    """``K(t, x) = chi_1(t - x) K_1(t) + chi_2(t - x) K_2(t)``, no majority age.

    ``K_1 = a1`` by day and ``b1`` by night, ``K_2 = a2`` by day and ``b2``
    by night, with day ``[0, alpha)`` and period 1.
    """

    a = 0.0

    def __init__(self, rates: TwoPhaseRates):
        self.rates = rates
        self._day = SquareWave(as_fraction(rates.alpha), 1)

    period = 1.0

    def __repr__(self):
        return f"BirthPhaseKernel({self.rates!r})"

    def _rates_for(self, birth: float) -> Tuple[float, float]:
        r = self.rates
        if self._day.value(birth) > 0:
            return r.a1, r.b1
        return r.a2, r.b2

    def __call__(self, t, x):
        if np.ndim(t) or np.ndim(x):
            return np.vectorize(self.__call__)(t, x)
        day_rate, night_rate = self._rates_for(t - x)
        return day_rate if self._day.value(t) > 0 else night_rate

    def char_integral(self, t0: float, x0: float, duration: float) -> float:
        if duration < 0:
            raise ValueError("negative duration")
        day_rate, night_rate = self._rates_for(t0 - x0)
        day = self._day.cumulative(t0 + duration) - self._day.cumulative(t0)
        return float(day_rate * day + night_rate * (duration - day))

    def survival_integral(self, v: float, t: float) -> float:
        if v > t:
            raise ValueError(f"birth time v={v} after t={t}")
        return self.char_integral(v, 0.0, t - v)

    def discretize(self, grid: Grid) -> _PhaseAbsorption:
        return _PhaseAbsorption(self, grid)

    def scaled(self, factor: float) -> "BirthPhaseKernel":
        r = self.rates
        return BirthPhaseKernel(TwoPhaseRates(r.alpha, r.a1 * factor, r.a2 * factor,
                                              r.b1 * factor, r.b2 * factor))


# ---------------------------------------------------------------------------
# constant psi


def _age_pieces(B, a: float):
    """Constant pieces ``(x0, x1, b)`` of B on ``[a, inf)``; the last has x1 = inf."""
    if isinstance(B, One):
        return [(a, math.inf, 1.0)]
    if isinstance(B, Tabulated):
        out = []
        h = B.spacing
        n = B.samples.size
        for k in range(n):
            x0, x1 = k * h, (k + 1) * h if k < n - 1 else math.inf
            if x1 <= a:
                continue
            out.append((max(x0, a), x1, float(B.samples[k])))
        return out
    raise TypeError(f"unsupported age modulation {B!r}")


def constant_psi_equation(mu: float, kappa_alpha: float, B, a: float) -> float:
    """``2 int_a^inf ka B(x) exp(-mu x - ka int_a^x B) dx - 1``, integrated piece by piece."""
    total = 0.0
    C = 0.0  # ka * int_a^{x0} B
    for x0, x1, b in _age_pieces(B, a):
        rate = mu + kappa_alpha * b
        head = 2 * kappa_alpha * b * math.exp(-mu * x0 - C)
        if math.isinf(x1):
            total += head / rate
        else:
            total += head * -math.expm1(-rate * (x1 - x0)) / rate
            C += kappa_alpha * b * (x1 - x0)
    return total - 1.0


def constant_psi_lambda(kappa_alpha: float, B=One(), a: float = 1.0, tol: float = 1e-12) -> float:
    """Growth rate for a time-constant division rate ``kappa_alpha * B(x) 1[x >= a]``.

    Root of :func:`constant_psi_equation` on ``(0, log2/a]``.  With ``B = 1``
    the equation is ``2 ka exp(-mu a) = mu + ka``.
    """
    if not kappa_alpha > 0:
        raise ValueError("kappa_alpha must be positive")
    F = lambda mu: constant_psi_equation(mu, kappa_alpha, B, a)  # noqa: E731
    hi = LOG2 / a if a > 0 else 1.0
    while a == 0 and F(hi) > 0:
        hi *= 2
        if hi > 1e12:
            break
    lo = 0.0
    f_lo, f_hi = F(lo), F(hi)
    if f_hi == 0:
        return hi
    if not (f_lo > 0 > f_hi):
        raise NoRootError(f"no sign change on [0, {hi}]: F(0)={f_lo}, F(hi)={f_hi}")
    return brentq(F, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500)


# ---------------------------------------------------------------------------
# renewal operator


class RenewalMatrix(NamedTuple):
    blocks: np.ndarray  # blocks[q, d]: probability that a cohort born at t_q divides at age cell d
    discount_ages: np.ndarray  # age at which each cell's divisions are discounted (cell midpoints)
    tail_ratio: np.ndarray  # per cohort, survival ratio over one period beyond the last block
    tail_start: int  # first cell of the repeating block
    Q: int
    T: float


def _renewal_blocks(k, Q: int) -> RenewalMatrix:
    T = k.period if k.period is not None else 1.0
    h = T / Q
    stat_age = max(k.a, float(getattr(getattr(k, "B", None), "constant_from", 0.0)))
    d0 = math.ceil(stat_age / h - 1e-9) + 1
    D = d0 + Q
    grid = Grid(h, D * h, Q)
    disc = k.discretize(grid)
    A = np.stack([disc.absorption(m) for m in range(Q)])  # A[m, age cell]
    q = np.arange(Q)[:, None]
    d = np.arange(D)[None, :]
    H = np.cumsum(A[(q + d) % Q, d], axis=1)
    H = np.concatenate([np.zeros((Q, 1)), H], axis=1)  # H[q, d]: hazard up to age d*h
    S = np.exp(-H)
    blocks = S[:, :-1] - S[:, 1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(S[:, d0] > 0, S[:, D] / S[:, d0], 0.0)
    return RenewalMatrix(blocks, (np.arange(D) + 0.5) * h, ratio, d0, Q, T)


def _renewal_operator(R: RenewalMatrix, lam: float) -> np.ndarray:
    """Matrix ``L[p, q]`` of births in cell ``p`` caused by a unit cohort born at ``t_q``."""
    Q = R.Q
    w = 2.0 * R.blocks * np.exp(-lam * R.discount_ages)[None, :]
    geo = R.tail_ratio * math.exp(-lam * R.T)
    tail = w[:, R.tail_start:]
    diverges = (geo >= 1) & (tail.sum(axis=1) > 0)
    if np.any(diverges):
        raise ValueError("renewal series diverges: no division over a full period and lambda <= 0")
    # cohorts with geo >= 1 have no divisions left, so their tail is zero anyway
    g = np.where(geo < 1, geo, 0.0)
    tail *= (1.0 / (1.0 - g))[:, None]
    D = w.shape[1]
    n_blocks = -(-D // Q)
    W = np.zeros((Q, n_blocks * Q))
    W[:, :D] = w
    W = W.reshape(Q, n_blocks, Q).sum(axis=1)  # W[q, r]: divisions r cells (mod Q) after birth
    q = np.arange(Q)[:, None]
    r = np.arange(Q)[None, :]
    L = np.zeros((Q, Q))
    L[(q + r) % Q, q] = W
    return L


def spectral_radius(L: np.ndarray, tol: float = 1e-13, max_iter: int = 200_000) -> float:
    """Perron root of a nonnegative matrix by power iteration on ``L + I``.

    The shift makes the Perron root strictly dominant even for periodic
    (imprimitive) matrices, which arise from square-wave modulations.
    """
    n = L.shape[0]
    v = np.full(n, 1.0 / n)
    est = 0.0
    for _ in range(max_iter):
        w = L @ v + v
        s = w.sum()
        if not s > 0:
            return 0.0
        w /= s
        new = s - 1.0
        if abs(new - est) <= tol * max(1.0, abs(new)) and np.abs(w - v).sum() <= tol * 10:
            return float(new)
        est, v = new, w
    raise RenewalNotConverged(f"power iteration did not converge in {max_iter} iterations")


def renewal_rho(k, lam: float, time_nodes: int = 400) -> float:
    """Spectral radius of the discounted one-period birth operator.

    Births at time ``t`` are ``2 int K(t, x) B(t - x) e^{-lam x} S(t - x, x) dx``
    where ``S`` is the survival of a cohort and ``B`` the periodic birth
    profile.  The age integral is resolved cell by cell: the probability of
    dividing in age cell ``d`` is computed exactly from the cumulative
    hazard, discounted at the cell midpoint.  Beyond the age at which the
    kernel becomes age-independent, whole periods repeat with a fixed
    survival ratio and are summed as a geometric series, so no truncation of
    the age integral is needed.
    """
    if time_nodes < 16:
        raise ValueError("time_nodes must be >= 16")
    R = _renewal_blocks(k, int(time_nodes))
    return spectral_radius(_renewal_operator(R, lam))


def renewal_lambda(k, time_nodes: int = 400, tol: float = 1e-10) -> float:
    """Growth rate as the root of ``renewal_rho(lambda) = 1``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    R = _renewal_blocks(k, int(time_nodes))
    f = lambda lam: spectral_radius(_renewal_operator(R, lam)) - 1.0  # noqa: E731
    lo = 1e-8
    hi = LOG2 / k.a if k.a > 0 else 1.0
    while f(hi) > 0:
        hi *= 1.5
        if hi > 1e6:
            raise NoRootError("rho stays above 1")
    if f(lo) <= 0:
        raise NoRootError("rho(0+) <= 1: population does not grow")
    return brentq(f, lo, hi, xtol=tol, maxiter=500)
