"""Characteristic scheme for the periodic division equation and its Floquet eigenpair.

Scheme (``dt = dx = h``): over one step a cell of age ``x_j`` moves to
``x_{j+1}`` and survives with probability ``exp(-A_j)``, where ``A_j`` is the
exact integral of K along its characteristic over the step.  Every cell that
leaves by division contributes two newborns to the age-0 cell, so births
during a step equal twice the absorbed mass.  The scheme is linear, positive
for every kappa, and its mass balance is exact up to truncation at ``x_max``
(mass aged past ``x_max`` is counted in ``lost_mass``).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.sparse.linalg import ArpackError, LinearOperator, eigs

from .model_core import DensityField, Grid, check_period

log = logging.getLogger(__name__)

POWER_BUDGET = 100  # periods of plain power iteration before the Arnoldi fallback


class FloquetError(RuntimeError):
    pass


class NonConvergedError(FloquetError):
    """Power iteration hit ``max_iter``; carries the last estimates."""

    def __init__(self, max_iter: int, residual: float, lam: float):
        super().__init__(f"no convergence after {max_iter} periods (residual {residual:.3e})")
        self.max_iter = max_iter
        self.residual = residual
        self.lam = lam


class DegenerateError(FloquetError):
    pass


class _Stepper:
    """Precomputed survival/absorption factors and preallocated buffers."""

    def __init__(self, kernel, grid: Grid):
        check_period(kernel, grid)
        self.kernel = kernel
        self.grid = grid
        self.disc = kernel.discretize(grid)
        self._factors: dict = {}

    def factors(self, m: int):
        """``(exp(-A), 1 - exp(-A))`` for step ``m``."""
        keyf = getattr(self.disc, "factor_key", None)
        key = keyf(m) if keyf else m % self.grid.steps_per_period
        f = self._factors.get(key)
        if f is None:
            A = self.disc.absorption(m)
            f = (np.exp(-A), -np.expm1(-A))
            if len(self._factors) < 64:
                self._factors[key] = f
        return f

    def advance(self, n: np.ndarray, m: int, out: np.ndarray, factor: float = 2.0) -> float:
        """One step from time index ``m``; returns the mass aged past ``x_max``."""
        surv, absorbed = self.factors(m)
        births = factor * float(np.dot(n, absorbed))
        lost = self.grid.dx * n[-1] * surv[-1]
        np.multiply(n[:-1], surv[:-1], out=out[1:])
        out[0] = births
        return lost

    def advance_adjoint(self, phi: np.ndarray, m: int, out: np.ndarray) -> None:
        """Transpose of :meth:`advance` (adjoint step backward from ``m + 1`` to ``m``)."""
        surv, absorbed = self.factors(m)
        head = 2.0 * phi[0]
        np.multiply(surv[:-1], phi[1:], out=out[:-1])
        out[-1] = 0.0
        out += head * absorbed


def _time_index(grid: Grid, t: float) -> int:
    m = int(round(t / grid.dx))
    if abs(m * grid.dx - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"time {t} is not on the grid (dx={grid.dx})")
    return m


def _check_density(n: DensityField, grid: Grid) -> None:
    if n.values.shape != (grid.n_ages,):
        raise ValueError("density does not match the grid")
    if abs(n.dx - grid.dx) > 1e-15 * grid.dx:
        raise ValueError("density spacing differs from grid dx")


@dataclass(frozen=True, eq=False)
class Evolved(DensityField):
    """Density together with the cumulative mass lost past ``x_max``."""

    lost_mass: float = 0.0


def step(n: DensityField, k, grid: Grid, t: Optional[float] = None) -> Evolved:
    """Advance ``n`` by one time step ``dt = dx`` starting at time ``t``."""
    _check_density(n, grid)
    t = n.time if t is None else t
    m = _time_index(grid, t)
    out = np.empty(grid.n_ages)
    lost = _Stepper(k, grid).advance(n.values, m, out)
    prev = getattr(n, "lost_mass", 0.0)
    return Evolved(out, grid.dx, (m + 1) * grid.dx, prev + lost)


def evolve(n: DensityField, k, grid: Grid, n_steps: int, stepper: Optional[_Stepper] = None):
    """Run ``n_steps`` steps; returns the final field and the mass after every step.

    ``masses[0]`` is the initial mass.
    """
    _check_density(n, grid)
    st = stepper or _Stepper(k, grid)
    m0 = _time_index(grid, n.time)
    cur = np.array(n.values, dtype=float)
    nxt = np.empty_like(cur)
    masses = np.empty(n_steps + 1)
    masses[0] = grid.dx * cur.sum()
    lost = getattr(n, "lost_mass", 0.0)
    for i in range(n_steps):
        lost += st.advance(cur, m0 + i, nxt)
        cur, nxt = nxt, cur
        masses[i + 1] = grid.dx * cur.sum()
    return Evolved(cur, grid.dx, (m0 + n_steps) * grid.dx, lost), masses


def monodromy(n0: DensityField, k, grid: Grid) -> Evolved:
    """Evolution over one full period (``steps_per_period`` steps)."""
    if not np.any(n0.values > 0):
        raise ValueError("initial density is identically zero")
    out, _ = evolve(n0, k, grid, grid.steps_per_period)
    return out


# ---------------------------------------------------------------------------
# power iteration


@dataclass(frozen=True, eq=False)
class FloquetResult:
    lam: float
    residual: float
    iterations: int
    grid: Grid
    lost_fraction: float  # share of the mass lost past x_max over the last period
    eigenprofile: Optional[np.ndarray] = None  # shape (steps_per_period, n_ages)
    lam_history: tuple = ()

    @property
    def period(self) -> float:
        return self.grid.period

    def profile_at(self, m: int) -> DensityField:
        if self.eigenprofile is None:
            raise ValueError("eigenprofile was not stored")
        return DensityField(self.eigenprofile[m % self.grid.steps_per_period], self.grid.dx, m * self.grid.dx)


def initial_iterate(kernel, grid: Grid) -> np.ndarray:
    """Indicator of the fertile ages ``[floor(a), x_max)``."""
    j = min(int(math.floor(kernel.a / grid.dx + 1e-9)), grid.n_ages - 1)
    n = np.zeros(grid.n_ages)
    n[j:] = 1.0
    return n


def _power(apply, n: np.ndarray, dx: float, tol: float, max_iter: int, T: float):
    """Power iteration on ``apply``.

    Returns ``(lam, vector, residual, iterations, log growths, converged)``;
    on a miss the last iterate is returned so that the caller can continue
    from it.
    """
    n = n / (dx * n.sum())
    growth: List[float] = []
    residual = math.inf
    lam = math.nan
    for it in range(1, max_iter + 1):
        new, extra = apply(n)
        mass = dx * new.sum()
        if not (mass > 1e-300 and math.isfinite(mass)):
            raise DegenerateError(f"iterate mass {mass!r} after {it} periods")
        new /= mass
        growth.append(math.log(mass))
        lam = growth[-1] / T
        residual = dx * float(np.abs(new - n).sum())
        n = new
        if residual < tol and it >= 3:
            return lam, n, residual, it, growth, True
    return lam, n, residual, max_iter, growth, False


def _perron_vector(apply, n: np.ndarray, ncv: int = 30) -> Tuple[np.ndarray, int]:
    """Dominant nonnegative eigenvector of the period map by implicitly restarted Arnoldi.

    Used when power iteration stalls because subdominant Floquet modes are
    close in modulus to the dominant one (strong, nearly synchronising
    forcing).  Among the largest-modulus Ritz values the real positive one is
    the Perron root; its eigenvector is returned with roundoff negatives
    clipped, together with the number of period maps spent.
    """
    size = n.size
    count = [0]

    def mv(v):
        count[0] += 1
        out, _ = apply(np.asarray(v, dtype=float).ravel())
        return out.copy()

    op = LinearOperator((size, size), matvec=mv, dtype=float)
    kk = min(4, size - 2)
    vals, vecs = eigs(op, k=kk, which="LM", v0=n, ncv=min(max(ncv, 2 * kk + 1), size - 1), tol=1e-13)
    real = np.abs(vals.imag) <= 1e-9 * np.abs(vals) + 1e-300
    cand = np.nonzero(real & (vals.real > 0))[0]
    if cand.size == 0:
        raise DegenerateError("no positive real Ritz value among the dominant ones")
    i = cand[np.argmax(vals.real[cand])]
    v = vecs[:, i].real
    v = v * np.sign(v.sum())
    np.clip(v, 0.0, None, out=v)
    if not v.sum() > 0:
        raise DegenerateError("Perron vector vanished")
    return v, count[0]


def _solve(apply, start: np.ndarray, dx: float, tol: float, max_iter: int, T: float, method: str):
    """Power iteration, switching to Arnoldi after ``POWER_BUDGET`` periods (``method='auto'``)."""
    if method not in ("auto", "power", "arnoldi"):
        raise ValueError(f"unknown method {method!r}")
    budget = max_iter if method == "power" else 0 if method == "arnoldi" else min(POWER_BUDGET, max_iter)
    spent = 0
    n = start
    if budget:
        lam, n, residual, spent, growth, ok = _power(apply, start, dx, tol, budget, T)
        if ok:
            return lam, n, residual, spent, growth
        if method == "power" or spent >= max_iter:
            raise NonConvergedError(max_iter, residual, lam)
    try:
        n, used = _perron_vector(apply, n)
    except ArpackError as e:
        raise NonConvergedError(max_iter, math.inf, math.nan) from e
    spent += used
    log.debug("Arnoldi fallback after %d power periods (%d maps)", budget, used)
    lam, n, residual, it, growth, ok = _power(apply, n, dx, tol, max(3, max_iter - spent), T)
    if not ok:
        raise NonConvergedError(max_iter, residual, lam)
    return lam, n, residual, spent + it, growth


def floquet_eigen(k, grid: Grid, tol: float = 1e-10, max_iter: int = 10_000,
                  store_profile: bool = True, initial: Optional[np.ndarray] = None,
                  method: str = "auto") -> FloquetResult:
    """Dominant Floquet eigenvalue by power iteration on the one-period map.

    The growth rate is the log of the mass growth over the last period,
    divided by ``T``.  With ``method='auto'`` a power iteration that has not
    converged after ``POWER_BUDGET`` periods is handed to an Arnoldi solver
    and then finished by power steps, so the reported residual always comes
    from the power map.  ``'power'`` and ``'arnoldi'`` force one route.  With ``store_profile`` the
    periodic eigenprofile ``N(t_m, .)`` is returned for every step of one
    period, normalised so that its time-averaged mass is 1.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    st = _Stepper(k, grid)
    M = grid.steps_per_period
    dx = grid.dx
    buf = np.empty(grid.n_ages)
    losses = [0.0]

    def period_map(n):
        cur, nxt = n.copy(), buf
        lost = 0.0
        for m in range(M):
            lost += st.advance(cur, m, nxt)
            cur, nxt = nxt, cur
        losses[0] = lost
        return cur, lost

    start = initial_iterate(k, grid) if initial is None else np.array(initial, dtype=float)
    lam, n, residual, iters, growth = _solve(period_map, start, dx, tol, max_iter, grid.period, method)
    log.debug("floquet_eigen: lam=%.8f after %d periods (residual %.2e)", lam, iters, residual)
    lost_fraction = losses[0] / math.exp(growth[-1])

    profile = None
    if store_profile:
        profile = np.empty((M, grid.n_ages))
        cur, nxt = n.copy(), buf
        for m in range(M):
            profile[m] = cur * math.exp(-lam * m * dx)
            st.advance(cur, m, nxt)
            cur, nxt = nxt, cur
        profile /= dx * profile.sum() / M
    return FloquetResult(lam, residual, iters, grid, lost_fraction, profile, tuple(g / grid.period for g in growth))


@dataclass(frozen=True, eq=False)
class AdjointResult:
    phi: np.ndarray  # shape (steps_per_period, n_ages)
    lambda_check: float
    residual: float
    iterations: int
    direct: FloquetResult

    def duality(self) -> np.ndarray:
        """``int N(t_m, x) phi(t_m, x) dx`` for every step of the period."""
        return self.direct.grid.dx * np.einsum("mj,mj->m", self.direct.eigenprofile, self.phi)


def adjoint_floquet(k, grid: Grid, tol: float = 1e-10, max_iter: int = 10_000,
                    direct: Optional[FloquetResult] = None, method: str = "auto") -> AdjointResult:
    """Adjoint eigenfunction phi by backward power iteration.

    Uses the exact transpose of the direct scheme, so ``lambda_check``
    reproduces the direct eigenvalue.  ``phi`` is normalised jointly with
    the direct eigenprofile: the time average of ``int N phi dx`` is 1.
    """
    if direct is None or direct.eigenprofile is None:
        direct = floquet_eigen(k, grid, tol, max_iter, store_profile=True, method=method)
    st = _Stepper(k, grid)
    M = grid.steps_per_period
    dx = grid.dx
    buf = np.empty(grid.n_ages)

    def backward_period(phi):
        cur, nxt = phi.copy(), buf
        for m in range(M - 1, -1, -1):
            st.advance_adjoint(cur, m, nxt)
            cur, nxt = nxt, cur
        return cur, 0.0

    lam, phi, residual, iters, _ = _solve(backward_period, np.ones(grid.n_ages), dx, tol, max_iter,
                                          grid.period, method)
    out = np.empty((M, grid.n_ages))
    cur, nxt = phi.copy(), buf
    for m in range(M - 1, -1, -1):
        st.advance_adjoint(cur, m, nxt)
        cur, nxt = nxt, cur
        out[m] = cur * math.exp(-lam * (M - m) * dx)
    # periodicity: out[0] equals phi up to the converged growth factor
    pairing = dx * np.einsum("mj,mj->m", direct.eigenprofile, out).mean()
    out /= pairing
    return AdjointResult(out, lam, residual, iters, direct)
