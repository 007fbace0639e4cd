"""Generational decomposition of the division equation.

Generation ``i`` collects cells that have divided exactly ``i`` times since
time 0.  Every generation is transported and absorbed by the same
characteristic scheme as :mod:`pde_solver`; the mass absorbed from
generation ``i - 1`` during a step enters generation ``i`` at age 0 (one
copy per division, the factor 2 being restored by weighting generation ``i``
with ``2**i``).  Because the scheme is linear and identical for every
generation, ``sum_i 2**i n_i`` reproduces the direct solution up to roundoff.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional

import numpy as np

from .model_core import DensityField, Grid, check_monotonicity_condition
from .pde_solver import _Stepper, _check_density, _time_index


@dataclass(eq=False)
class GenerationStack:
    """Per-generation masses, boundary traces and density snapshots over time.

    ``masses[m, i]`` is the mass of generation ``i`` at time ``t_m = m*dx``.
    ``traces[m, i]`` is the age-0 density of generation ``i`` at ``t_m``
    (zero at ``m = 0``).  ``snapshots[m]`` holds the ``(i_max+1, n_ages)``
    densities at the stored steps.
    """

    grid: Grid
    t0: float
    i_max: int
    masses: np.ndarray
    traces: np.ndarray
    snapshots: Dict[int, np.ndarray]
    lost_mass: np.ndarray  # per generation, mass aged past x_max
    overflow: np.ndarray  # cumulative mass that divided out of generation i_max, per step
    initial: DensityField = field(repr=False)

    @property
    def truncated_mass(self) -> float:
        return float(self.overflow[-1])

    @property
    def truncated(self) -> bool:
        return self.truncated_mass > 0.0

    @property
    def n_steps(self) -> int:
        return self.masses.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_steps + 1) * self.grid.dx

    def step_of(self, t: float) -> int:
        m = _time_index(self.grid, t - self.t0)
        if not 0 <= m <= self.n_steps:
            raise ValueError(f"time {t} outside the computed range")
        return m

    def density(self, i: int, t: float) -> DensityField:
        m = self.step_of(t)
        if m not in self.snapshots:
            raise KeyError(f"no snapshot stored at t={t}")
        return DensityField(self.snapshots[m][i], self.grid.dx, t)

    def reaggregate(self, t: float) -> DensityField:
        """``sum_i 2**i n_i(t, .)``."""
        m = self.step_of(t)
        if m not in self.snapshots:
            raise KeyError(f"no snapshot stored at t={t}")
        w = np.ldexp(1.0, np.arange(self.i_max + 1))
        return DensityField(w @ self.snapshots[m], self.grid.dx, t)

    def total_mass(self) -> np.ndarray:
        """``int n dx = S_0 + sum_{j>=1} 2**(j-1) S_j`` at every step."""
        return self.masses @ np.ldexp(1.0, np.arange(self.i_max + 1))


def default_i_max(horizon: float, a: float) -> int:
    """Enough generations that none is ever reached by a division before ``horizon``."""
    if a <= 0:
        raise ValueError("majority age 0: pass i_max explicitly")
    return math.ceil(horizon / a - 1e-9) + 2


def solve_generations(n0: DensityField, k, grid: Grid, horizon: float,
                      i_max: Optional[int] = None, snapshot_every: Optional[int] = None) -> GenerationStack:
    """Solve the triangular generational system on ``[t0, t0 + horizon]``.

    ``snapshot_every`` controls which densities are kept (every that many
    steps plus the final one); masses and boundary traces are kept for every
    step.  Divisions out of the last generation are counted in
    ``truncated_mass`` rather than silently dropped.
    """
    _check_density(n0, grid)
    n_steps = _time_index(grid, horizon)
    if n_steps < 0:
        raise ValueError("horizon must be nonnegative")
    if i_max is None:
        i_max = default_i_max(horizon, k.a)
    if i_max < 0:
        raise ValueError("i_max must be >= 0")
    every = snapshot_every or max(1, grid.steps_per_period // 10)
    m0 = _time_index(grid, n0.time)
    st = _Stepper(k, grid)
    dx = grid.dx
    G = np.zeros((i_max + 1, grid.n_ages))
    G[0] = n0.values
    nxt = np.empty_like(G)
    masses = np.zeros((n_steps + 1, i_max + 1))
    traces = np.zeros((n_steps + 1, i_max + 1))
    masses[0] = dx * G.sum(axis=1)
    snaps = {0: G.copy()}
    lost = np.zeros(i_max + 1)
    overflow = np.zeros(n_steps + 1)
    truncated = 0.0
    for s in range(n_steps):
        surv, absorbed = st.factors(m0 + s)
        out_flow = G @ absorbed  # density units; times dx gives divided mass
        lost += dx * G[:, -1] * surv[-1]
        np.multiply(G[:, :-1], surv[:-1], out=nxt[:, 1:])
        nxt[0, 0] = 0.0
        nxt[1:, 0] = out_flow[:-1]
        truncated += dx * float(out_flow[-1])
        G, nxt = nxt, G
        masses[s + 1] = dx * G.sum(axis=1)
        traces[s + 1] = G[:, 0]
        overflow[s + 1] = truncated
        if (s + 1) % every == 0 or s + 1 == n_steps:
            snaps[s + 1] = G.copy()
    return GenerationStack(grid, n0.time, i_max, masses, traces, snaps, lost, overflow, n0)


def S_tail(stack: GenerationStack, j: int, t: float) -> float:
    """``S_j(t) = sum_{i >= j} int n_i(t, x) dx``.

    Lineages that divided out of the last stored generation still belong to
    every tail with ``j <= i_max + 1``; their (unweighted) mass is added back.
    """
    if j < 0:
        raise ValueError("generation index must be >= 0")
    m = stack.step_of(t)
    extra = stack.overflow[m] if j <= stack.i_max + 1 else 0.0
    return float(stack.masses[m, j:].sum() + extra)


def S_closed_form(n0: DensityField, k, j: int, t: float, grid: Grid,
                  stack: Optional[GenerationStack] = None) -> float:
    """Closed-form ``S_j(t)`` from the characteristics.

    For ``j = 1`` every initial cell at age ``x`` contributes
    ``n0(x) * (1 - exp(-int_0^t K(s, x + s) ds))``.  For ``j >= 2`` the
    cohorts entering generation ``j - 1`` at time ``s`` (the recorded boundary
    traces) contribute ``n_{j-1}(s, 0) * (1 - exp(-int_0^{t-s} K(s+y, y) dy))``.
    Both integrals are left-endpoint sums over the cells, and the hazards
    are evaluated with :meth:`char_integral` of the kernel, independently of
    the stepping code.  Initial data is taken at ``t0 = n0.time``.
    """
    if j < 1:
        raise ValueError("closed form is stated for j >= 1")
    dx = grid.dx
    t0 = n0.time
    if t < t0:
        raise ValueError("t precedes the initial time")
    if j == 1:
        x = grid.ages
        vals = n0.values
        nz = np.nonzero(vals)[0]
        H = np.array([k.char_integral(t0, float(x[i]), t - t0) for i in nz])
        return float(dx * np.sum(vals[nz] * -np.expm1(-H)))
    if stack is None:
        raise ValueError("S_j for j >= 2 needs the boundary traces of a GenerationStack")
    if j - 1 > stack.i_max:
        raise ValueError(f"no trace recorded for generation {j - 1}")
    m_end = stack.step_of(t)
    tr = stack.traces[1:m_end + 1, j - 1]
    total = 0.0
    for idx in np.nonzero(tr)[0]:
        s = stack.t0 + (idx + 1) * dx
        total += tr[idx] * -math.expm1(-k.survival_integral(s, t))
    return float(dx * total)


class OrderReport(NamedTuple):
    holds: bool
    witness: Optional[tuple]  # (t, j, S_j under k1, S_j under k2)
    mass_ordered: bool
    mass_witness: Optional[tuple]  # (t, mass under k1, mass under k2)
    k1_condition: bool  # does k1 satisfy the monotonicity condition
    max_gap: float  # largest S_j^1 - S_j^2 seen (negative when strictly ordered)


def _dominates(k1, k2, grid: Grid, n_steps: int, m0: int) -> bool:
    d1, d2 = k1.discretize(grid), k2.discretize(grid)
    for m in range(m0, m0 + min(n_steps, grid.steps_per_period) + 1):
        if np.any(d2.absorption(m) < d1.absorption(m) - 1e-14):
            return False
    return True


def stochastic_order_check(k1, k2, n0: DensityField, grid: Grid, horizon: float,
                           i_max: Optional[int] = None, tol: float = 1e-9) -> OrderReport:
    """Compare the tails ``S_j`` under two kernels with ``k2 >= k1``.

    Masses are normalised so that ``int n0 = 1``.  The ordering ``S_j^2(t) >=
    S_j^1(t) - tol`` is checked at every grid time up to ``horizon`` and every
    generation; the total population is compared as well.  Whether ``k1``
    satisfies the monotonicity condition is reported, not enforced, so that
    kernels outside the theorem can be explored.
    """
    m0 = _time_index(grid, n0.time)
    n_steps = _time_index(grid, horizon)
    if not _dominates(k1, k2, grid, n_steps, m0):
        raise ValueError("k2 does not dominate k1 on the grid")
    if i_max is None:
        i_max = default_i_max(horizon, min(k1.a, k2.a)) if min(k1.a, k2.a) > 0 else 20
    mass0 = n0.mass
    if not mass0 > 0:
        raise ValueError("initial density is zero")
    s1 = solve_generations(n0, k1, grid, horizon, i_max, snapshot_every=n_steps or 1)
    s2 = solve_generations(n0, k2, grid, horizon, i_max, snapshot_every=n_steps or 1)
    S1 = (np.cumsum(s1.masses[:, ::-1], axis=1)[:, ::-1] + s1.overflow[:, None]) / mass0
    S2 = (np.cumsum(s2.masses[:, ::-1], axis=1)[:, ::-1] + s2.overflow[:, None]) / mass0
    gap = S1 - S2
    witness = None
    bad = np.argwhere(gap > tol)
    if bad.size:
        m, j = (int(v) for v in bad[0])
        witness = (s1.times[m], j, float(S1[m, j]), float(S2[m, j]))
    P1, P2 = s1.total_mass() / mass0, s2.total_mass() / mass0
    mass_witness = None
    badm = np.nonzero(P1 - P2 > tol)[0]
    if badm.size:
        m = int(badm[0])
        mass_witness = (s1.times[m], float(P1[m]), float(P2[m]))
    T = k1.period or grid.period
    hz = max(T, T * math.ceil(horizon / T - 1e-9))
    cond = check_monotonicity_condition(k1, grid, hz).holds
    return OrderReport(witness is None, witness, mass_witness is None, mass_witness, cond,
                       float(gap.max()))
