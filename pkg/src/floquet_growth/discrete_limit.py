"""Staircase limit of the growth rate for instantaneous divisions.

With a square-wave time modulation (divisions permitted on ``[0, tau)`` of
every period) and a division rate tending to infinity, a cohort divides as
soon as it is both mature (age >= a) and inside a permitted window.  The
limiting growth rate depends only on the first multiple ``N_a * a`` landing
in the blocked set ``W_tau = [tau, T] + N*T``::

    lambda_inf(a) = N_a * log 2 / (ceil(N_a * a / T) * T)

All window-membership decisions are made in exact rational arithmetic when
``a``, ``tau`` and ``T`` are rational (floats close to a simple rational are
snapped, see :func:`model_core.as_fraction`).  A tolerance-based float path is
kept for the remaining inputs.  Internally time is measured in periods.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .model_core import as_fraction

LOG2 = math.log(2.0)
INFINITE = math.inf

FLOAT_TOL = 1e-12
MAX_K = 10**6


@dataclass(frozen=True)
class StaircaseResult:
    a: Fraction
    N_a: int
    p_a: int
    lambda_inf: float
    ratio: Fraction  # lambda_inf = ratio * log 2 / T
    a_l: Fraction
    a_r: Fraction
    rate_bound: float

    def row(self) -> dict:
        return {"a": self.a, "N_a": self.N_a, "p_a": self.p_a, "lambda_inf": self.lambda_inf,
                "a_l": self.a_l, "a_r": self.a_r, "rate_bound": self.rate_bound}


class _Exact:
    """Normalised exact parameters (T = 1)."""

    __slots__ = ("a", "tau", "T")

    def __init__(self, a, tau, T):
        T = as_fraction(T)
        a = as_fraction(a) / T
        tau = as_fraction(tau) / T
        if not 0 < tau < 1:
            raise ValueError("need 0 < tau < T")
        if not a > 0:
            raise ValueError("need a > 0")
        self.a, self.tau, self.T = a, tau, T


# Window membership for y > 0; (left_closed, right_closed) describe [n+tau, n+1].
_CLOSED = (True, True)  # W_tau = [tau, 1] + N
_RIGHT = (True, False)  # y + 0 in W_tau: [tau, 1) + N
_LEFT = (False, True)  # y - 0 in W_tau: (tau, 1] + N


def _member(y: Fraction, tau: Fraction, kind) -> bool:
    frac = y - math.floor(y)
    left_closed, right_closed = kind
    if frac == 0:
        return right_closed and y >= 1
    return frac >= tau if left_closed else frac > tau


def _in_window(y: Fraction, tau: Fraction) -> bool:
    """y > 0 lies in W_tau = [tau, 1] + N."""
    return _member(y, tau, _CLOSED)


def _in_window_right(y: Fraction, tau: Fraction) -> bool:
    """y + 0 lies in W_tau (half-open window [tau, 1) + N)."""
    return _member(y, tau, _RIGHT)


def _in_window_left(y: Fraction, tau: Fraction) -> bool:
    """y - 0 lies in W_tau."""
    return _member(y, tau, _LEFT)


def _min_multiple_in_range(A: int, M: int, L: int, R: int) -> Optional[int]:
    """Smallest ``x >= 0`` with ``L <= (A*x) mod M <= R``, or None (``0 <= L <= R < M``).

    Euclid-style recursion: if no multiple of A lands in [L, R] directly, the
    wrap count ``y`` of the answer solves the same problem with modulus A.
    Reflecting the multiplier keeps it below half the modulus, so the depth
    is logarithmic in M.
    """
    A %= M
    if L == 0:
        return 0
    if A == 0:
        return None
    x = -(-L // A)
    if A * x <= R:
        return x
    if 2 * A > M:
        # A*x mod M in [L, R]  <=>  (M - A)*x mod M in [M - R, M - L]
        return _min_multiple_in_range(M - A, M, M - R, M - L)
    # a multiple of A must lie in [M*y + L, M*y + R] for the wrap count y,
    # i.e. (-M*y - L) mod A <= R - L, a problem of the same form modulo A
    c0 = (-L) % A
    y = _min_multiple_in_range((-M) % A, A, A - c0, A - c0 + (R - L))
    if y is None:
        return None
    return -(-(M * y + L) // A)


def _first_multiple(a: Fraction, tau: Fraction, kind) -> Optional[int]:
    """Smallest k >= 1 with k*a in the window, or None.

    Only the fractional part P/Q of a matters and ``frac(k a) = (k P mod Q)/Q``,
    so the question is which residue ``k P mod Q`` first lands in the
    window, answered by :func:`_min_multiple_in_range`.  The residue 0 (k a an
    integer) is first reached at k = Q.
    """
    left_closed, right_closed = kind
    f = a - math.floor(a)
    if f == 0:
        return 1 if right_closed else None
    P, Q = f.numerator, f.denominator
    tq = tau * Q
    L = math.ceil(tq) if left_closed else math.floor(tq) + 1
    k = _min_multiple_in_range(P, Q, L, Q - 1) if L <= Q - 1 else None
    if right_closed and (k is None or k > Q):
        k = Q
    return k


def _float_params(a, tau, T):
    T = float(T)
    a, tau = float(a) / T, float(tau) / T
    if not 0 < tau < 1:
        raise ValueError("need 0 < tau < T")
    if not a > 0:
        raise ValueError("need a > 0")
    return a, tau


def _float_frac(y: float) -> float:
    f = y - math.floor(y)
    # ties within tolerance of an integer are pushed onto it
    if f > 1 - FLOAT_TOL or f < FLOAT_TOL:
        return 0.0
    return f


def _is_exact(*xs) -> bool:
    for x in xs:
        if isinstance(x, float):
            f = as_fraction(x)
            if f.denominator > 10**9:
                return False
    return True


def compute_Na(a, tau, T=1) -> int:
    """Smallest ``k >= 1`` with ``k*a`` in the closed window ``[tau, T] + N*T``."""
    if _is_exact(a, tau, T):
        p = _Exact(a, tau, T)
        k = _first_multiple(p.a, p.tau, _CLOSED)
        assert k is not None  # k = den(a) always qualifies
        return k
    af, tf = _float_params(a, tau, T)
    for k in range(1, MAX_K + 1):
        y = k * af
        f = _float_frac(y)
        if f >= tf - FLOAT_TOL or (f == 0.0 and y >= 1 - FLOAT_TOL):
            return k
    raise ArithmeticError(f"no multiple k <= {MAX_K} of a={a} reaches the blocked window")


def compute_Ka(a, tau, T=1):
    """Smallest ``k`` with ``k*a`` in the half-open window ``[tau, T) + N*T``.

    Returns :data:`INFINITE` when no multiple ever lands there.
    """
    if _is_exact(a, tau, T):
        p = _Exact(a, tau, T)
        k = _first_multiple(p.a, p.tau, _RIGHT)
        return INFINITE if k is None else k
    af, tf = _float_params(a, tau, T)
    n = compute_Na(a, tau, T)
    f = _float_frac(n * af)
    return INFINITE if f == 0.0 else n


def _ratio(a: Fraction, tau: Fraction) -> Tuple[int, int]:
    n = _first_multiple(a, tau, _CLOSED)
    return n, math.ceil(n * a) - 1


def lambda_infinity(a, tau, T=1) -> float:
    """Limit of the Floquet eigenvalue as the division rate tends to infinity."""
    N = compute_Na(a, tau, T)
    if _is_exact(a, tau, T):
        p = _Exact(a, tau, T)
        periods = math.ceil(N * p.a)
        Tf = float(p.T)
        a_n, tau_n = p.a, p.tau
        if tau_n < Fraction(1, 2) and a_n < 1:
            # closed form for short windows
            assert Fraction(N, periods) == math.ceil(tau_n / a_n), (a, tau, T)
    else:
        af, _ = _float_params(a, tau, T)
        periods = max(1, math.ceil(N * af - FLOAT_TOL))
        Tf = float(T)
    return N * LOG2 / (periods * Tf)


def staircase_ratio(a, tau, T=1) -> Fraction:
    """``N_a / (p_a + 1)``, so that ``lambda_inf = ratio * log 2 / T``."""
    p = _Exact(a, tau, T)
    N, pa = _ratio(p.a, p.tau)
    return Fraction(N, pa + 1)


# ---------------------------------------------------------------------------
# step intervals


@dataclass(frozen=True)
class _Piece:
    """Interval of ages sharing one combinatorial type (N, p)."""

    lo: Fraction
    lo_closed: bool
    hi: Fraction
    hi_closed: bool
    ratio: Optional[Fraction]


def _piece(b: Fraction, tau: Fraction, side: int) -> _Piece:
    """Combinatorial piece containing ``b`` (side 0), or just right (+1) / left (-1) of it.

    Returns ``ratio=None`` when no finite type exists immediately right of b.
    """
    kind = {0: _CLOSED, 1: _RIGHT, -1: _LEFT}[side]
    N = _first_multiple(b, tau, kind)
    if N is None:
        return _Piece(b, True, b, True, None)
    lo, lo_closed = Fraction(0), False
    hi, hi_closed = Fraction(10**18), False

    def raise_lo(v, closed):
        nonlocal lo, lo_closed
        if v > lo or (v == lo and not closed):
            lo, lo_closed = v, closed

    def lower_hi(v, closed):
        nonlocal hi, hi_closed
        if v < hi or (v == hi and not closed):
            hi, hi_closed = v, closed

    # n_k < k a' < n_k + tau for every k < N
    for v in _tightest_open_bounds(b, tau, N, side):
        raise_lo(v[0], False)
        lower_hi(v[1], False)
    y = N * b
    if side == 1:
        p = math.floor(y)
    else:
        p = math.ceil(y) - 1
    # p + tau <= N a' <= p + 1
    raise_lo((p + tau) / N, True)
    lower_hi(Fraction(p + 1, N), True)
    if side == 1:
        raise_lo(b, False)
    elif side == -1:
        lower_hi(b, False)
    return _Piece(lo, lo_closed, hi, hi_closed, Fraction(N, p + 1))


def _open_bounds(b: Fraction, tau: Fraction, k: int, side: int) -> Tuple[Fraction, Fraction]:
    y = k * b
    n_k = math.floor(y)
    if side == -1 and y == n_k:
        n_k -= 1  # y - 0 sits just below an integer
    return Fraction(n_k, k), (n_k + tau) / k


def _tightest_open_bounds(b: Fraction, tau: Fraction, N: int, side: int):
    """Bounds ``(n_k/k, (n_k+tau)/k)`` for k < N, or only the candidates that can be tightest.

    For large N the maxima and minima are located in floating point (distinct
    values differ by at least 1/N^2) and only near-ties are compared exactly.
    """
    if N <= 2000 or max(b.numerator, 1) * N * max(tau.denominator, 1) >= 2**62:
        return [_open_bounds(b, tau, k, side) for k in range(1, N)]
    P, Q = b.numerator, b.denominator
    k = np.arange(1, N, dtype=np.int64)
    kP = k * P
    n = kP // Q
    if side == -1:
        n = n - (kP % Q == 0)
    lo = n / k
    hi = (n + float(tau)) / k
    slack = 1e-9 / N
    td, tn = tau.denominator, tau.numerator
    out = []
    sel = lo >= lo.max() - slack
    num, den = n[sel], k[sel]
    g = np.gcd(num, den)
    for p_, q_ in set(zip((num // g).tolist(), (den // g).tolist())):
        out.append((Fraction(p_, q_), Fraction(10**18)))
    sel = hi <= hi.min() + slack
    num, den = n[sel] * td + tn, k[sel] * td
    g = np.gcd(num, den)
    for p_, q_ in set(zip((num // g).tolist(), (den // g).tolist())):
        out.append((Fraction(0), Fraction(p_, q_)))
    return sorted(out)


def _value(b: Fraction, tau: Fraction) -> Fraction:
    N, p = _ratio(b, tau)
    return Fraction(N, p + 1)


def _step_interval_exact(a: Fraction, tau: Fraction, max_pieces: int = 10_000):
    v = _value(a, tau)
    start = _piece(a, tau, 0)
    assert start.ratio == v
    # extend to the right
    P = start
    for _ in range(max_pieces):
        R = P.hi
        nxt = _piece(R, tau, 1) if P.hi_closed else _piece(R, tau, 0)
        if nxt.ratio != v:
            a_r = R
            break
        P = nxt
    else:
        raise RuntimeError("step interval search did not terminate")
    # extend to the left
    P = start
    for _ in range(max_pieces):
        L = P.lo
        if L <= 0:
            a_l = Fraction(0)
            break
        nxt = _piece(L, tau, -1) if P.lo_closed else _piece(L, tau, 0)
        if nxt.ratio != v:
            a_l = L
            break
        P = nxt
    else:
        raise RuntimeError("step interval search did not terminate")
    return a_l, a_r


def _step_interval_float(a: float, tau: float, T: float):
    lam = lambda x: lambda_infinity(x, tau, T)
    v = lam(a)

    def edge(direction):
        # doubling then bisection; lambda_inf is monotone so the level set is an interval
        step = 1e-6 * max(a, 1e-3)
        inside = a
        cap = a * 1e3
        while True:
            probe = inside + direction * step
            if probe <= 0:
                return 0.0
            if probe > cap:
                return cap
            if lam(probe) != v:
                break
            inside = probe
            step *= 2
        outside = probe
        while abs(outside - inside) > FLOAT_TOL * max(1.0, a):
            mid = 0.5 * (inside + outside)
            if lam(mid) == v:
                inside = mid
            else:
                outside = mid
        return outside if direction > 0 else inside

    return edge(-1), edge(+1)


def step_interval(a, tau, T=1):
    """``(a_l, a_r)``: infimum and supremum of ``{a' : lambda_inf(a') = lambda_inf(a)}``.

    ``a_l`` belongs to the step (right continuity); ``a_r`` belongs to it only
    on points of the exceptional set (see :func:`scan_E_tau`).
    """
    if _is_exact(a, tau, T):
        p = _Exact(a, tau, T)
        a_l, a_r = _step_interval_exact(p.a, p.tau)
        return a_l * p.T, a_r * p.T
    return _step_interval_float(float(a), float(tau), float(T))


def rate_bound(a, tau, T=1) -> float:
    """Lower bound ``min((a_r - a)/2, tau)`` on the convergence rate."""
    _, a_r = step_interval(a, tau, T)
    return float(min((as_fraction(a_r) - as_fraction(a)) / 2, as_fraction(tau)))


def staircase(a, tau, T=1) -> StaircaseResult:
    """All staircase quantities at one majority age."""
    a_l, a_r = step_interval(a, tau, T)
    if _is_exact(a, tau, T):
        p = _Exact(a, tau, T)
        N, pa = _ratio(p.a, p.tau)
    else:
        N = compute_Na(a, tau, T)
        pa = max(1, math.ceil(N * float(a) / float(T) - FLOAT_TOL)) - 1
    a_exact, a_r = as_fraction(a), as_fraction(a_r)
    rb = float(min((a_r - a_exact) / 2, as_fraction(tau)))
    return StaircaseResult(a_exact, N, pa, N * LOG2 / ((pa + 1) * float(T)), Fraction(N, pa + 1),
                           as_fraction(a_l), a_r, rb)


# ---------------------------------------------------------------------------
# jump process


@dataclass(frozen=True)
class JumpTrajectory:
    division_times: Tuple[Fraction, ...]

    def m_of_t(self, t) -> int:
        """Number of divisions in ``[0, t]``."""
        return bisect.bisect_right(self.division_times, as_fraction(t))


def simulate_jump_process(x0, a, tau, T=1, horizon=1) -> JumpTrajectory:
    """Division times of a cell of age ``x0`` at time 0 under instantaneous division.

    The cell ages at unit speed and divides as soon as it is mature and the
    time lies in a permitted window ``[0, tau) + N*T``; a division falling in
    a blocked window is deferred to the start of the next period.
    """
    p = _Exact(a, tau, T)
    x = as_fraction(x0) / p.T
    end = as_fraction(horizon) / p.T
    if x < 0:
        raise ValueError("initial age must be nonnegative")

    def deferred(t: Fraction) -> Fraction:
        return Fraction(math.ceil(t)) if _in_window_right(t, p.tau) else t

    times: List[Fraction] = []
    t = Fraction(0) if x >= p.a else deferred(p.a - x)
    while t <= end:
        times.append(t * p.T)
        t = deferred(t + p.a)
    return JumpTrajectory(tuple(times))


def check_theta_sequence(thetas: Sequence, eps, a, tau, T=1) -> bool:
    """Check a candidate tube of division times of width ``eps``.

    Conditions, in units of the period: the first time is at least
    ``max(a - 1 + tau, 0)``; consecutive times satisfy
    ``theta_{i+1} - (theta_i + eps) >= a``; and each
    ``theta_i + eps < floor(theta_i) + tau``.
    """
    if not len(thetas):
        raise ValueError("thetas must be nonempty")
    p = _Exact(a, tau, T)
    e = as_fraction(eps) / p.T
    if e < 0:
        raise ValueError("eps must be nonnegative")
    th = [as_fraction(x) / p.T for x in thetas]
    if th[0] < max(p.a - 1 + p.tau, 0):
        return False
    for u, w in zip(th, th[1:]):
        if w - (u + e) < p.a:
            return False
    return all(x + e < math.floor(x) + p.tau for x in th)


def thicken_theta_sequence(thetas: Sequence, a_from, a_to, eps=0, tau=None, T=1):
    """Shift a tube built for majority age ``a_from`` to a smaller ``a_to``.

    Each time moves left by ``(a_from - a_to)/2`` but not past the start of
    its period; the tube width grows by the same amount (capped at ``tau``).
    """
    half = (as_fraction(a_from) - as_fraction(a_to)) / 2
    Tf = as_fraction(T)
    out = []
    for x in thetas:
        x = as_fraction(x)
        out.append(max(math.floor(x / Tf) * Tf, x - half))
    width = as_fraction(eps) + half
    if tau is not None:
        width = min(width, as_fraction(tau))
    return out, width


# ---------------------------------------------------------------------------
# exceptional set


def scan_E_tau(tau, T=1, a_range=(Fraction(0), Fraction(1)), resolution=Fraction(1, 1000)) -> List[Fraction]:
    """Ages in ``a_range`` that close their own step (``a = sup I_a`` attained).

    Candidates are the right ends of the steps met while sampling the range
    at the given resolution; a candidate is kept when ``lambda_inf`` at the
    end equals the step value and ``N_a * a`` is a multiple of ``T``.
    """
    lo, hi = (as_fraction(x) for x in a_range)
    res = as_fraction(resolution)
    if res <= 0:
        raise ValueError("resolution must be positive")
    Tq = as_fraction(T)
    tq = as_fraction(tau) / Tq
    found = set()
    x = lo + res if lo <= 0 else lo
    while x < hi:
        xn = x / Tq
        v = _value(xn, tq)
        _, a_r = _step_interval_exact(xn, tq)
        if lo * 1 < a_r * Tq < hi and _value(a_r, tq) == v:
            N = _first_multiple(a_r, tq, _CLOSED)
            if (N * a_r).denominator == 1:
                found.add(a_r * Tq)
        # jump straight past this step
        x = max(x + res, a_r * Tq)
    return sorted(found)
