"""Reference values computed independently of the package and frozen here.

Frozen numbers were produced with 30-digit mpmath (root finding and matrix
exponentials); the helper functions are deliberately naive re-derivations
(brute-force loops, dense matrices) that share no code with the package.
"""
import math
from fractions import Fraction

import numpy as np
import scipy.linalg

LOG2 = math.log(2.0)

# root of 2 exp(-mu) = mu + 1 (mpmath, 30 digits)
MU_CONSTANT_K1_A1 = 0.374822528183623381617837317112
# roots of 2 k exp(-mu) = mu + k for a = 1
MU_CONSTANT_A1 = {
    1: MU_CONSTANT_K1_A1,
    5: 0.582880271997431836345028689743,
    20: 0.660648597059485567763889444618,
    50: 0.679645819132336929135976739017,
}
# log Perron root of expm(Mb/2) expm(Ma/2) (mpmath expm + eig)
TWO_PHASE = {
    (10.0, 0.1, 5.0, 0.01): 2.88288920270330278138043743945,
    (10.0, 0.1, 0.0, 0.01): 5.0,
    (2.0, 0.3, 1.0, 0.7): 0.932470077728492015538140850211,
}


def brute_first_multiple(a: Fraction, tau: Fraction, closed_right: bool = True):
    """Smallest k <= den(a) with frac(k a) in [tau, 1) (or k a a positive integer when closed)."""
    for k in range(1, a.denominator + 1):
        y = k * a
        f = y - math.floor(y)
        if f >= tau or (closed_right and f == 0):
            return k
    return None


def brute_lambda_inf(a: Fraction, tau: Fraction) -> float:
    N = brute_first_multiple(a, tau)
    return N * LOG2 / math.ceil(N * a)


def two_phase_reference(alpha, a1, a2, b1, b2) -> float:
    Ma = np.array([[a1, 2 * a2], [0.0, -a2]])
    Mb = np.array([[-b1, 0.0], [2 * b1, b2]])
    P = scipy.linalg.expm((1 - alpha) * Mb) @ scipy.linalg.expm(alpha * Ma)
    return math.log(max(abs(np.linalg.eigvals(P))))


def constant_rate_root(ka: float, a: float) -> float:
    """Bisection on 2 ka exp(-mu a) = mu + ka written out by hand."""
    f = lambda m: 2 * ka * math.exp(-m * a) - m - ka  # noqa: E731
    lo, hi = 0.0, LOG2 / a
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def dense_transport_solution(n0, kappa, tau, a, dx, n_steps, x_max):
    """Age-by-age loop version of the exponential characteristic scheme (square wave psi)."""
    J = int(round(x_max / dx))
    n = np.array(n0, dtype=float)
    masses = [dx * n.sum()]
    for m in range(n_steps):
        t0, t1 = m * dx, (m + 1) * dx
        # time in the permitted window over [t0, t1]
        on = 0.0
        k0 = math.floor(t0)
        for kk in range(k0, k0 + 2):
            on += max(0.0, min(t1, kk + tau) - max(t0, kk))
        new = np.zeros(J)
        births = 0.0
        for j in range(J):
            x0 = j * dx
            fertile = max(0.0, x0 + dx - max(x0, a)) / dx
            A = kappa * on * fertile
            s = math.exp(-A)
            births += 2 * n[j] * (1 - s)
            if j + 1 < J:
                new[j + 1] = n[j] * s
        new[0] = births
        n = new
        masses.append(dx * n.sum())
    return n, np.array(masses)
