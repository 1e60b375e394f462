"""Critical coefficient, extinction-rate constants and the integral-equation solver.

Throughout, ``c = gamma_sigma / theta^3``.  The profile ``q`` solves

    q(t) = q(0) + a t^{1/3} - c * int_0^t q(x)^{-2} dx,   q(1) = 0,  q > 0 on [0, 1).

In the variables ``s = t^{1/3}`` and ``w = q^3`` this becomes the smooth ODE

    dw/ds = 3 a w^{2/3} - 9 c s^2,

whose only rough spot is ``w -> 0`` at ``s = 1``.  Forward shooting from
``w(0)`` is hopelessly ill-conditioned in ``q(1) = w(1)^{1/3}`` (a 1e-16 error in
``w(0)`` leaves ``q(1) ~ 1e-5``), whereas integrating backwards from the
endpoint is contracting.  The solver therefore starts from the local solution
``w ~ 3 c (1 - t)`` at ``1 - t = switch`` and integrates towards ``s = 0``;
forward shooting is kept for bracketing and monotonicity checks.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, optimize

from .errors import ConfigError, NoRootError, RegimeError


def _positive(**kw: float) -> None:
    for name, v in kw.items():
        if not (math.isfinite(v) and v > 0):
            raise ConfigError(f"{name} must be positive and finite, got {v!r}")


def critical_a(gamma_sigma: float, theta: float) -> float:
    """``a_c = 3 (6 gamma_sigma)^{1/3} / (2 theta)``."""
    _positive(gamma_sigma=gamma_sigma, theta=theta)
    return 3.0 * (6.0 * gamma_sigma) ** (1 / 3) / (2.0 * theta)


def barrier_cost(b, gamma_sigma: float, theta: float):
    """``b + 3 gamma_sigma / (theta^3 b^2)``; its minimum over ``b > 0`` is ``a_c``."""
    return b + 3.0 * gamma_sigma / (theta**3 * np.asarray(b, dtype=float) ** 2)


def b2_root(a: float, gamma_sigma: float, theta: float) -> float:
    """Largest ``b > 0`` with ``theta a = theta b + 3 gamma_sigma / (b^2 theta^2)``."""
    _positive(gamma_sigma=gamma_sigma, theta=theta)
    c = gamma_sigma / theta**3
    b_star = (6.0 * c) ** (1 / 3)

    def f(b: float) -> float:
        return b + 3.0 * c / b**2 - a

    f_star = f(b_star)
    if f_star > 1e-12 * max(1.0, abs(a)):
        raise NoRootError(f"a={a!r} is below a_c={critical_a(gamma_sigma, theta)!r}: no real root")
    if f_star >= 0:
        return b_star  # double root, up to rounding of a_c
    return optimize.brentq(f, b_star, max(a, b_star * (1 + 1e-12)), xtol=1e-15, rtol=4 * np.finfo(float).eps)


def rate_2b(gamma_sigma: float) -> float:
    """``-(3 gamma_sigma)^{1/3}``."""
    _positive(gamma_sigma=gamma_sigma)
    return -((3.0 * gamma_sigma) ** (1 / 3))


@dataclass(frozen=True)
class XbRoot:
    x_b: float
    residual: float
    companion: float  # sqrt(gamma_sigma / (theta b))


def x_b_root(b: float, gamma_sigma: float, theta: float) -> XbRoot:
    """Unique positive root of ``3 gamma_sigma / x^2 - x = 3 theta b``."""
    _positive(b=b, gamma_sigma=gamma_sigma, theta=theta)
    target = 3.0 * theta * b

    def f(x: float) -> float:
        return 3.0 * gamma_sigma / x**2 - x - target

    hi = (3.0 * gamma_sigma) ** (1 / 3)  # f(hi) = -target < 0
    lo = hi
    while f(lo) <= 0:
        lo /= 2.0
    x = optimize.brentq(f, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=1000)
    for _ in range(2):
        fp = -6.0 * gamma_sigma / x**3 - 1.0
        xn = x - f(x) / fp
        if abs(f(xn)) < abs(f(x)):
            x = xn
    return XbRoot(x_b=float(x), residual=float(abs(f(x))), companion=math.sqrt(gamma_sigma / (theta * b)))


# ---------------------------------------------------------------------------
# Integral equation
# ---------------------------------------------------------------------------


@dataclass
class RateSolution:
    a: float
    gamma_sigma: float
    theta: float
    t_grid: np.ndarray = field(repr=False)
    q_grid: np.ndarray = field(repr=False)
    q0: float
    residual_at_1: float
    integral_check: float
    rate: float
    _dense: object = field(default=None, repr=False)
    _switch: float = field(default=1e-4, repr=False)

    def q(self, t):
        """Evaluate the profile at ``t`` in [0, 1]."""
        t = np.asarray(t, dtype=float)
        return _profile(self._dense, self.a, self.gamma_sigma / self.theta**3, self._switch, t)

    def identity_residual(self, t: float) -> float:
        """``|q(t) - q(0) - a t^{1/3} + c int_0^t q^{-2}|``, quadrature done independently."""
        c = self.gamma_sigma / self.theta**3
        integral = _inv_sq_integral(self, t)
        return float(abs(self.q(t) - self.q0 - self.a * t ** (1 / 3) + c * integral))


def _local_w(tau: np.ndarray, a: float, c: float) -> np.ndarray:
    """Two-term expansion of ``w = q^3`` at ``1 - t = tau``."""
    tau = np.asarray(tau, dtype=float)
    return 3.0 * c * tau - 0.6 * a * (3.0 * c) ** (2 / 3) * tau ** (5 / 3)


def _profile(dense, a: float, c: float, switch: float, t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    out = np.empty_like(t)
    near = (1.0 - t) < switch
    if np.any(~near):
        w = dense(np.cbrt(t[~near]))
        out[~near] = np.cbrt(np.maximum(w, 0.0))
    if np.any(near):
        out[near] = np.cbrt(np.maximum(_local_w(1.0 - t[near], a, c), 0.0))
    return out


def _inv_sq_integral(sol: RateSolution, t: float) -> float:
    """``int_0^t q(x)^{-2} dx`` by adaptive quadrature on the returned profile."""
    with warnings.catch_warnings():
        # quad flags roundoff once it reaches ~1e-14; the check itself is at 1e-6
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        return _inv_sq_integral_raw(sol, t)


def _inv_sq_integral_raw(sol: RateSolution, t: float) -> float:
    c = sol.gamma_sigma / sol.theta**3
    t_sw = 1.0 - sol._switch
    upper = min(t, t_sw)
    val, _ = integrate.quad(lambda x: float(sol.q(x)) ** -2, 0.0, upper, limit=400, epsabs=1e-13, epsrel=1e-12)
    if t > t_sw:
        # near the endpoint q^-2 ~ (3c tau)^{-2/3}: algebraic weight handles the singularity
        g = lambda x: float(sol.q(x)) ** -2 * (1.0 - x) ** (2 / 3) if x < 1 else (3 * c) ** (-2 / 3)
        v2, _ = integrate.quad(g, t_sw, min(t, 1.0), weight="alg", wvar=(0.0, -2 / 3), epsabs=1e-14, epsrel=1e-12) \
            if t >= 1.0 else integrate.quad(lambda x: float(sol.q(x)) ** -2, t_sw, t, epsabs=1e-14, epsrel=1e-12)
        val += v2
    return float(val)


def _rhs(a: float, c: float):
    def f(s, w):
        return [3.0 * a * np.cbrt(abs(w[0])) ** 2 - 9.0 * c * s * s]
    return f


def shoot_forward(q0: float, a: float, gamma_sigma: float, theta: float) -> float:
    """``q(1)`` from forward integration started at ``q(0) = q0``.

    The cube-root map is extended oddly through ``w = 0`` (``|w|^{2/3}`` on the
    right-hand side), so the result is continuous and increasing in ``q0``:
    negative values mean the profile hit zero before ``t = 1``.
    """
    c = gamma_sigma / theta**3
    sol = integrate.solve_ivp(_rhs(a, c), (0.0, 1.0), [q0**3], method="DOP853", rtol=1e-12, atol=1e-14)
    return float(np.cbrt(sol.y[0, -1]))


def solve_q_shooting(a: float, gamma_sigma: float, theta: float, mesh: int = 10_000,
                     switch: float = 1e-4) -> RateSolution:
    """Solve the integral equation for ``0 <= a < a_c``; rate is ``-theta q(0)``.

    ``mesh`` sets the output grid ``t_k = 1 - (1 - k/M)^{3/2}``.
    """
    _positive(gamma_sigma=gamma_sigma, theta=theta)
    if not math.isfinite(a) or a < 0:
        raise RegimeError(f"a={a!r}: the integral equation is only solved for a >= 0")
    ac = critical_a(gamma_sigma, theta)
    if a >= ac:
        raise RegimeError(f"a={a!r} >= a_c={ac!r}: no positive solution")
    if mesh < 10:
        raise ConfigError("mesh must be >= 10")
    c = gamma_sigma / theta**3
    s_end = (1.0 - switch) ** (1 / 3)
    w_end = float(_local_w(switch, a, c))

    def hit_zero(s, w):
        return w[0]
    hit_zero.terminal = True
    hit_zero.direction = -1

    sol = integrate.solve_ivp(_rhs(a, c), (s_end, 0.0), [w_end], method="DOP853", rtol=1e-13, atol=1e-300,
                              dense_output=True, events=hit_zero)
    if sol.status == 1 or sol.y[0, -1] <= 0:
        raise RegimeError(f"profile reaches zero before t=0 at a={a!r}; a is too close to a_c={ac!r}")
    if not sol.success:
        raise NoRootError(f"backward integration failed: {sol.message}")
    dense = lambda s: sol.sol(np.asarray(s))[0]
    q0 = float(np.cbrt(sol.y[0, -1]))

    k = np.arange(mesh + 1)
    t_grid = 1.0 - (1.0 - k / mesh) ** 1.5
    t_grid[-1] = 1.0
    q_grid = _profile(dense, a, c, switch, t_grid)
    out = RateSolution(a=float(a), gamma_sigma=float(gamma_sigma), theta=float(theta), t_grid=t_grid,
                       q_grid=q_grid, q0=q0, residual_at_1=float(abs(q_grid[-1])), integral_check=math.nan,
                       rate=-theta * q0, _dense=dense, _switch=switch)
    out.integral_check = _inv_sq_integral(out, 1.0)
    if not math.isfinite(out.integral_check):
        raise RegimeError("integral of q^-2 diverges")
    return out


def solve_q_bisection(a: float, gamma_sigma: float, theta: float, tol: float = 1e-13) -> float:
    """``q(0)`` by bisection on forward shots over ``[1e-8, a + (3 gamma_sigma)^{1/3} / theta]``."""
    lo, hi = 1e-8, a + (3.0 * gamma_sigma) ** (1 / 3) / theta
    if shoot_forward(hi, a, gamma_sigma, theta) <= 0:
        raise NoRootError("upper end of the q(0) bracket does not overshoot")
    if shoot_forward(lo, a, gamma_sigma, theta) > 0:
        raise RegimeError("lower end of the q(0) bracket already overshoots; a >= a_c?")
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if shoot_forward(mid, a, gamma_sigma, theta) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def predicted_rate(a: float, alpha: float, gamma_sigma: float, theta: float) -> float:
    """Limit of ``log P(Y_n > 0) / n^{1/3}`` for the barrier ``-K_i/theta + a i^alpha``."""
    ac = critical_a(gamma_sigma, theta)
    if alpha < 1 / 3 - 1e-12:
        return rate_2b(gamma_sigma) if a >= 0 else math.nan
    if abs(alpha - 1 / 3) <= 1e-12:
        if a == 0:
            return rate_2b(gamma_sigma)
        if 0 < a < ac:
            return solve_q_shooting(a, gamma_sigma, theta).rate
        if a > ac:
            return 0.0
        return math.nan
    return 0.0 if a > 0 else math.nan


def sweep(a_values: Sequence[float], gamma_sigma: float, theta: float, mesh: int = 10_000) -> list[RateSolution]:
    return [solve_q_shooting(a, gamma_sigma, theta, mesh) for a in a_values]


def write_sweep_csv(path, solutions: Sequence[RateSolution], header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["a", "q0", "rate", "residual", "integral_check"])
        for s in solutions:
            w.writerow([f"{s.a:.17g}", f"{s.q0:.17g}", f"{s.rate:.17g}", f"{s.residual_at_1:.17g}",
                        f"{s.integral_check:.17g}"])
