"""Quenched decay rate of a Brownian motion kept in a tube around another one.

``gamma(beta)`` is the a.s. limit of ``-log P(|B_s - beta W_s| <= 1/2, s <= t | W) / t``
for independent standard Brownian motions ``B`` and ``W``.  Conditionally on a
sampled ``W`` the density of ``x = B - beta W`` is propagated on a grid of
cells tiling the tube and killed at the walls.

Killing only at grid times makes the tube look wider by roughly
``0.58 sqrt(dt)`` per wall (about 20% bias on gamma(0) at dt = 0.01), so by
default every transition is multiplied by the probability that the Brownian
bridge of ``x`` between consecutive grid points stays inside.  Given the
endpoints, ``x`` over one step is a bridge with diffusivity ``1 + beta^2``
(``B`` free, ``W`` pinned at both ends).
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, NumericalError
from .laplace_stats import ModelConstants
from .rng import parallel_map, stream

PI2_HALF = math.pi**2 / 2


@dataclass(frozen=True)
class GammaParams:
    horizon: float = 50.0
    dt: float = 0.01
    grid: int = 201
    replicas: int = 20
    fit_start: float = 0.5  # regression over [fit_start * horizon, horizon]
    bridge: bool = True
    seed: int = 0

    def validate(self) -> None:
        if not (self.horizon > 0 and self.dt > 0):
            raise ConfigError("gamma: horizon and dt must be positive")
        if self.grid < 51:
            raise ConfigError("gamma: grid must have at least 51 cells")
        if self.replicas < 2:
            raise ConfigError("gamma: need at least 2 replicas for a standard error")
        if not 0 <= self.fit_start < 1:
            raise ConfigError("gamma: fit_start must lie in [0, 1)")
        if round(self.horizon / self.dt) < 10:
            raise ConfigError("gamma: horizon must span at least 10 steps")


@dataclass
class GammaEstimate:
    beta: float
    value: float
    stderr: float
    params: GammaParams
    slopes: np.ndarray = field(repr=False)
    final_log_mass: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"beta": self.beta, "value": self.value, "stderr": self.stderr, "params": asdict(self.params)}


class _TubeKernel:
    """Transition operator on ``grid`` cells of a tube of the given width."""

    def __init__(self, dt: float, grid: int, width: float, beta: float, bridge: bool):
        sd = math.sqrt(dt)
        h = width / grid
        # +-5 std of one step must fit in the tube, otherwise single steps routinely
        # jump wall to wall and the grid-time scheme says nothing about the tube
        if 5 * sd > width:
            raise NumericalError(f"dt={dt} too large for a tube of width {width}")
        self.sd = sd
        self.h = h
        self.grid = grid
        self.x = -width / 2 + h * (np.arange(grid) + 0.5)
        self.offsets = np.arange(-(grid - 1), grid) * h
        self.index = np.arange(grid)[None, :] - np.arange(grid)[:, None] + (grid - 1)
        if bridge:
            diff = 1.0 + beta**2
            up = width / 2 - self.x
            dn = self.x + width / 2
            self.bridge = ((-np.expm1(-2 * np.outer(up, up) / (diff * dt)))
                           * (-np.expm1(-2 * np.outer(dn, dn) / (diff * dt))))
        else:
            self.bridge = None

    def matrix(self, shift: float) -> np.ndarray:
        """``M[j, i]``: mass moving from cell ``j`` into cell ``i`` when the mean move is ``shift``."""
        hi = (self.offsets + self.h / 2 - shift) / self.sd
        lo = (self.offsets - self.h / 2 - shift) / self.sd
        m = (ndtr(hi) - ndtr(lo))[self.index]
        if self.bridge is not None:
            m *= self.bridge
        return m


def quenched_tube_mass(w_increments: Sequence[float], dt: float, grid: int = 201, beta: float = 1.0,
                       width: float = 1.0, bridge: bool = True, log: bool = False) -> np.ndarray:
    """Surviving mass after each step for one driving path ``W``.

    Starts from a point mass at the tube centre.  Each step applies the
    Gaussian move of ``x = B - beta W`` (mean ``-beta dW_k``, variance ``dt``)
    and discards what leaves ``[-width/2, width/2]``.  Mass is renormalized
    every step and the logs accumulated; with ``log=True`` the log-masses are
    returned, which never underflow.
    """
    if not dt > 0:
        raise ConfigError("dt must be positive")
    if grid < 51:
        raise ConfigError("grid must have at least 51 cells")
    if grid % 2 == 0:
        raise ConfigError("grid must be odd so that a cell is centred on 0")
    dw = np.asarray(w_increments, dtype=float)
    kern = _TubeKernel(dt, grid, width, beta, bridge)
    mass = np.zeros(grid)
    mass[grid // 2] = 1.0
    out = np.empty(dw.size)
    acc = 0.0
    for k, d in enumerate(dw):
        mass = mass @ kern.matrix(-beta * d)
        tot = mass.sum()
        if not tot > 0:
            raise NumericalError(f"surviving mass vanished at step {k + 1}")
        acc += math.log(tot)
        mass /= tot
        out[k] = acc
    return out if log else np.exp(out)


def _replica_slope(beta: float, params: GammaParams, r: int, width: float = 1.0) -> tuple[float, float]:
    n = int(round(params.horizon / params.dt))
    rng = stream(params.seed, "gamma-W", r)
    dw = rng.standard_normal(n) * math.sqrt(params.dt)
    logm = quenched_tube_mass(dw, params.dt, params.grid, beta, width, params.bridge, log=True)
    t = params.dt * np.arange(1, n + 1)
    sel = t >= params.fit_start * params.horizon
    if sel.sum() < 2:
        raise ConfigError("regression window holds fewer than two steps")
    slope = np.polyfit(t[sel], logm[sel], 1)[0]
    return float(-slope), float(logm[-1])


def estimate_gamma(beta: float, params: GammaParams | None = None, threads: int | None = None,
                   width: float = 1.0) -> GammaEstimate:
    """Replica mean of the fitted decay slopes, with its standard error.

    ``width`` other than 1 is a test mode: with ``beta = 0`` the rate is then
    ``pi^2 / (2 width^2)``.
    """
    params = params or GammaParams()
    params.validate()
    if not math.isfinite(beta):
        raise ConfigError("beta must be finite")
    res = parallel_map(lambda r: _replica_slope(beta, params, r, width), range(params.replicas), threads)
    slopes = np.array([s for s, _ in res])
    final = np.array([f for _, f in res])
    return GammaEstimate(beta=float(beta), value=float(slopes.mean()),
                         stderr=float(slopes.std(ddof=1) / math.sqrt(slopes.size)),
                         params=params, slopes=slopes, final_log_mass=final)


def gamma_sigma(constants: ModelConstants, params: GammaParams | None = None,
                threads: int | None = None) -> float:
    """``sigma_Q^2 gamma(sigma_A / sigma_Q)``; exact ``sigma_Q^2 pi^2 / 2`` when ``sigma_A = 0``."""
    if not constants.sigma_Q > 0:
        raise ConfigError("sigma_Q must be positive")
    if constants.sigma_A == 0:
        return constants.sigma_Q**2 * PI2_HALF
    est = estimate_gamma(constants.sigma_A / constants.sigma_Q, params, threads)
    return constants.sigma_Q**2 * est.value


def lower_bound(beta: float) -> float:
    """``pi^2 (1 + beta^2) / 2``, a lower bound for gamma(beta)."""
    return PI2_HALF * (1 + beta**2)


def write_slopes_csv(path, estimates: Sequence[GammaEstimate], header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replica", "beta", "slope", "mass_final_log"])
        for est in estimates:
            for r, (s, f) in enumerate(zip(est.slopes, est.final_log_mass)):
                w.writerow([r, f"{est.beta:.17g}", f"{s:.17g}", f"{f:.17g}"])
