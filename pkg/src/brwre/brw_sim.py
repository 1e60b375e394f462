"""Direct simulation of the branching system killed above a moving barrier.

The barrier at generation ``i`` is ``-K_i / theta + a i^alpha`` (random-centered),
``a i^alpha`` (fixed-centered) or ``-K_i / theta + a i`` (ray).  The root sits
at 0 in generation 0 and is never checked; children of generation ``i >= 1``
born above the barrier are removed together with their descendants.

Besides Monte Carlo, :func:`quenched_survival_probability` evaluates
``P_Lambda(Y_n > 0)`` for one environment by a backward recursion on a grid,
which reaches the tiny probabilities of the extinction-rate regime.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from . import _kernels
from .env_model import (BroodLaw, EnvironmentModel, GaussianBroodLaw, RealizedEnvironment, draw_environment,
                        enumerate_law)
from .errors import ConfigError, UnsupportedOperation
from .laplace_stats import ModelConstants, solve_theta_star
from .rng import parallel_map, stream

MODES = ("random-centered", "fixed-centered", "ray")
DEFAULT_CAP = 1_000_000


@dataclass(frozen=True)
class BarrierSpec:
    a: float
    alpha: float = 1 / 3
    mode: str = "random-centered"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"barrier mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.alpha <= 1:
            raise ConfigError("barrier alpha must lie in (0, 1]")
        if math.isnan(self.a) or self.a == -math.inf:
            raise ConfigError("barrier coefficient must be a number or +inf")

    def values(self, K: np.ndarray, theta: float, n: int) -> np.ndarray:
        """Barrier at generations ``0..n``; ``K`` holds ``K_0..K_n``."""
        i = np.arange(n + 1, dtype=float)
        if self.a == math.inf:
            return np.full(n + 1, math.inf)
        if self.mode == "ray":
            shape = self.a * i
        else:
            shape = self.a * i**self.alpha
        if self.mode == "fixed-centered":
            return shape
        return -np.asarray(K[: n + 1], dtype=float) / theta + shape


def ray_slope(b: float, n: int) -> float:
    """Slope ``b n^{-2/3}`` of the ray barrier used at horizon ``n``."""
    return b * n ** (-2 / 3)


@dataclass
class PopulationSnapshot:
    generation: int
    positions: np.ndarray
    m_n: float = math.inf
    truncated: bool = False
    parents: np.ndarray | None = field(default=None, repr=False)

    @property
    def y_n(self) -> int:
        return int(self.positions.size)

    @classmethod
    def root(cls, genealogy: bool = False) -> "PopulationSnapshot":
        return cls(0, np.zeros(1), 0.0, False, np.zeros(1, dtype=np.int64) - 1 if genealogy else None)


def step_generation(snapshot: PopulationSnapshot, law: BroodLaw, barrier_value: float, cap: int | float,
                    rng: np.random.Generator, genealogy: bool = False) -> PopulationSnapshot:
    """Reproduce every particle once, kill above ``barrier_value`` and cap the population.

    ``m_n`` is the minimum over all children before killing.  With
    ``genealogy=True`` the snapshot records the index of each survivor's parent.
    """
    if not cap >= 1:
        raise ConfigError("population cap must be at least 1")
    gen = snapshot.generation + 1
    if snapshot.y_n == 0:
        return PopulationSnapshot(gen, np.empty(0), math.inf, snapshot.truncated,
                                  np.empty(0, dtype=np.int64) if genealogy else None)
    counts, disp = law.sample_broods(rng, snapshot.y_n)
    parent = np.repeat(np.arange(snapshot.y_n), counts)
    children = snapshot.positions[parent] + disp
    m_n = float(children.min()) if children.size else math.inf
    keep = np.flatnonzero(children <= barrier_value)
    truncated = snapshot.truncated
    if keep.size > cap:
        keep = np.sort(rng.choice(keep, size=int(cap), replace=False))
        truncated = True
    return PopulationSnapshot(gen, children[keep], m_n, truncated, parent[keep] if genealogy else None)


def run_replica_numpy(env: RealizedEnvironment, barrier: np.ndarray, n: int, cap: int | float,
                      rng: np.random.Generator) -> PopulationSnapshot:
    snap = PopulationSnapshot.root()
    for i in range(1, n + 1):
        snap = step_generation(snap, env.laws[i - 1], barrier[i], cap, rng)
    return snap


# ---------------------------------------------------------------------------
# compiled path
# ---------------------------------------------------------------------------


def _law_tables(laws: Sequence[BroodLaw]):
    """Pack a sequence of Gaussian or finite laws for the compiled replica kernel."""
    n = len(laws)
    kind = np.empty(n, dtype=np.int64)
    mu = np.zeros(n)
    sigma = np.zeros(n)
    cnt_start = np.zeros(n, dtype=np.int64)
    cnt_len = np.zeros(n, dtype=np.int64)
    at_start = np.zeros(n, dtype=np.int64)
    at_len = np.zeros(n, dtype=np.int64)
    cnt_cdf, cnt_val, at_cdf, at_cnt, at_off, flat = [], [], [], [], [], []
    memo: dict[int, tuple] = {}
    npc = nat = nflat = 0
    for i, law in enumerate(laws):
        hit = memo.get(id(law))
        if hit is not None:
            kind[i], mu[i], sigma[i], cnt_start[i], cnt_len[i], at_start[i], at_len[i] = hit
            continue
        if isinstance(law, GaussianBroodLaw):
            cdf = np.cumsum(law.count_probs)
            cdf[-1] = 1.0
            cnt_cdf.append(cdf)
            cnt_val.append(law.count_values)
            entry = (_kernels.GAUSS, law.mu, law.sigma, npc, cdf.size, 0, 0)
            npc += cdf.size
        elif law.is_finite:
            atoms = enumerate_law(law)
            cdf = np.cumsum([p for p, _, _ in atoms])
            cdf[-1] = 1.0
            at_cdf.append(cdf)
            at_cnt.append([k for _, k, _ in atoms])
            offs = []
            for _, k, d in atoms:
                offs.append(nflat)
                flat.extend(d)
                nflat += k
            at_off.append(offs)
            entry = (_kernels.DISCRETE, 0.0, 0.0, 0, 0, nat, cdf.size)
            nat += cdf.size
        else:
            raise UnsupportedOperation(f"law {law.label!r} has no compiled sampler")
        memo[id(law)] = entry
        kind[i], mu[i], sigma[i], cnt_start[i], cnt_len[i], at_start[i], at_len[i] = entry

    def cat(parts, dt):
        return np.concatenate([np.asarray(p, dtype=dt) for p in parts]) if parts else np.zeros(1, dtype=dt)

    return (kind, cnt_start, cnt_len, cat(cnt_cdf, float), cat(cnt_val, np.int64), mu, sigma,
            at_start, at_len, cat(at_cdf, float), cat(at_cnt, np.int64), cat(at_off, np.int64), cat([flat], float))


def run_replica(env: RealizedEnvironment, barrier: np.ndarray, n: int, cap: int,
                rng: np.random.Generator) -> PopulationSnapshot:
    """One replica; compiled for Gaussian and finite laws, numpy otherwise."""
    try:
        tables = _law_tables(env.laws[:n])
    except UnsupportedOperation:
        return run_replica_numpy(env, barrier, n, cap, rng)
    cap_i = int(min(cap, np.iinfo(np.int64).max))
    pos, m_n, truncated, _ = _kernels.brw_replica(rng, n, *tables, np.asarray(barrier, dtype=float), cap_i)
    return PopulationSnapshot(n, pos, float(m_n), bool(truncated))


@dataclass
class SurvivalEstimate:
    n: int
    barrier: BarrierSpec
    p_survive_hat: float
    stderr: float
    y_n: np.ndarray = field(repr=False)
    m_n: np.ndarray = field(repr=False)
    truncated: np.ndarray = field(repr=False)

    @property
    def replicas(self) -> int:
        return int(self.y_n.size)

    @property
    def truncation_rate(self) -> float:
        return float(self.truncated.mean())

    def rows(self) -> list[list[str]]:
        return [[str(r), str(self.n), str(int(y)), f"{m:.17g}", str(int(y > 0)), str(int(t))]
                for r, (y, m, t) in enumerate(zip(self.y_n, self.m_n, self.truncated))]


def _resolve_theta(model: EnvironmentModel, constants: ModelConstants | None) -> float:
    return (constants or solve_theta_star(model)).theta_star


def estimate_survival(model: EnvironmentModel, barrier: BarrierSpec, n: int, replicas: int,
                      cap: int = DEFAULT_CAP, seed: int = 0, constants: ModelConstants | None = None,
                      threads: int | None = None) -> SurvivalEstimate:
    """Fraction of replicas with ``Y_n > 0``, each replica with a fresh environment."""
    if cap is None or not cap >= 1:
        raise ConfigError("population cap must be at least 1")
    if n < 1 or replicas < 1:
        raise ConfigError("need n >= 1 and replicas >= 1")
    theta = _resolve_theta(model, constants)

    def one(r: int):
        env = draw_environment(model, n, theta, seed, index=(r,))
        bar = barrier.values(env.K, theta, n)
        snap = run_replica(env, bar, n, cap, stream(seed, "branching", r))
        return snap.y_n, snap.m_n, snap.truncated

    res = parallel_map(one, range(replicas), threads)
    y = np.array([r[0] for r in res], dtype=np.int64)
    p = float(np.mean(y > 0))
    return SurvivalEstimate(n=n, barrier=barrier, p_survive_hat=p, stderr=math.sqrt(p * (1 - p) / replicas),
                            y_n=y, m_n=np.array([r[1] for r in res]), truncated=np.array([r[2] for r in res]))


def write_survival_csv(path, estimates: Sequence[SurvivalEstimate], header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replica", "n", "y_n", "m_n", "survived", "truncated"])
        for est in estimates:
            w.writerows(est.rows())


# ---------------------------------------------------------------------------
# quenched survival by backward recursion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RecursionGrid:
    h: float = 0.02
    depth: float = 50.0  # grid covers z in [-depth, 0] below the barrier
    # the cut at z = 0 makes the scheme first order in h; extrapolate from h and h / 2
    richardson: bool = True

    def validate(self) -> None:
        if not (self.h > 0 and self.depth > 10 * self.h):
            raise ConfigError("recursion grid needs h > 0 and depth > 10 h")


def _kernel_weights(law: GaussianBroodLaw, shift: float, h: float) -> tuple[np.ndarray, int]:
    """Cell masses of ``zeta - shift`` on offsets ``k h``, ``k = -r..r``."""
    m = law.mu - shift
    lo = math.floor((m - 9 * law.sigma) / h)
    hi = math.ceil((m + 9 * law.sigma) / h)
    k = np.arange(lo, hi + 1)
    w = ndtr(((k + 0.5) * h - m) / law.sigma) - ndtr(((k - 0.5) * h - m) / law.sigma)
    return w, int(lo)


def _one_minus_pgf(law: BroodLaw, m: np.ndarray) -> np.ndarray:
    """``1 - E[(1 - m)^N]`` without cancellation for small ``m``."""
    with np.errstate(divide="ignore"):
        lg = np.log1p(-m)  # -inf where m = 1, and then every brood survives
    out = np.zeros_like(m)
    for k, p in zip(law.count_values, law.count_probs):
        if k > 0 and p > 0:
            out += p * -np.expm1(k * lg)
    return out


def quenched_survival_probability(env: RealizedEnvironment, barrier: np.ndarray, n: int,
                                  grid: RecursionGrid | None = None) -> float:
    """``P_Lambda(Y_n > 0)`` for the root at 0, by backward recursion.

    In the coordinate ``z = x - barrier(i)`` let ``u_i(z)`` be the probability
    that a particle at generation ``i`` has a descendant alive at generation
    ``n``.  Then ``u_n = 1`` on ``z <= 0`` and ``u_i(z) = 1 - E prod_j (1 -
    v(z + zeta_j - d_i))`` with ``v = u_{i+1} 1{z <= 0}`` and ``d_i =
    barrier(i+1) - barrier(i)``.  Values below the grid are clamped to the
    deepest grid value, where survival is already close to its unkilled level.
    """
    grid = grid or RecursionGrid()
    grid.validate()
    bar = np.asarray(barrier, dtype=float)
    if np.any(~np.isfinite(bar[1 : n + 1])):
        raise ConfigError("recursion needs a finite barrier")
    coarse = _survival_on_grid(env, bar, n, grid.h, grid.depth)
    if not grid.richardson:
        return coarse
    fine = _survival_on_grid(env, bar, n, grid.h / 2, grid.depth)
    if coarse <= 0 or fine <= 0:
        return fine
    # extrapolate log p: the probabilities of interest span many orders of magnitude
    return float(math.exp(2 * math.log(fine) - math.log(coarse)))


def _survival_on_grid(env: RealizedEnvironment, bar: np.ndarray, n: int, h: float, depth: float) -> float:
    nz = int(round(depth / h)) + 1
    z = -h * np.arange(nz)[::-1]  # z[-1] = 0
    u = np.ones(nz)
    for i in range(n - 1, -1, -1):
        law = env.laws[i]
        d = bar[i + 1] - bar[i]
        if isinstance(law, GaussianBroodLaw):
            w, lo = _kernel_weights(law, d, h)
            # m(z_j) = sum_k w_k v(z_j + (lo + k) h); pad v with the clamp value on the left, 0 on the right
            r = w.size
            left = max(0, -lo)
            right = max(0, lo + r)
            vpad = np.concatenate([np.full(left, u[0]), u, np.zeros(right)])
            full = np.convolve(vpad, w[::-1], mode="valid")
            start = left + lo
            m = full[start : start + nz]
            u = _one_minus_pgf(law, np.clip(m, 0.0, 1.0))
        elif law.is_finite:
            prod = np.zeros(nz)
            for p, k, disp in enumerate_law(law):
                if p == 0:
                    continue
                lg = np.zeros(nz)
                for zeta in disp:
                    y = z + zeta - d
                    v = np.interp(y, z, u, left=u[0], right=0.0)
                    v[y > 0] = 0.0
                    with np.errstate(divide="ignore"):
                        lg += np.log1p(-v)
                prod += p * -np.expm1(lg)
            u = prod
        else:
            raise UnsupportedOperation(f"law {law.label!r}: recursion needs Gaussian or finite laws")
    # root at x = 0, i.e. z = -barrier(0)
    z0 = -bar[0]
    if z0 > 0:
        return 0.0
    return float(np.interp(z0, z, u, left=u[0]))


@dataclass
class RatePoint:
    n: int
    p_hat: float
    normalized_rate: float
    predicted_rate: float
    one_sided: bool
    method: str
    replicas: int


def estimate_extinction_rate(model: EnvironmentModel, barrier: BarrierSpec, n_grid: Sequence[int],
                             replicas: int, seed: int = 0, constants: ModelConstants | None = None,
                             gamma_sigma: float | None = None, method: str = "mc", cap: int = DEFAULT_CAP,
                             grid: RecursionGrid | None = None, threads: int | None = None) -> list[RatePoint]:
    """``log P(Y_n > 0) / n^{1/3}`` along ``n_grid`` with the matching prediction.

    ``method="mc"`` counts surviving replicas; ``method="recursion"`` averages
    the quenched survival probability over ``replicas`` environments (one
    environment suffices for a degenerate model).  When no replica survives the
    point is the one-sided bound ``log(3 / replicas) / n^{1/3}``.
    """
    from . import rate_solver

    if method not in ("mc", "recursion"):
        raise ConfigError("method must be 'mc' or 'recursion'")
    constants = constants or solve_theta_star(model)
    theta = constants.theta_star
    if gamma_sigma is None:
        gamma_sigma = constants.gamma_sigma
    if gamma_sigma is None and constants.sigma_A == 0:
        gamma_sigma = constants.sigma_Q**2 * math.pi**2 / 2
    out = []
    for n in n_grid:
        if method == "mc":
            est = estimate_survival(model, barrier, n, replicas, cap, seed, constants, threads)
            hits = int((est.y_n > 0).sum())
            p, reps = est.p_survive_hat, replicas
        else:
            reps = 1 if model.degenerate else replicas

            def one(r: int) -> float:
                env = draw_environment(model, n, theta, seed, index=(r,))
                return quenched_survival_probability(env, barrier.values(env.K, theta, n), n, grid)

            p = float(np.mean(parallel_map(one, range(reps), threads)))
            hits = int(p > 0)
        one_sided = hits == 0
        if one_sided:
            p = 3.0 / reps if method == "mc" else 0.0
        rate = math.log(p) / n ** (1 / 3) if p > 0 else -math.inf
        pred = math.nan
        if gamma_sigma is not None:
            if barrier.mode == "ray":
                b = barrier.a * n ** (2 / 3)
                pred = -rate_solver.x_b_root(b, gamma_sigma, theta).x_b if b > 0 else math.nan
            elif barrier.mode == "random-centered":
                pred = rate_solver.predicted_rate(barrier.a, barrier.alpha, gamma_sigma, theta)
        out.append(RatePoint(n=int(n), p_hat=p, normalized_rate=rate, predicted_rate=pred, one_sided=one_sided,
                             method=method, replicas=reps))
    return out


def write_rate_csv(path, points: Sequence[RatePoint], header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "method", "replicas", "p_hat", "normalized_rate", "predicted_rate", "one_sided"])
        for p in points:
            w.writerow([p.n, p.method, p.replicas, f"{p.p_hat:.17g}", f"{p.normalized_rate:.17g}",
                        f"{p.predicted_rate:.17g}", int(p.one_sided)])
