"""The tilted walk behind the many-to-one formula, and tube probabilities for it.

Tilting a reproduction law at ``theta`` picks one child of a brood with
probability proportional to ``exp(-theta * zeta)``.  The result is a joint law
of a step ``X`` and a mark ``xi`` (the size of the brood the child came from),
normalized by ``exp(kappa(theta))``.  Along a realized environment these steps
build ``S_n`` and the associated walk ``T_n = theta S_n + K_n``.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .env_model import (BroodLaw, EnvironmentModel, FiniteBroodLaw, GaussianBroodLaw, GaussianFamily,
                        MixtureEnvironment, RealizedEnvironment, SampledBroodLaw, draw_environment,
                        enumerate_law, law_kappa)
from .errors import ConfigError, DomainError, UnsupportedOperation
from .rng import parallel_map, stream

MASS_TOL = 1e-12
DEFAULT_CAP_EXPONENT = 0.32


# ---------------------------------------------------------------------------
# Tilted step laws
# ---------------------------------------------------------------------------


@dataclass
class TiltedStepLaw:
    """Joint law of ``(X, xi)`` obtained by tilting ``source`` at ``theta``.

    ``kind == "discrete"``: atoms ``values`` / ``marks`` / ``probs``.
    ``kind == "gaussian"``: ``X ~ Normal(mean_x, sd_x^2)`` independent of the
    mark, whose pmf is ``mark_probs`` over ``mark_values``.
    """

    source: BroodLaw
    theta: float
    log_normalizer: float
    kind: str
    values: np.ndarray | None = None
    marks: np.ndarray | None = None
    probs: np.ndarray | None = None
    mean_x: float = math.nan
    sd_x: float = math.nan
    mark_values: np.ndarray | None = None
    mark_probs: np.ndarray | None = None

    @property
    def normalizer(self) -> float:
        return math.exp(self.log_normalizer)

    @property
    def total_mass(self) -> float:
        if self.kind == "discrete":
            return float(self.probs.sum())
        return float(self.mark_probs.sum())

    @property
    def mean(self) -> float:
        if self.kind == "discrete":
            return float(np.dot(self.probs, self.values))
        return self.mean_x

    @property
    def variance(self) -> float:
        if self.kind == "discrete":
            m = self.mean
            return float(np.dot(self.probs, (self.values - m) ** 2))
        return self.sd_x**2

    @property
    def max_mark(self) -> int:
        return int(self.marks.max() if self.kind == "discrete" else self.mark_values.max())

    def mark_pmf(self) -> dict[int, float]:
        if self.kind == "gaussian":
            return {int(k): float(p) for k, p in zip(self.mark_values, self.mark_probs)}
        out: dict[int, float] = {}
        for k, p in zip(self.marks, self.probs):
            out[int(k)] = out.get(int(k), 0.0) + float(p)
        return out

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        """``size`` independent draws of ``(X, xi)``."""
        if self.kind == "discrete":
            cdf = np.cumsum(self.probs)
            idx = np.minimum(np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right"), cdf.size - 1)
            return self.values[idx], self.marks[idx]
        x = self.mean_x + self.sd_x * rng.standard_normal(size)
        cdf = np.cumsum(self.mark_probs)
        idx = np.minimum(np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right"), cdf.size - 1)
        return x, self.mark_values[idx]

    def increment_mean(self) -> float:
        """Quenched mean of the associated-walk step ``theta X + kappa(theta)``."""
        return self.theta * self.mean + self.log_normalizer


def _discrete_tilt(law: BroodLaw, theta: float, kappa: float, children: Sequence[tuple[float, float, int]]):
    acc: dict[tuple[float, int], float] = {}
    for logp, z, k in children:
        key = (z, k)
        acc[key] = acc.get(key, 0.0) + math.exp(logp - theta * z - kappa)
    keys = sorted(acc)
    return TiltedStepLaw(
        source=law, theta=theta, log_normalizer=kappa, kind="discrete",
        values=np.array([z for z, _ in keys], dtype=float),
        marks=np.array([k for _, k in keys], dtype=np.int64),
        probs=np.array([acc[key] for key in keys], dtype=float),
    )


def tilt_law(law: BroodLaw, theta: float) -> TiltedStepLaw:
    """Tilt one reproduction law.

    Finite laws are tilted atom by atom.  For normal displacements the tilted
    displacement is ``Normal(mu - theta sigma^2, sigma^2)`` and, because
    displacements are i.i.d. given the count, the mark is the size-biased
    count ``P(xi = k) = k p_k / E N`` independently of ``X``.  Sampled laws are
    tilted exactly on their fixed pool.
    """
    try:
        kappa = law_kappa(law, theta, 0)
    except DomainError as exc:
        raise DomainError(f"cannot tilt {law.label!r} at theta={theta}: {exc}") from exc
    if isinstance(law, GaussianBroodLaw):
        vals = law.count_values
        w = vals * law.count_probs
        keep = w > 0
        return TiltedStepLaw(source=law, theta=theta, log_normalizer=kappa, kind="gaussian",
                             mean_x=law.mu - theta * law.sigma**2, sd_x=law.sigma,
                             mark_values=vals[keep].astype(np.int64), mark_probs=w[keep] / w.sum())
    if law.is_finite:
        children = [(math.log(p), z, len(d)) for p, _, d in enumerate_law(law) for z in d if p > 0]
        return _discrete_tilt(law, theta, kappa, children)
    if isinstance(law, SampledBroodLaw):
        counts, flat, parent = law.pool
        logp = -math.log(law.pool_size)
        e = -theta * flat - kappa + logp
        probs = np.exp(e)
        return TiltedStepLaw(source=law, theta=theta, log_normalizer=kappa, kind="discrete",
                             values=flat.copy(), marks=counts[parent].astype(np.int64), probs=probs)
    raise UnsupportedOperation(f"no tilt available for law type {type(law).__name__}")


# ---------------------------------------------------------------------------
# Many-to-one enumeration
# ---------------------------------------------------------------------------

MAX_ENUM_DEPTH = 4


def _check_caps(caps: Sequence[float] | None, n: int) -> list[float]:
    if caps is None:
        return [math.inf] * n
    caps = [float(c) for c in caps]
    if len(caps) < n:
        raise ConfigError(f"need {n} caps, got {len(caps)}")
    if any(not c > 0 for c in caps):
        raise ConfigError("caps must be positive")
    return caps[:n]


def tree_expectation(env: RealizedEnvironment, n: int, f: Callable[[tuple[float, ...]], float],
                     caps: Sequence[float] | None = None) -> float:
    """``E[sum_{|u|=n} f(V(u_1..u_n)) prod_i 1{N(u_{i-1}) <= A_i}]`` by enumerating broods.

    By linearity the expected sum over the tree is a sum over chains of
    (brood outcome, chosen child) with the outcome probabilities of the
    untilted laws.
    """
    caps = _check_caps(caps, n)
    tables = [enumerate_law(env.laws[i]) for i in range(n)]

    def rec(i: int, path: tuple[float, ...], prob: float) -> float:
        if i == n:
            return prob * f(path)
        x = path[-1] if path else 0.0
        total = 0.0
        for p, k, disp in tables[i]:
            if k > caps[i] or p == 0:
                continue
            for z in disp:
                total += rec(i + 1, path + (x + z,), prob * p)
        return total

    return rec(0, (), 1.0)


def tilted_expectation(env: RealizedEnvironment, n: int, f: Callable[[tuple[float, ...]], float],
                       caps: Sequence[float] | None = None) -> float:
    """``E_tau[exp(theta S_n + K_n) f(S_1..S_n) prod_i 1{xi_i <= A_i}]`` by enumerating tilted paths."""
    caps = _check_caps(caps, n)
    theta = env.theta
    laws = [tilt_law(env.laws[i], theta) for i in range(n)]
    for t in laws:
        if t.kind != "discrete":
            raise UnsupportedOperation("tilted enumeration needs finite-support laws")
    atoms = [list(zip(t.probs, t.values, t.marks)) for t in laws]
    total = 0.0
    for combo in itertools.product(*atoms):
        if any(k > caps[i] for i, (_, _, k) in enumerate(combo)):
            continue
        prob = math.prod(p for p, _, _ in combo)
        path = tuple(itertools.accumulate(x for _, x, _ in combo))
        total += prob * math.exp(theta * path[-1] + env.K[n]) * f(path)
    return total


@dataclass(frozen=True)
class ManyToOneResult:
    lhs: float
    rhs: float
    gap: float

    @property
    def relative_gap(self) -> float:
        return self.gap / max(1.0, abs(self.lhs))


def many_to_one_check(env: RealizedEnvironment, n: int, f: Callable[[tuple[float, ...]], float],
                      caps: Sequence[float] | None = None) -> ManyToOneResult:
    """Compare tree enumeration with tilted-walk enumeration on the first ``n`` laws."""
    if n < 1 or n > MAX_ENUM_DEPTH:
        raise ConfigError(f"enumeration depth must be in 1..{MAX_ENUM_DEPTH}, got {n}")
    if len(env) < n:
        raise ConfigError(f"environment has {len(env)} laws, need {n}")
    for i in range(n):
        if not env.laws[i].is_finite:
            raise UnsupportedOperation(f"law {env.laws[i].label!r} at index {i + 1} has no finite support")
    lhs = tree_expectation(env, n, f, caps)
    rhs = tilted_expectation(env, n, f, caps)
    return ManyToOneResult(lhs=lhs, rhs=rhs, gap=abs(lhs - rhs))


def m2o_fixtures() -> dict[str, list[BroodLaw]]:
    """Finite-support law sequences used by the enumeration checks."""
    binary_pm = FiniteBroodLaw.deterministic([1.0, -1.0], label="binary+-1")
    binary_zero = FiniteBroodLaw.deterministic([0.0, 0.0], label="binary0")
    ternary = FiniteBroodLaw.deterministic([-1.0, 0.0, 1.0], label="ternary")
    random_count = FiniteBroodLaw([(0.2, (0.5,)), (0.5, (-0.3, 1.1)), (0.3, (-1.0, 0.0, 0.7))], label="random-count")
    iid = FiniteBroodLaw.iid({1: 0.25, 2: 0.5, 3: 0.25}, {-1.0: 0.5, 0.5: 0.3, 2.0: 0.2}, label="iid")
    childless = FiniteBroodLaw([(0.1, ()), (0.9, (-0.5, 0.25))], label="with-extinction")
    return {
        "binary-zero": [binary_zero] * 4,
        "binary-pm": [binary_pm] * 4,
        "two-law": [binary_pm, ternary, binary_pm, ternary],
        "random-count": [random_count, iid, random_count, iid],
        "with-extinction": [childless, iid, childless, ternary],
    }


def m2o_functionals() -> dict[str, Callable[[tuple[float, ...]], float]]:
    return {
        "one": lambda p: 1.0,
        "exp-last": lambda p: math.exp(-p[-1]),
        "stay-below-0": lambda p: float(all(x <= 0 for x in p)),
        "max-square": lambda p: max(p) ** 2,
    }


# ---------------------------------------------------------------------------
# Associated walk
# ---------------------------------------------------------------------------


@dataclass
class AssociatedWalkPath:
    environment: RealizedEnvironment
    T: np.ndarray
    xi: np.ndarray
    S: np.ndarray = field(repr=False, default=None)


def sample_associated_walk(env: RealizedEnvironment, n: int, seed: int, index: Sequence[int] = ()) -> AssociatedWalkPath:
    """One path of ``T_i = theta S_i + K_i``, ``i = 0..n``, along ``env``."""
    if n < 0 or n > len(env):
        raise ConfigError(f"walk length {n} outside 0..{len(env)}")
    rng = stream(seed, "associated-walk", *index)
    cache: dict[int, TiltedStepLaw] = {}
    x = np.empty(n)
    xi = np.empty(n, dtype=np.int64)
    for i in range(n):
        law = env.laws[i]
        t = cache.get(id(law))
        if t is None:
            t = cache[id(law)] = tilt_law(law, env.theta)
        xs, ks = t.sample(rng, 1)
        x[i], xi[i] = xs[0], ks[0]
    S = np.concatenate([[0.0], np.cumsum(x)])
    T = env.theta * S + env.K[: n + 1]
    return AssociatedWalkPath(environment=env, T=T, xi=xi, S=S)


# ---------------------------------------------------------------------------
# Step tables: the associated-walk increment of a whole model
# ---------------------------------------------------------------------------


@dataclass
class StepTables:
    """Increments ``theta X + kappa`` of the associated walk as a finite mixture.

    Used by the compiled tube kernel and by annealed samplers.
    """

    comp_weights: np.ndarray
    comp_kind: np.ndarray
    g_mean: np.ndarray
    g_sd: np.ndarray
    g_mark_max: np.ndarray
    mark_cdf: np.ndarray
    mark_val: np.ndarray
    d_start: np.ndarray
    d_len: np.ndarray
    d_cdf: np.ndarray
    d_val: np.ndarray
    d_mark: np.ndarray

    @property
    def quenched_means(self) -> np.ndarray:
        out = self.g_mean.copy()
        for c in range(out.size):
            if self.comp_kind[c] == _kernels.DISCRETE:
                s, m = self.d_start[c], self.d_len[c]
                pmf = np.diff(np.concatenate([[0.0], self.d_cdf[s:s + m]]))
                out[c] = float(np.dot(pmf, self.d_val[s:s + m]))
        return out

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        """``size`` annealed draws: returns the increments and their components."""
        cdf = np.cumsum(self.comp_weights)
        comp = np.minimum(np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right"), cdf.size - 1)
        inc = np.empty(size)
        for c in np.unique(comp):
            sel = comp == c
            k = int(sel.sum())
            if self.comp_kind[c] == _kernels.GAUSS:
                inc[sel] = self.g_mean[c] + self.g_sd[c] * rng.standard_normal(k)
            else:
                s, m = self.d_start[c], self.d_len[c]
                j = np.minimum(np.searchsorted(self.d_cdf[s:s + m], rng.random(k), side="right"), m - 1)
                inc[sel] = self.d_val[s + j]
        return inc, comp


def _components(model: EnvironmentModel, theta: float) -> list[tuple[float, TiltedStepLaw | tuple[float, float, np.ndarray, np.ndarray]]]:
    if isinstance(model, GaussianFamily):
        # theta X + kappa = theta sigma Z + log E N - theta^2 sigma^2 / 2: the mean mu cancels
        out = []
        for cw, c in zip(model.count_weights, model.count_laws):
            vals = np.asarray(c.values, dtype=np.int64)
            w = vals * np.asarray(c.probs)
            keep = w > 0
            en = float(w.sum())
            for sw, s in zip(model.sigma_weights, model.sigma_values):
                out.append((cw * sw, (math.log(en) - 0.5 * theta**2 * s**2, theta * s,
                                      vals[keep], w[keep] / en)))
        return out
    if isinstance(model, MixtureEnvironment):
        return [(w, tilt_law(law, theta)) for w, law in zip(model.weights, model.laws)]
    raise UnsupportedOperation(f"no step tables for {type(model).__name__}")


def step_tables(model: EnvironmentModel, theta: float) -> StepTables:
    comps = _components(model, theta)
    nc = len(comps)
    kind = np.empty(nc, dtype=np.int64)
    g_mean = np.zeros(nc)
    g_sd = np.zeros(nc)
    g_mark_max = np.zeros(nc)
    mark_rows: list[tuple[np.ndarray, np.ndarray]] = []
    d_start = np.zeros(nc, dtype=np.int64)
    d_len = np.zeros(nc, dtype=np.int64)
    d_cdf, d_val, d_mark = [], [], []
    pos = 0
    for c, (_, comp) in enumerate(comps):
        if isinstance(comp, tuple) or comp.kind == "gaussian":
            if isinstance(comp, tuple):
                mean, sd, mv, mp = comp
            else:
                mean, sd = theta * comp.mean_x + comp.log_normalizer, theta * comp.sd_x
                mv, mp = comp.mark_values, comp.mark_probs
            kind[c] = _kernels.GAUSS
            g_mean[c], g_sd[c], g_mark_max[c] = mean, sd, float(mv.max())
            mark_rows.append((mv, mp))
        else:
            kind[c] = _kernels.DISCRETE
            p = comp.probs / comp.probs.sum()
            d_start[c], d_len[c] = pos, p.size
            cdf = np.cumsum(p)
            cdf[-1] = 1.0
            d_cdf.append(cdf)
            d_val.append(theta * comp.values + comp.log_normalizer)
            d_mark.append(comp.marks.astype(float))
            pos += p.size
            mark_rows.append((np.zeros(1, dtype=np.int64), np.ones(1)))
    width = max(r[0].size for r in mark_rows)
    mark_cdf = np.ones((nc, width))
    mark_val = np.zeros((nc, width))
    for c, (mv, mp) in enumerate(mark_rows):
        cdf = np.cumsum(mp)
        cdf[-1] = 1.0
        mark_cdf[c, : cdf.size] = cdf
        mark_val[c, : mv.size] = mv
        mark_val[c, mv.size:] = mv[-1]
    cat = lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(1, dtype=dt)
    weights = np.array([w for w, _ in comps], dtype=float)
    return StepTables(comp_weights=weights / weights.sum(), comp_kind=kind, g_mean=g_mean, g_sd=g_sd,
                      g_mark_max=g_mark_max, mark_cdf=mark_cdf, mark_val=mark_val, d_start=d_start, d_len=d_len,
                      d_cdf=cat(d_cdf, float), d_val=cat(d_val, float), d_mark=cat(d_mark, float))


@dataclass(frozen=True)
class AnnealedStepSample:
    increments: np.ndarray
    quenched_means: np.ndarray

    @property
    def mean(self) -> tuple[float, float]:
        x = self.increments
        return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))

    @property
    def quenched_variance(self) -> tuple[float, float]:
        """Estimate of ``E Var_L(T_1)`` with its standard error."""
        d2 = (self.increments - self.quenched_means) ** 2
        return float(d2.mean()), float(d2.std(ddof=1) / math.sqrt(d2.size))


def annealed_first_step(model: EnvironmentModel, theta: float, draws: int, seed: int = 0) -> AnnealedStepSample:
    """``T_1`` over ``draws`` fresh environments, with the quenched means ``E_L T_1``."""
    if draws < 2:
        raise ConfigError("need at least 2 draws")
    rng = stream(seed, "annealed-step")
    try:
        tables = step_tables(model, theta)
    except UnsupportedOperation:
        laws = model.draw_many(rng, draws)
        cache: dict[int, TiltedStepLaw] = {}
        inc = np.empty(draws)
        qm = np.empty(draws)
        for i, law in enumerate(laws):
            t = cache.get(id(law))
            if t is None:
                t = cache[id(law)] = tilt_law(law, theta)
            x, _ = t.sample(rng, 1)
            inc[i] = theta * x[0] + t.log_normalizer
            qm[i] = t.increment_mean()
        return AnnealedStepSample(inc, qm)
    inc, comp = tables.sample(rng, draws)
    return AnnealedStepSample(inc, tables.quenched_means[comp])


# ---------------------------------------------------------------------------
# Tubes
# ---------------------------------------------------------------------------


def _as_knots(profile) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(profile, (int, float)):
        return np.array([0.0, 1.0]), np.array([float(profile)] * 2)
    s = np.array([float(p[0]) for p in profile])
    v = np.array([float(p[1]) for p in profile])
    if s.size < 2 or s[0] != 0.0 or s[-1] != 1.0 or np.any(np.diff(s) <= 0):
        raise ConfigError("profile knots must be increasing from s=0 to s=1")
    return s, v


@dataclass
class TubeSpec:
    """Corridor ``[g(s) n^alpha, h(s) n^alpha]`` for the walk on ``s = i / n``.

    ``g`` and ``h`` are constants or lists of ``(s, value)`` knots joined
    linearly.  ``entry`` defaults to ``[g(0), h(0)]`` and the walk starts at its
    midpoint, or at ``h(0)`` in ``start="boundary"`` mode.  ``exit`` restricts
    the final value; ``start_offset`` skips that many environment laws first.
    """

    g: object = -5.0
    h: object = 5.0
    alpha: float = 1 / 3
    entry: tuple[float, float] | None = None
    exit: tuple[float, float] | None = None
    start: str = "midpoint"
    start_offset: int = 0

    def __post_init__(self):
        self._gs, self._gv = _as_knots(self.g)
        self._hs, self._hv = _as_knots(self.h)
        if not 0 < self.alpha < 0.5:
            raise ConfigError("alpha must lie in (0, 1/2)")
        knots = self.knots()
        if np.any(self.lower(knots) >= self.upper(knots)):
            raise ConfigError("tube needs g(s) < h(s) everywhere")
        g0, h0 = float(self.lower(0.0)), float(self.upper(0.0))
        if self.entry is not None:
            a0, b0 = self.entry
            if not (g0 < a0 <= b0 <= h0):
                raise ConfigError("entry window must lie in (g(0), h(0)]")
        if self.exit is not None:
            a1, b1 = self.exit
            if not (float(self.lower(1.0)) <= a1 <= b1 <= float(self.upper(1.0))):
                raise ConfigError("exit window must lie in [g(1), h(1)]")
        if self.start not in ("midpoint", "boundary"):
            raise ConfigError("start must be 'midpoint' or 'boundary'")
        if self.start == "boundary":
            fine = np.linspace(0, 1, 2001)
            if np.any(self.upper(np.union1d(fine, knots)) < h0 - 1e-12):
                raise ConfigError("boundary start needs h(s) >= h(0)")
        if self.start_offset < 0:
            raise ConfigError("start_offset must be non-negative")

    def lower(self, s):
        return np.interp(s, self._gs, self._gv)

    def upper(self, s):
        return np.interp(s, self._hs, self._hv)

    def knots(self) -> np.ndarray:
        return np.union1d(self._gs, self._hs)

    def start_value(self) -> float:
        if self.start == "boundary":
            return float(self.upper(0.0))
        a0, b0 = self.entry if self.entry is not None else (float(self.lower(0.0)), float(self.upper(0.0)))
        return 0.5 * (a0 + b0)

    def c_gh(self) -> float:
        """``int_0^1 ds / (h - g)^2``, exact for piecewise-linear profiles."""
        s = self.knots()
        w = self.upper(s) - self.lower(s)
        ds = np.diff(s)
        # on a segment where the width is linear, int ds / w^2 = ds / (w0 w1)
        return float(np.sum(ds / (w[:-1] * w[1:])))


@dataclass
class TubeResult:
    n: int
    replicas: int
    hits: int
    hits_unconstrained: int
    p_hat: float
    p_unconstrained: float
    normalized_rate: float
    predicted_rate: float
    one_sided: bool
    scale: float

    def row(self) -> list[str]:
        return [str(self.n), str(self.replicas), str(self.hits), f"{self.p_hat:.17g}",
                f"{self.normalized_rate:.17g}", f"{self.predicted_rate:.17g}"]


TUBE_CHUNK = 16_384


def tube_probability(model: EnvironmentModel, tube: TubeSpec, n: int, replicas: int, seed: int = 0,
                     theta: float | None = None, gamma_sigma: float | None = None,
                     cap_exponent: float | None = None, threads: int | None = None) -> TubeResult:
    """Fraction of associated walks staying in the tube for ``n`` steps.

    Each replica uses a fresh environment.  With ``cap_exponent = v`` a step
    whose mark exceeds ``exp(n^v)`` also ends the walk.  ``hits`` applies the
    exit window when one is set; ``hits_unconstrained`` does not and is
    counted on the same paths.  With no hits ``p_hat`` is the one-sided 95%
    upper bound ``3 / replicas`` and ``one_sided`` is set.
    """
    if n < 1 or replicas < 1:
        raise ConfigError("need n >= 1 and replicas >= 1")
    if theta is None:
        from .laplace_stats import solve_theta_star
        theta = solve_theta_star(model).theta_star
    scale = n**tube.alpha
    i = np.arange(n + 1) / n
    lower = tube.lower(i) * scale
    upper = tube.upper(i) * scale
    x0 = tube.start_value() * scale
    lo_exit, hi_exit = (-math.inf, math.inf) if tube.exit is None else (tube.exit[0] * scale, tube.exit[1] * scale)
    cap = math.inf if cap_exponent is None else math.exp(n**cap_exponent)
    # the offset only shifts which i.i.d. laws are used, so it does not enter the kernel
    tables = step_tables(model, theta)

    chunks = [(c, min(TUBE_CHUNK, replicas - c * TUBE_CHUNK)) for c in range(-(-replicas // TUBE_CHUNK))]

    def run(item):
        c, size = item
        rng = stream(seed, "tube", n, c)
        return _kernels.tube_chunk(rng, size, n, np.cumsum(tables.comp_weights), tables.comp_kind, tables.g_mean,
                                   tables.g_sd, tables.g_mark_max, tables.mark_cdf, tables.mark_val,
                                   tables.d_start, tables.d_len, tables.d_cdf, tables.d_val, tables.d_mark,
                                   lower, upper, cap, x0, lo_exit, hi_exit)

    res = parallel_map(run, chunks, threads)
    hits_all = int(sum(r[0] for r in res))
    hits = int(sum(r[1] for r in res))
    one_sided = hits == 0
    p_hat = 3.0 / replicas if one_sided else hits / replicas
    norm = n ** (1 - 2 * tube.alpha)
    if gamma_sigma is None and model.degenerate:
        from .laplace_stats import solve_theta_star
        gamma_sigma = solve_theta_star(model).sigma_Q ** 2 * math.pi**2 / 2
    predicted = tube.c_gh() * gamma_sigma if gamma_sigma is not None else math.nan
    return TubeResult(n=n, replicas=replicas, hits=hits, hits_unconstrained=hits_all, p_hat=p_hat,
                      p_unconstrained=hits_all / replicas, normalized_rate=-math.log(p_hat) / norm,
                      predicted_rate=predicted, one_sided=one_sided, scale=scale)


def brownian_strip_survival(t: float, width: float, x: float, terms: int = 200) -> float:
    """``P_x(B_s in (0, width) for s <= t)`` for standard Brownian motion (eigenfunction series)."""
    if not (0 < x < width):
        return 0.0
    # the k-th term decays like exp(-(k pi)^2 t / (2 width^2)); take enough of them for small t
    terms = max(terms, int(math.ceil(12 * width / (math.pi * math.sqrt(t)))) if t > 0 else terms)
    k = np.arange(1, terms + 1)
    odd = 1 - (-1.0) ** k
    series = 2 * odd / (k * math.pi) * np.sin(k * math.pi * x / width) * np.exp(-(k * math.pi / width) ** 2 * t / 2)
    return float(min(1.0, max(0.0, series.sum())))


def write_tube_csv(path, results: Sequence[TubeResult], header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "replicas", "hits", "p_hat", "normalized_rate", "predicted_rate"])
        for r in results:
            w.writerow(r.row())
