"""Reproduction laws, environment models and realized environments.

A reproduction law describes one brood: a random count ``N`` and displacements
``zeta_1..zeta_N`` relative to the parent.  An environment model is a
distribution over reproduction laws; a realized environment is an i.i.d. draw
``L_1..L_n`` from it together with the cumulative log-Laplace values
``K_i = sum_{j<=i} kappa_j(theta)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, special, stats

from .errors import ConfigError, DomainError, UnsupportedOperation
from .rng import stream

Atom = tuple[float, tuple[float, ...]]

PROB_TOL = 1e-12


def _check_probs(probs: np.ndarray, what: str) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 1 or probs.size == 0:
        raise ConfigError(f"{what}: need a non-empty list of probabilities")
    if np.any(~np.isfinite(probs)) or np.any(probs < 0):
        raise ConfigError(f"{what}: probabilities must be finite and non-negative")
    if abs(probs.sum() - 1.0) > PROB_TOL:
        raise ConfigError(f"{what}: probabilities sum to {probs.sum()!r}, not 1")
    return probs


class BroodLaw:
    """One reproduction law.

    Subclasses provide sampling and the log-Laplace transform
    ``kappa(theta) = log E[sum_i exp(-theta * zeta_i)]`` with its first two
    derivatives.
    """

    label: str = "law"
    has_closed_form: bool = True

    # -- sampling ---------------------------------------------------------
    def sample(self, rng: np.random.Generator) -> tuple[int, np.ndarray]:
        counts, disp = self.sample_broods(rng, 1)
        return int(counts[0]), disp

    def sample_broods(self, rng: np.random.Generator, n_parents: int) -> tuple[np.ndarray, np.ndarray]:
        """Sample ``n_parents`` independent broods.

        Returns the per-parent counts and all displacements concatenated in
        parent order.
        """
        raise NotImplementedError

    # -- transforms -------------------------------------------------------
    def log_laplace(self, theta: float, order: int = 0) -> float:
        raise NotImplementedError

    def mean_count(self) -> float:
        raise NotImplementedError

    def count_moment(self, p: float) -> float:
        """``E[N^p]``."""
        raise NotImplementedError

    def tilted_abs_moment(self, theta: float, center: float, p: float) -> float:
        """``E[sum |zeta - center|^p e^{-theta zeta}] / E[sum e^{-theta zeta}]``."""
        raise NotImplementedError

    def expected_children_below(self, x: float) -> float:
        """``E[sum_i 1{zeta_i <= x}]``."""
        raise NotImplementedError

    # -- finite support ---------------------------------------------------
    @property
    def is_finite(self) -> bool:
        return False

    @property
    def atoms(self) -> list[Atom]:
        raise UnsupportedOperation(f"law {self.label!r} does not have finite support")

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.label!r})"


class FiniteBroodLaw(BroodLaw):
    """Law with finitely many outcomes ``(probability, displacements)``."""

    def __init__(self, atoms: Sequence[tuple[float, Sequence[float]]], label: str = "finite"):
        if len(atoms) == 0:
            raise ConfigError("finite law needs at least one atom")
        probs = _check_probs(np.array([a[0] for a in atoms]), f"law {label!r}")
        self.label = label
        self._atoms: list[Atom] = [
            (float(p), tuple(float(z) for z in d)) for p, d in zip(probs, (a[1] for a in atoms))
        ]
        self._probs = probs
        self._counts = np.array([len(d) for _, d in self._atoms], dtype=np.int64)
        self._offsets = np.concatenate([[0], np.cumsum(self._counts)[:-1]]).astype(np.int64)
        self._flat = np.array([z for _, d in self._atoms for z in d], dtype=float)
        # one entry per (atom, child): weight of that child in E[sum_i ...]
        self._child_w = np.repeat(probs, self._counts)
        self._cdf = np.cumsum(probs)
        self._cdf[-1] = 1.0

    @classmethod
    def deterministic(cls, displacements: Sequence[float], label: str = "deterministic") -> "FiniteBroodLaw":
        return cls([(1.0, tuple(displacements))], label=label)

    @classmethod
    def iid(cls, count_pmf: dict[int, float], disp_pmf: dict[float, float], label: str = "iid") -> "FiniteBroodLaw":
        """Brood of ``N ~ count_pmf`` children with i.i.d. displacements ``~ disp_pmf``."""
        import itertools

        values = list(disp_pmf)
        atoms: list[tuple[float, tuple[float, ...]]] = []
        for k, pk in count_pmf.items():
            if pk == 0:
                continue
            for combo in itertools.product(range(len(values)), repeat=int(k)):
                p = pk * math.prod(disp_pmf[values[j]] for j in combo)
                if p > 0:
                    atoms.append((p, tuple(values[j] for j in combo)))
        # renormalize away the rounding of the product
        total = sum(p for p, _ in atoms)
        return cls([(p / total, d) for p, d in atoms], label=label)

    @property
    def is_finite(self) -> bool:
        return True

    @property
    def atoms(self) -> list[Atom]:
        return list(self._atoms)

    def sample_broods(self, rng, n_parents):
        idx = np.searchsorted(self._cdf, rng.random(n_parents), side="right")
        idx = np.minimum(idx, len(self._atoms) - 1)
        counts = self._counts[idx]
        total = int(counts.sum())
        if total == 0:
            return counts, np.empty(0)
        starts = self._offsets[idx]
        ends_before = np.cumsum(counts) - counts
        flat_idx = np.repeat(starts - ends_before, counts) + np.arange(total)
        return counts, self._flat[flat_idx]

    def log_laplace(self, theta, order=0):
        if self._flat.size == 0:
            raise DomainError(f"law {self.label!r} never has children; kappa = -inf")
        e = -theta * self._flat
        m = e.max()
        w = self._child_w * np.exp(e - m)
        s0 = w.sum()
        if order == 0:
            return float(m + math.log(s0))
        mean_z = float((w * self._flat).sum() / s0)
        if order == 1:
            return -mean_z
        if order == 2:
            return float((w * self._flat**2).sum() / s0 - mean_z**2)
        raise ValueError("order must be 0, 1 or 2")

    def mean_count(self):
        return float((self._probs * self._counts).sum())

    def count_moment(self, p):
        return float((self._probs * self._counts.astype(float) ** p).sum())

    def tilted_abs_moment(self, theta, center, p):
        e = -theta * self._flat
        w = self._child_w * np.exp(e - e.max())
        return float((w * np.abs(self._flat - center) ** p).sum() / w.sum())

    def expected_children_below(self, x):
        return float(self._child_w[self._flat <= x].sum())


class GaussianBroodLaw(BroodLaw):
    """``N`` from a finite pmf; given ``N``, displacements i.i.d. ``Normal(mu, sigma^2)``."""

    def __init__(self, count_values: Sequence[int], count_probs: Sequence[float], mu: float, sigma: float,
                 label: str = "gaussian"):
        if not sigma > 0 or not math.isfinite(sigma):
            raise ConfigError(f"law {label!r}: sigma must be positive, got {sigma!r}")
        if not math.isfinite(mu):
            raise ConfigError(f"law {label!r}: mu must be finite")
        values = np.asarray(count_values, dtype=np.int64)
        if np.any(values < 0):
            raise ConfigError(f"law {label!r}: counts must be non-negative")
        self.count_values = values
        self.count_probs = _check_probs(np.asarray(count_probs, dtype=float), f"law {label!r} counts")
        if self.count_values.shape != self.count_probs.shape:
            raise ConfigError(f"law {label!r}: count values and probabilities differ in length")
        self.mu = float(mu)
        self.sigma = float(sigma)
        self.label = label
        self._cdf = np.cumsum(self.count_probs)
        self._cdf[-1] = 1.0

    def sample_broods(self, rng, n_parents):
        idx = np.searchsorted(self._cdf, rng.random(n_parents), side="right")
        counts = self.count_values[np.minimum(idx, len(self._cdf) - 1)]
        disp = self.mu + self.sigma * rng.standard_normal(int(counts.sum()))
        return counts, disp

    def mean_count(self):
        return float((self.count_values * self.count_probs).sum())

    def count_moment(self, p):
        return float((self.count_values.astype(float) ** p * self.count_probs).sum())

    def log_laplace(self, theta, order=0):
        if order == 0:
            en = self.mean_count()
            if en <= 0:
                raise DomainError(f"law {self.label!r} never has children; kappa = -inf")
            return math.log(en) - theta * self.mu + 0.5 * theta**2 * self.sigma**2
        if order == 1:
            return self.sigma**2 * theta - self.mu
        if order == 2:
            return self.sigma**2
        raise ValueError("order must be 0, 1 or 2")

    def tilted_abs_moment(self, theta, center, p):
        # the exp(-theta z) tilt of Normal(mu, s^2) is Normal(mu - theta s^2, s^2)
        d = self.mu - theta * self.sigma**2 - center
        s = self.sigma
        if d == 0.0:
            return s**p * 2 ** (p / 2) * special.gamma((p + 1) / 2) / math.sqrt(math.pi)
        val, _ = integrate.quad(lambda y: abs(d + s * y) ** p * stats.norm.pdf(y), -np.inf, np.inf)
        return float(val)

    def expected_children_below(self, x):
        return self.mean_count() * float(special.ndtr((x - self.mu) / self.sigma))


class SampledBroodLaw(BroodLaw):
    """Law given only by a sampler; transforms come from a fixed Monte Carlo pool.

    The pool is drawn once from a dedicated stream, so ``log_laplace`` is a
    smooth deterministic function of theta and its derivatives are exact for
    the pooled empirical law.
    """

    has_closed_form = False

    def __init__(self, sampler: Callable[[np.random.Generator], tuple[int, Sequence[float]]],
                 label: str = "sampled", pool_size: int = 100_000, pool_seed: int = 0):
        self.sampler = sampler
        self.label = label
        self.pool_size = int(pool_size)
        self.pool_seed = int(pool_seed)
        self._pool: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def _get_pool(self):
        if self._pool is None:
            rng = stream(self.pool_seed, "sampled-law-pool")
            counts = np.empty(self.pool_size, dtype=np.int64)
            chunks = []
            for b in range(self.pool_size):
                k, d = self.sampler(rng)
                d = np.asarray(d, dtype=float)
                if k < 0 or d.size != k:
                    raise ConfigError(f"sampler of {self.label!r} returned count {k} with {d.size} displacements")
                counts[b] = k
                chunks.append(d)
            flat = np.concatenate(chunks) if chunks else np.empty(0)
            parent = np.repeat(np.arange(self.pool_size), counts)
            self._pool = (counts, flat, parent)
        return self._pool

    @property
    def pool(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(counts, flat displacements, parent index of each displacement)``."""
        return self._get_pool()

    def sample(self, rng):
        k, d = self.sampler(rng)
        return int(k), np.asarray(d, dtype=float)

    def sample_broods(self, rng, n_parents):
        counts = np.empty(n_parents, dtype=np.int64)
        parts = []
        for i in range(n_parents):
            k, d = self.sample(rng)
            counts[i] = k
            parts.append(d)
        return counts, (np.concatenate(parts) if parts else np.empty(0))

    def _per_brood(self, values: np.ndarray) -> np.ndarray:
        counts, _, parent = self._get_pool()
        return np.bincount(parent, weights=values, minlength=counts.size)

    def log_laplace(self, theta, order=0):
        _, flat, _ = self._get_pool()
        if flat.size == 0:
            raise DomainError(f"law {self.label!r}: pooled sample has no children")
        e = -theta * flat
        if not np.all(np.isfinite(e)):
            raise DomainError(f"law {self.label!r}: exp(-theta zeta) overflows at theta={theta}")
        m = e.max()
        w = np.exp(e - m)
        s0 = w.sum()
        if order == 0:
            return float(m + math.log(s0 / self.pool_size))
        mean_z = float((w * flat).sum() / s0)
        if order == 1:
            return -mean_z
        if order == 2:
            return float((w * flat**2).sum() / s0 - mean_z**2)
        raise ValueError("order must be 0, 1 or 2")

    def log_laplace_stderr(self, theta: float) -> float:
        """Delta-method standard error of the pooled ``kappa(theta)``."""
        _, flat, _ = self._get_pool()
        per = self._per_brood(np.exp(-theta * flat))
        mean = per.mean()
        return float(per.std(ddof=1) / math.sqrt(per.size) / mean)

    def mean_count(self):
        return float(self._get_pool()[0].mean())

    def count_moment(self, p):
        return float((self._get_pool()[0].astype(float) ** p).mean())

    def tilted_abs_moment(self, theta, center, p):
        _, flat, _ = self._get_pool()
        e = -theta * flat
        w = np.exp(e - e.max())
        return float((w * np.abs(flat - center) ** p).sum() / w.sum())

    def expected_children_below(self, x):
        _, flat, _ = self._get_pool()
        return float(np.count_nonzero(flat <= x) / self.pool_size)


def law_kappa(law: BroodLaw, theta: float, order: int = 0, step: float = 1e-5) -> float:
    """``kappa`` or a derivative, falling back to central differences."""
    try:
        val = law.log_laplace(theta, order)
    except NotImplementedError:
        if order == 0:
            raise
        h = step * max(1.0, abs(theta))
        if theta + h == theta:
            raise DomainError(f"difference step underflows at theta={theta}")
        if order == 1:
            val = (law.log_laplace(theta + h) - law.log_laplace(theta - h)) / (2 * h)
        else:
            val = (law.log_laplace(theta + h) - 2 * law.log_laplace(theta) + law.log_laplace(theta - h)) / h**2
    if not math.isfinite(val):
        raise DomainError(f"kappa^({order}) of {law.label!r} is not finite at theta={theta}")
    return float(val)


# ---------------------------------------------------------------------------
# Environment models
# ---------------------------------------------------------------------------


class EnvironmentModel:
    """A distribution over reproduction laws."""

    degenerate: bool = False

    def draw(self, rng: np.random.Generator) -> BroodLaw:
        return self.draw_many(rng, 1)[0]

    def draw_many(self, rng: np.random.Generator, n: int) -> list[BroodLaw]:
        raise NotImplementedError

    def support(self) -> list[tuple[float, BroodLaw]]:
        """Weighted laws used for expectations over the model.

        Exact for finite mixtures; a quadrature rule for parametric families.
        """
        raise NotImplementedError

    def expect(self, fn: Callable[[BroodLaw], float]) -> float:
        return float(sum(w * fn(law) for w, law in self.support()))


class MixtureEnvironment(EnvironmentModel):
    """Finite mixture: each generation picks law ``j`` with probability ``weights[j]``."""

    def __init__(self, laws: Sequence[BroodLaw], weights: Sequence[float] | None = None):
        if len(laws) == 0:
            raise ConfigError("mixture needs at least one law")
        if weights is None:
            weights = [1.0 / len(laws)] * len(laws)
        w = np.asarray(weights, dtype=float)
        if np.any(w <= 0):
            raise ConfigError("mixture weights must be positive")
        self.weights = _check_probs(w, "mixture weights")
        self.laws = list(laws)
        self.degenerate = len(self.laws) == 1
        self._cdf = np.cumsum(self.weights)
        self._cdf[-1] = 1.0

    def draw_many(self, rng, n):
        idx = np.searchsorted(self._cdf, rng.random(n), side="right")
        idx = np.minimum(idx, len(self.laws) - 1)
        return [self.laws[i] for i in idx]

    def support(self):
        return list(zip(self.weights.tolist(), self.laws))


@dataclass(frozen=True)
class CountLaw:
    values: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        _check_probs(np.asarray(self.probs), "count law")
        if len(self.values) != len(self.probs):
            raise ConfigError("count law: values and probabilities differ in length")


@dataclass
class GaussianFamily(EnvironmentModel):
    """Parametric environment with normal displacements.

    Each generation draws, independently, a count law (finite mixture), a mean
    ``mu ~ Normal(mu_mean, mu_std^2)`` and a scale ``sigma`` from a finite set of
    positive values.  Given the law, the ``N`` displacements are i.i.d.
    ``Normal(mu, sigma^2)``.  ``tau1``/``tau2`` are the moment exponents the
    family is meant to satisfy; they are kept as metadata.
    """

    count_laws: Sequence[CountLaw] = (CountLaw((2,), (1.0,)),)
    count_weights: Sequence[float] = (1.0,)
    mu_mean: float = 0.0
    mu_std: float = 0.0
    sigma_values: Sequence[float] = (1.0,)
    sigma_weights: Sequence[float] = (1.0,)
    tau1: float = 7.0
    tau2: float = 5.0
    hermite_nodes: int = 20
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.count_laws = tuple(c if isinstance(c, CountLaw) else CountLaw(tuple(c[0]), tuple(c[1]))
                                for c in self.count_laws)
        self.count_weights = tuple(_check_probs(np.asarray(self.count_weights, dtype=float), "count weights"))
        self.sigma_weights = tuple(_check_probs(np.asarray(self.sigma_weights, dtype=float), "sigma weights"))
        if len(self.count_laws) != len(self.count_weights):
            raise ConfigError("count_laws and count_weights differ in length")
        if len(self.sigma_values) != len(self.sigma_weights):
            raise ConfigError("sigma_values and sigma_weights differ in length")
        if any(not s > 0 for s in self.sigma_values):
            raise ConfigError("every sigma value must be positive")
        if self.mu_std < 0:
            raise ConfigError("mu_std must be non-negative")
        if any(w <= 0 for w in self.count_weights) or any(w <= 0 for w in self.sigma_weights):
            raise ConfigError("mixture weights must be positive")
        if self.tau1 <= 6 or self.tau2 <= 4:
            raise ConfigError("moment exponents need tau1 > 6 and tau2 > 4")
        self.degenerate = len(self.count_laws) == 1 and len(self.sigma_values) == 1 and self.mu_std == 0
        self._ccdf = np.cumsum(self.count_weights)
        self._ccdf[-1] = 1.0
        self._scdf = np.cumsum(self.sigma_weights)
        self._scdf[-1] = 1.0

    def _law(self, ci: int, mu: float, si: int) -> GaussianBroodLaw:
        key = (ci, mu, si)
        law = self._cache.get(key)
        if law is None:
            c = self.count_laws[ci]
            law = GaussianBroodLaw(c.values, c.probs, mu, self.sigma_values[si],
                                   label=f"gauss[c{ci},mu={mu:.6g},s{si}]")
            if self.mu_std == 0:
                self._cache[key] = law
        return law

    def draw_many(self, rng, n):
        ci = np.minimum(np.searchsorted(self._ccdf, rng.random(n), side="right"), len(self.count_laws) - 1)
        si = np.minimum(np.searchsorted(self._scdf, rng.random(n), side="right"), len(self.sigma_values) - 1)
        if self.mu_std > 0:
            mu = self.mu_mean + self.mu_std * rng.standard_normal(n)
        else:
            mu = np.full(n, float(self.mu_mean))
        return [self._law(int(c), float(m), int(s)) for c, m, s in zip(ci, mu, si)]

    def support(self):
        if self.mu_std > 0:
            nodes, weights = np.polynomial.hermite_e.hermegauss(self.hermite_nodes)
            weights = weights / weights.sum()
            mus = self.mu_mean + self.mu_std * nodes
        else:
            mus, weights = np.array([float(self.mu_mean)]), np.array([1.0])
        out = []
        for ci, cw in enumerate(self.count_weights):
            for si, sw in enumerate(self.sigma_weights):
                for mu, mw in zip(mus, weights):
                    c = self.count_laws[ci]
                    out.append((cw * sw * float(mw),
                                GaussianBroodLaw(c.values, c.probs, float(mu), self.sigma_values[si])))
        return out

    def mean_log_mean_count(self) -> float:
        """``E[log E_L N]`` over the family."""
        return float(sum(w * math.log(sum(v * p for v, p in zip(c.values, c.probs)))
                         for w, c in zip(self.count_weights, self.count_laws)))

    def mean_sigma2(self) -> float:
        return float(sum(w * s**2 for w, s in zip(self.sigma_weights, self.sigma_values)))

    def closed_form_theta(self) -> float:
        """Critical tilt ``sqrt(2 E[log E_L N] / E[sigma^2])`` of the Gaussian family."""
        num = self.mean_log_mean_count()
        if num <= 0:
            raise DomainError("E[log E_L N] must be positive")
        return math.sqrt(2 * num / self.mean_sigma2())


# ---------------------------------------------------------------------------
# Realized environments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RealizedEnvironment:
    laws: tuple[BroodLaw, ...]
    theta: float
    kappa_at_theta: np.ndarray
    K: np.ndarray  # length n+1, K[0] = 0
    seed: int

    def __len__(self) -> int:
        return len(self.laws)

    @classmethod
    def from_laws(cls, laws: Sequence[BroodLaw], theta: float, seed: int = 0) -> "RealizedEnvironment":
        if not theta > 0:
            raise ConfigError(f"theta must be positive, got {theta!r}")
        kappa = np.empty(len(laws))
        memo: dict[int, float] = {}
        for i, law in enumerate(laws):
            k = memo.get(id(law))
            if k is None:
                try:
                    k = memo[id(law)] = law_kappa(law, theta, 0)
                except DomainError as exc:
                    raise DomainError(f"environment index {i + 1}: {exc}") from exc
            kappa[i] = k
        K = np.concatenate([[0.0], np.cumsum(kappa)])
        kappa.setflags(write=False)
        K.setflags(write=False)
        return cls(tuple(laws), float(theta), kappa, K, int(seed))


def draw_environment(model: EnvironmentModel, n: int, theta: float, seed: int,
                     index: Sequence[int] = ()) -> RealizedEnvironment:
    """Draw ``L_1..L_n`` i.i.d. from ``model`` and fill ``kappa_i(theta)`` and ``K``.

    Deterministic in ``(model, n, theta, seed, index)``; ``index`` selects an
    independent sub-stream (one per replica).
    """
    if n < 1:
        raise ConfigError("environment length n must be >= 1")
    if not theta > 0:
        raise ConfigError(f"theta must be positive, got {theta!r}")
    rng = stream(seed, "environment", *index)
    return RealizedEnvironment.from_laws(model.draw_many(rng, n), theta, seed)


def enumerate_law(law: BroodLaw) -> list[tuple[float, int, tuple[float, ...]]]:
    """Complete outcome list ``(probability, count, displacements)`` of a finite law."""
    if not law.is_finite:
        raise UnsupportedOperation(f"law {law.label!r} does not have finite support")
    return [(p, len(d), d) for p, d in law.atoms]
