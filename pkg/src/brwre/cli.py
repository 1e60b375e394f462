"""Command-line experiment driver.

Every artifact starts with one ``#`` comment line carrying the command, the
config hash and the seed; JSON artifacts follow that line with the JSON body
(see :func:`read_artifact`).  Thread count never enters an artifact.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .brw_sim import (BarrierSpec, RecursionGrid, estimate_extinction_rate, estimate_survival, ray_slope,
                      write_rate_csv, write_survival_csv)
from .config import ExperimentConfig, load_config
from .env_model import RealizedEnvironment
from .errors import ConfigError, NumericalError, UnsupportedOperation
from .gamma_engine import GammaParams, PI2_HALF, estimate_gamma, write_slopes_csv
from .laplace_stats import Exponents, ModelConstants, check_conditions, solve_theta_star
from .rate_solver import critical_a, solve_q_shooting, write_sweep_csv
from .rng import set_default_threads
from .rwre_walk import (TubeSpec, many_to_one_check, m2o_fixtures, m2o_functionals, tube_probability,
                        write_tube_csv)

COMMANDS = ("constants", "gamma", "conditions", "survive", "rate", "tube", "m2o-check", "sweep")
M2O_TOL = 1e-10

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class Context:
    def __init__(self, command: str, cfg: ExperimentConfig, seed: int, out: Path):
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.out = out
        self._constants: ModelConstants | None = None
        self._model = None

    @property
    def header(self) -> str:
        return f"# brwre {self.command} config={self.cfg.hash()} seed={self.seed}\n"

    @property
    def model(self):
        if self._model is None:
            self._model = self.cfg.model()
        return self._model

    def gamma_params(self) -> GammaParams:
        c = self.cfg
        p = GammaParams(horizon=c.float("gamma", "horizon", 50.0, positive=True),
                        dt=c.float("gamma", "dt", 0.01, positive=True),
                        grid=c.int("gamma", "grid", 201, minimum=51),
                        replicas=c.int("gamma", "replicas", 20, minimum=2),
                        fit_start=c.float("gamma", "fit_start", 0.5, nonneg=True),
                        bridge=c.bool("gamma", "bridge", True), seed=self.seed)
        p.validate()
        return p

    def constants(self) -> ModelConstants:
        """Critical constants, with gamma_sigma from the tube engine when sigma_A > 0."""
        if self._constants is None:
            k = solve_theta_star(self.model)
            if k.sigma_A == 0:
                k.gamma_sigma = k.sigma_Q**2 * PI2_HALF
                self.gamma_stderr = 0.0
            else:
                est = estimate_gamma(k.sigma_A / k.sigma_Q, self.gamma_params())
                k.gamma_sigma = k.sigma_Q**2 * est.value
                self.gamma_stderr = k.sigma_Q**2 * est.stderr
            k.a_c = critical_a(k.gamma_sigma, k.theta_star)
            self._constants = k
        return self._constants

    def barrier(self) -> BarrierSpec:
        c = self.cfg
        mode = c.get("barrier", "mode", "random-centered")
        alpha = c.float("barrier", "alpha", 1 / 3, positive=True)
        if c.has("barrier", "a") and c.has("barrier", "a_factor"):
            raise ConfigError("give barrier.a or barrier.a_factor, not both")
        if c.has("barrier", "a_factor"):
            a = c.float("barrier", "a_factor") * self.constants().a_c
        else:
            a = c.float("barrier", "a", 0.0)
        return BarrierSpec(a=a, alpha=alpha, mode=mode)

    def path(self, name: str) -> Path:
        return self.out / name

    def write_json(self, name: str, payload: dict) -> None:
        payload = {"config_hash": self.cfg.hash(), "seed": self.seed, **payload}
        text = json.dumps(_jsonable(payload), indent=2, sort_keys=True)
        with open(self.path(name), "w", encoding="utf-8") as fh:
            fh.write(self.header)
            fh.write(text + "\n")
        print(text)


def _jsonable(o):
    if isinstance(o, float):
        return o if math.isfinite(o) else repr(o)
    if isinstance(o, dict):
        return {k: _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.floating, np.integer)):
        return _jsonable(o.item())
    return o


def read_artifact(path: str | Path) -> tuple[str, str]:
    """Split an artifact into its header line and body."""
    text = Path(path).read_text(encoding="utf-8")
    head, _, body = text.partition("\n")
    return head, body


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_constants(ctx: Context) -> int:
    k = ctx.constants()
    ctx.write_json("constants.json", {**k.to_dict(), "gamma_sigma_stderr": ctx.gamma_stderr,
                                      "degenerate": bool(ctx.model.degenerate)})
    return EXIT_OK


def cmd_gamma(ctx: Context) -> int:
    params = ctx.gamma_params()
    betas = ctx.cfg.floats("gamma", "beta", [0.0])
    ests = [estimate_gamma(b, params) for b in betas]
    write_slopes_csv(ctx.path("gamma.csv"), ests, ctx.header)
    print(json.dumps([_jsonable(e.to_dict()) for e in ests], sort_keys=True))
    return EXIT_OK


def cmd_conditions(ctx: Context) -> int:
    c = ctx.cfg
    ex = Exponents(lambda1=c.float("conditions", "lambda1", 3.5), lambda2=c.float("conditions", "lambda2", 2.5),
                   lambda3=c.float("conditions", "lambda3", 6.5), lambda4=c.float("conditions", "lambda4", 1.0),
                   lambda5=c.float("conditions", "lambda5", 2.5),
                   y_values=tuple(c.floats("conditions", "y_values", [-0.1, -1.0])))
    try:
        ex.validate()
    except ValueError as exc:
        raise ConfigError(f"conditions: {exc}") from exc
    rep = check_conditions(ctx.model, solve_theta_star(ctx.model), ex,
                           samples=c.int("conditions", "samples", 1_000_000, minimum=10), seed=ctx.seed)
    ctx.write_json("conditions.json", json.loads(rep.to_json()))
    return EXIT_OK


def cmd_survive(ctx: Context) -> int:
    c = ctx.cfg
    bar = ctx.barrier()
    n = c.int("survive", "n", 100, minimum=1)
    est = estimate_survival(ctx.model, bar, n, c.int("survive", "replicas", 500, minimum=1),
                            cap=c.int("survive", "cap", 1_000_000, minimum=1), seed=ctx.seed,
                            constants=solve_theta_star(ctx.model))
    write_survival_csv(ctx.path("survive.csv"), [est], ctx.header)
    print(json.dumps(_jsonable({"n": n, "a": bar.a, "alpha": bar.alpha, "mode": bar.mode,
                                "p_survive_hat": est.p_survive_hat, "stderr": est.stderr,
                                "truncation_rate": est.truncation_rate}), sort_keys=True))
    return EXIT_OK


def cmd_rate(ctx: Context) -> int:
    c = ctx.cfg
    k = ctx.constants()
    n_grid = c.ints("rate", "n_grid", [64, 216, 512])
    method = c.get("rate", "method", "recursion")
    kw = dict(replicas=c.int("rate", "replicas", 500, minimum=1), seed=ctx.seed, constants=k, method=method,
              cap=c.int("rate", "cap", 1_000_000, minimum=1),
              grid=RecursionGrid(h=c.float("rate", "h", 0.02, positive=True),
                                 depth=c.float("rate", "depth", 50.0, positive=True)))
    if c.get("barrier", "mode") == "ray":
        b = c.float("barrier", "b", positive=True)
        points = []
        for n in n_grid:
            points += estimate_extinction_rate(ctx.model, BarrierSpec(ray_slope(b, n), mode="ray"), [n], **kw)
    else:
        points = estimate_extinction_rate(ctx.model, ctx.barrier(), n_grid, **kw)
    write_rate_csv(ctx.path("rate.csv"), points, ctx.header)
    for p in points:
        print(f"n={p.n} rate={p.normalized_rate:.6g} predicted={p.predicted_rate:.6g}")
    return EXIT_OK


def _profile(text: str | None, default: float):
    if text is None:
        return default
    if ":" not in text:
        return float(text)
    knots = []
    for part in text.split(","):
        s, v = part.split(":")
        knots.append((float(s), float(v)))
    return knots


def cmd_tube(ctx: Context) -> int:
    c = ctx.cfg
    k = ctx.constants()

    def window(key):
        if not c.has("tube", key):
            return None
        vals = c.floats("tube", key)
        if len(vals) != 2:
            raise ConfigError(f"tube.{key} needs two numbers")
        return tuple(vals)

    try:
        tube = TubeSpec(g=_profile(c.get("tube", "g"), -5.0), h=_profile(c.get("tube", "h"), 5.0),
                        alpha=c.float("tube", "alpha", 1 / 3, positive=True), entry=window("entry"),
                        exit=window("exit"), start=c.get("tube", "start", "midpoint"),
                        start_offset=c.int("tube", "start_offset", 0, minimum=0))
    except ValueError as exc:
        raise ConfigError(f"tube: {exc}") from exc
    cap_v = c.float("tube", "cap_exponent", 0.32) if c.bool("tube", "caps", False) else None
    results = [tube_probability(ctx.model, tube, n, c.int("tube", "replicas", 100_000, minimum=1), seed=ctx.seed,
                                theta=k.theta_star, gamma_sigma=k.gamma_sigma, cap_exponent=cap_v)
               for n in c.ints("tube", "n_grid", [125, 1000])]
    write_tube_csv(ctx.path("tube.csv"), results, ctx.header)
    for r in results:
        print(f"n={r.n} p_hat={r.p_hat:.6g} rate={r.normalized_rate:.6g} predicted={r.predicted_rate:.6g}"
              + (" (one-sided bound)" if r.one_sided else ""))
    return EXIT_OK


def cmd_m2o(ctx: Context) -> int:
    theta = ctx.cfg.float("run", "m2o_theta", 0.8, positive=True)
    rows = []
    worst = 0.0
    for name, laws in m2o_fixtures().items():
        env = RealizedEnvironment.from_laws(laws, theta)
        for fname, f in m2o_functionals().items():
            for n in (1, 2, 3):
                for capped in (False, True):
                    caps = [2, 2, 3] if capped else None
                    r = many_to_one_check(env, n, f, caps)
                    worst = max(worst, r.relative_gap)
                    rows.append([name, fname, str(n), str(int(capped)), f"{r.lhs:.17g}", f"{r.rhs:.17g}",
                                 f"{r.relative_gap:.17g}"])
    with open(ctx.path("m2o.csv"), "w", encoding="utf-8") as fh:
        fh.write(ctx.header)
        fh.write("fixture,functional,n,capped,lhs,rhs,relative_gap\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    print(f"{len(rows)} checks, worst relative gap {worst:.3g}")
    if worst > M2O_TOL:
        raise NumericalError(f"many-to-one gap {worst:.3g} exceeds {M2O_TOL}")
    return EXIT_OK


def cmd_sweep(ctx: Context) -> int:
    c = ctx.cfg
    if c.has("sweep", "gamma_sigma"):
        g = c.float("sweep", "gamma_sigma", positive=True)
        theta = c.float("sweep", "theta", positive=True)
    else:
        k = ctx.constants()
        g, theta = k.gamma_sigma, k.theta_star
    ac = critical_a(g, theta)
    if c.has("sweep", "a_values"):
        a_values = c.floats("sweep", "a_values")
    else:
        a_values = [f * ac for f in c.floats("sweep", "a_fractions", [0.0, 0.25, 0.5, 0.75])]
    mesh = c.int("sweep", "mesh", 10_000, minimum=10)
    sols = [solve_q_shooting(a, g, theta, mesh) for a in a_values]
    write_sweep_csv(ctx.path("sweep.csv"), sols, ctx.header)
    for s in sols:
        print(f"a={s.a:.6g} q0={s.q0:.10g} rate={s.rate:.10g}")
    return EXIT_OK


HANDLERS: dict[str, Callable[[Context], int]] = {
    "constants": cmd_constants, "gamma": cmd_gamma, "conditions": cmd_conditions, "survive": cmd_survive,
    "rate": cmd_rate, "tube": cmd_tube, "m2o-check": cmd_m2o, "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="brwre", description="Branching random walks in random environment")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI experiment config")
    p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: logical cores)")
    p.add_argument("--out", default=".", help="output directory")
    return p


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"status": "error", "exit_code": code, "kind": type(exc).__name__, "message": str(exc)}),
          file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.int("run", "seed", 0, minimum=0)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        set_default_threads(args.threads)
        return HANDLERS[args.command](Context(args.command, cfg, seed, out))
    except (ConfigError, UnsupportedOperation) as exc:
        return _fail(EXIT_CONFIG, exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    finally:
        set_default_threads(None)


if __name__ == "__main__":
    sys.exit(main())
