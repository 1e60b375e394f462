"""Experiment configuration: INI text with one section per concern.

Keys are referred to as ``section.key`` (``model.family``, ``barrier.a``...).
Lists are comma separated.  See ``README.md`` for the full schema.

Example::

    [model]
    family = gaussian
    counts = 2
    mu = 0
    sigma = 1

    [barrier]
    a_factor = 2.0     # a = 2 a_c
    alpha = 0.333333333333333333

    [survive]
    n = 100
    replicas = 500
    cap = 100000
"""
from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .env_model import (BroodLaw, CountLaw, EnvironmentModel, FiniteBroodLaw, GaussianBroodLaw, GaussianFamily,
                        MixtureEnvironment)
from .errors import BRWError, ConfigError

SECTIONS = ("run", "model", "barrier", "survive", "rate", "gamma", "tube", "sweep", "conditions")


def _floats(text: str, key: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a comma separated list of numbers, got {text!r}") from exc


def _ints(text: str, key: str) -> list[int]:
    vals = _floats(text, key)
    if any(v != int(v) for v in vals):
        raise ConfigError(f"{key}: expected integers, got {text!r}")
    return [int(v) for v in vals]


@dataclass
class ExperimentConfig:
    raw: dict[str, dict[str, str]] = field(default_factory=dict)
    source: str = "<defaults>"

    # -- access -----------------------------------------------------------
    def has(self, section: str, key: str) -> bool:
        return key in self.raw.get(section, {})

    def get(self, section: str, key: str, default: Any = None) -> str | None:
        return self.raw.get(section, {}).get(key, default)

    def float(self, section: str, key: str, default: float | None = None, *, positive: bool = False,
              nonneg: bool = False) -> float:
        text = self.get(section, key)
        if text is None:
            if default is None:
                raise ConfigError(f"missing required key {section}.{key}")
            val = float(default)
        else:
            try:
                val = float(text)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: not a number: {text!r}") from exc
        if math.isnan(val):
            raise ConfigError(f"{section}.{key} is NaN")
        if positive and not val > 0:
            raise ConfigError(f"{section}.{key} must be positive, got {val!r}")
        if nonneg and val < 0:
            raise ConfigError(f"{section}.{key} must be non-negative, got {val!r}")
        return val

    def int(self, section: str, key: str, default: int | None = None, *, minimum: int | None = None) -> int:
        val = self.float(section, key, default)
        if val != int(val) or math.isinf(val):
            raise ConfigError(f"{section}.{key} must be an integer, got {val!r}")
        val = int(val)
        if minimum is not None and val < minimum:
            raise ConfigError(f"{section}.{key} must be >= {minimum}, got {val}")
        return val

    def floats(self, section: str, key: str, default: list[float] | None = None) -> list[float]:
        text = self.get(section, key)
        if text is None:
            if default is None:
                raise ConfigError(f"missing required key {section}.{key}")
            return list(default)
        vals = _floats(text, f"{section}.{key}")
        if not vals:
            raise ConfigError(f"{section}.{key} is empty")
        return vals

    def ints(self, section: str, key: str, default: list[int] | None = None, *, minimum: int = 1) -> list[int]:
        text = self.get(section, key)
        vals = list(default) if text is None and default is not None else _ints(text or "", f"{section}.{key}")
        if not vals:
            raise ConfigError(f"missing required key {section}.{key}")
        if any(v < minimum for v in vals):
            raise ConfigError(f"{section}.{key}: every entry must be >= {minimum}")
        return vals

    def bool(self, section: str, key: str, default: bool) -> bool:
        text = self.get(section, key)
        if text is None:
            return default
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key}: expected a boolean, got {text!r}")

    # -- identity ---------------------------------------------------------
    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    # -- model ------------------------------------------------------------
    def model(self) -> EnvironmentModel:
        family = (self.get("model", "family") or "gaussian").strip().lower()
        try:
            if family == "gaussian":
                return self._gaussian_family()
            if family == "mixture":
                return self._mixture()
        except BRWError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"model: {exc}") from exc
        raise ConfigError(f"model.family must be 'gaussian' or 'mixture', got {family!r}")

    def _count_law(self, section: str, prefix: str = "") -> CountLaw:
        values = self.ints(section, f"{prefix}counts", [2], minimum=0)
        probs = self.floats(section, f"{prefix}count_probs", [1.0] if len(values) == 1 else None)
        if len(values) != len(probs):
            raise ConfigError(f"{section}.{prefix}counts and {prefix}count_probs differ in length")
        return CountLaw(tuple(values), tuple(probs))

    def _gaussian_family(self) -> GaussianFamily:
        n_laws = self.int("model", "count_laws", 1, minimum=1)
        if n_laws == 1:
            laws = [self._count_law("model")]
            weights = [1.0]
        else:
            laws = [self._count_law("model", f"law{j}_") for j in range(1, n_laws + 1)]
            weights = self.floats("model", "count_weights")
        sigma_values = self.floats("model", "sigma_values", [self.float("model", "sigma", 1.0, positive=True)])
        sigma_weights = self.floats("model", "sigma_weights", [1.0] if len(sigma_values) == 1 else None)
        return GaussianFamily(count_laws=laws, count_weights=weights,
                              mu_mean=self.float("model", "mu", 0.0),
                              mu_std=self.float("model", "mu_std", 0.0, nonneg=True),
                              sigma_values=sigma_values, sigma_weights=sigma_weights,
                              tau1=self.float("model", "tau1", 7.0), tau2=self.float("model", "tau2", 5.0))

    def _law(self, name: str) -> BroodLaw:
        sec = f"law.{name}"
        if sec not in self.raw:
            raise ConfigError(f"model.laws names {name!r} but section [{sec}] is missing")
        kind = (self.get(sec, "type") or "").strip().lower()
        if kind == "gaussian":
            c = self._count_law(sec)
            return GaussianBroodLaw(c.values, c.probs, self.float(sec, "mu", 0.0),
                                    self.float(sec, "sigma", 1.0, positive=True), label=name)
        if kind == "finite":
            # atoms = p: z1 z2 ...; p: ...
            text = self.get(sec, "atoms")
            if not text:
                raise ConfigError(f"{sec}.atoms is required for finite laws")
            atoms = []
            for part in text.split(";"):
                if not part.strip():
                    continue
                if ":" not in part:
                    raise ConfigError(f"{sec}.atoms: entry {part!r} lacks 'p: displacements'")
                p, disp = part.split(":", 1)
                try:
                    atoms.append((float(p), tuple(float(z) for z in disp.split())))
                except ValueError as exc:
                    raise ConfigError(f"{sec}.atoms: cannot parse {part!r}") from exc
            return FiniteBroodLaw(atoms, label=name)
        if kind == "iid":
            counts = self.ints(sec, "counts", minimum=0)
            cprobs = self.floats(sec, "count_probs")
            disp = self.floats(sec, "displacements")
            dprobs = self.floats(sec, "displacement_probs")
            if len(counts) != len(cprobs) or len(disp) != len(dprobs):
                raise ConfigError(f"{sec}: value and probability lists differ in length")
            return FiniteBroodLaw.iid(dict(zip(counts, cprobs)), dict(zip(disp, dprobs)), label=name)
        raise ConfigError(f"{sec}.type must be 'gaussian', 'finite' or 'iid', got {kind!r}")

    def _mixture(self) -> MixtureEnvironment:
        names = [x.strip() for x in (self.get("model", "laws") or "").split(",") if x.strip()]
        if not names:
            raise ConfigError("model.laws must list at least one law section")
        weights = self.floats("model", "weights", [1.0 / len(names)] * len(names))
        if len(weights) != len(names):
            raise ConfigError("model.weights and model.laws differ in length")
        return MixtureEnvironment([self._law(n) for n in names], weights)


def _from_parser(parser: configparser.ConfigParser, source: str) -> ExperimentConfig:
    raw = {s: {k: v.strip() for k, v in parser.items(s)} for s in parser.sections()}
    for s in raw:
        if s not in SECTIONS and not s.startswith("law."):
            raise ConfigError(f"unknown config section [{s}]")
    return ExperimentConfig(raw=raw, source=source)


def _parser() -> configparser.ConfigParser:
    # ';' separates finite-law atoms, so only '#' starts a comment
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    return parser


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    parser = _parser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return _from_parser(parser, str(path))


def parse_config_text(text: str) -> ExperimentConfig:
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return _from_parser(parser, "<string>")
