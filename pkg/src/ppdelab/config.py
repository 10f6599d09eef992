"""Experiment configuration: INI-style text with defaults, validation and line-numbered errors."""
from __future__ import annotations

import configparser
import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, fields

from .lattice import Budget, BudgetExceeded

__all__ = ["ConfigError", "ExperimentConfig", "parse_config"]


class ConfigError(ValueError):
    """Invalid configuration text; the message names the offending line when known."""


@dataclass(frozen=True)
class ExperimentConfig:
    N: int = 8
    T: float = 1.0
    m: int = 1
    L: float = 1.0
    n_drift: int = 3
    n_var: int = 2
    p: float = 1.0
    delta_grid: tuple = (0.1,)
    n_ladder: tuple = (2, 5, 10, 20, 50)
    G: str = "heat"
    eps: float = 1.0
    terminal: str = "square"
    n_samples: int = 10
    sample_seed: int = 0
    jet_step: float = 0.1
    tol_scale: float = 1.0
    max_nodes: int = 2_000_000
    stability_ns: tuple = (2, 4, 8, 16)

    @property
    def dt(self):
        return self.T / self.N

    def budget(self):
        """Tree budget; ``PPDE_BUDGET`` in the environment wins over ``max_nodes``."""
        return Budget.from_env() if os.environ.get("PPDE_BUDGET") else Budget(max_nodes=self.max_nodes)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return _validate(d, {})


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_INTS = {"N", "m", "n_drift", "n_var", "n_samples", "sample_seed", "max_nodes"}
_FLOAT_LISTS = {"delta_grid", "n_ladder"}
_INT_LISTS = {"stability_ns"}
_STRS = {"G", "terminal"}
_POSITIVE = {"N", "T", "m", "L", "n_drift", "n_var", "p", "n_samples", "jet_step", "tol_scale", "max_nodes"}


def _where(lines, key):
    return lines.get(key, "?")


def _convert(key, raw):
    if key in _STRS:
        return raw.strip()
    if key in _FLOAT_LISTS or key in _INT_LISTS:
        parts = [x for x in re.split(r"[,\s]+", raw.strip()) if x]
        if not parts:
            raise ValueError("empty list")
        cast = int if key in _INT_LISTS else float
        return tuple(cast(x) for x in parts)
    if key in _INTS:
        v = float(raw)
        if v != int(v):
            raise ValueError("integer expected")
        return int(v)
    return float(raw)


def _validate(values, lines):
    for key, v in values.items():
        if key in _POSITIVE and not v > 0:
            raise ConfigError(f"line {_where(lines, key)}: {key} must be positive, got {v}")
        if key in _FLOAT_LISTS | _INT_LISTS and not all(x > 0 for x in v):
            raise ConfigError(f"line {_where(lines, key)}: {key} entries must be positive")
    if values.get("p", 1.0) < 1:
        raise ConfigError(f"line {_where(lines, 'p')}: p must be >= 1")
    cfg = ExperimentConfig(**values)
    try:
        cfg.budget().check_grid(cfg.N, cfg.n_drift, cfg.n_var)
    except BudgetExceeded as exc:
        bad = next((k for k in ("N", "n_drift", "n_var") if k in lines), None)
        where = f"line {lines[bad]}: " if bad else ""
        raise ConfigError(f"{where}{exc}") from None
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    """Parse INI text (any section names; keys are global) into a validated config.

    Keys outside any section are accepted too. Lists are comma or space separated.
    """
    body = text if re.search(r"^\s*\[", text, re.M) and not _has_loose_keys(text) else "[run]\n" + text
    offset = 0 if body is text else -1
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=", ":"), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(body)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        where = f"line {line + offset}: " if line else ""
        raise ConfigError(f"{where}{exc.message if hasattr(exc, 'message') else exc}") from None
    lines = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*([A-Za-z_][\w]*)\s*[=:]", raw)
        if m:
            lines.setdefault(m.group(1), i)
    values = {}
    for sec in parser.sections():
        for key, raw in parser.items(sec):
            if key not in _FIELDS:
                raise ConfigError(f"line {_where(lines, key)}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {_where(lines, key)}: duplicate key {key!r}")
            try:
                values[key] = _convert(key, raw)
            except ValueError as exc:
                raise ConfigError(f"line {_where(lines, key)}: bad value for {key}: {raw!r} ({exc})") from None
    return _validate(values, lines)


def _has_loose_keys(text):
    for raw in text.splitlines():
        s = raw.strip()
        if not s or s[0] in "#;":
            continue
        return not s.startswith("[")
    return False
