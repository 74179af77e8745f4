"""Plain-text experiment configuration.

Format: ``[section]`` headers, ``key = value`` lines, ``#`` comments.
Sections are ``run``, ``game``, ``hfl``, ``data`` and ``sweep``.  List values
are comma separated; a sweep range may be written ``start:stop:step``
(inclusive of ``stop``).  Absent keys take the Table-II style defaults below.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .data import ConfigurationError, PartitionSpec
from .game import GameConfig, GameError, make_game
from .hfl import HFLConfig
from .model import Architecture


class ConfigError(ValueError):
    def __init__(self, msg: str, key: str | None = None, line: int | None = None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{msg} ({', '.join(where)})" if where else msg)
        self.key = key
        self.line = line


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.replace(";", ",").split(",") if v.strip()]


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _cpw(s: str):
    return None if s.strip().lower() == "iid" else int(s)


def _matrix(s: str):
    # "0.1 0.9; 0.6 0.4" -> rows separated by ';'
    return [[float(v) for v in row.replace(",", " ").split()] for row in s.split(";") if row.strip()]


def _choice(*options):
    def conv(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s

    return conv


SCHEMA: dict[str, dict[str, Any]] = {
    "run": {
        "mode": _choice("game", "phase", "hfl", "sweep"),
        "output_dir": str,
        "master_seed": int,
        "preset": str,
    },
    "game": {
        "alpha": float,
        "beta": float,
        "delta": float,
        "dt": float,
        "max_steps": int,
        "eq_tol": float,
        "utility_eq_tol": float,
        "rng_seed": int,
        "d_z": _floats,
        "c_z": _floats,
        "m_z": _floats,
        "gamma_n": _floats,
        "s_n": _floats,
        "init": str,
        "n_inits": int,
    },
    "hfl": {
        "kappa1": int,
        "kappa2": int,
        "K": int,
        "eta0": float,
        "decay": float,
        "batch_size": int,
        "eval_every": int,
        "rng_seed": int,
        "hidden_dim": int,
        "nonlinearity": _choice("tanh", "sigmoid"),
        "track_intermediate": _bool,
        "seeds": int,
    },
    "data": {
        "J": int,
        "N": int,
        "classes_per_worker": _cpw,
        "edge_mode": _choice("iid", "noniid", "from-equilibrium"),
        "synthetic_fraction": float,
        "rng_seed": int,
        "subset_size": int,
        "pool_fraction": float,
        "noise_sigma": float,
        "shares": _floats,
        "root": str,
    },
    "sweep": {
        "parameter": str,
        "values": str,
        "runs": _choice("game", "hfl"),
    },
}

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"mode": "game", "output_dir": "out", "master_seed": 0, "preset": ""},
    "game": {
        "alpha": 0.001,
        "beta": 0.001,
        "delta": 0.01,
        "dt": 0.01,
        "max_steps": 1_000_000,
        "eq_tol": 1e-8,
        "rng_seed": 0,
        "d_z": [3000.0, 3000.0, 3000.0],
        "c_z": [10.0, 30.0, 50.0],
        "m_z": [10.0, 30.0, 50.0],
        "gamma_n": [100.0, 300.0, 500.0],
        "s_n": [2.0, 4.0, 6.0],
        "init": "random",
        "n_inits": 10,
    },
    "hfl": {
        "kappa1": 5,
        "kappa2": 2,
        "K": 300,
        "eta0": 0.01,
        "decay": 0.995,
        "batch_size": 20,
        "eval_every": 0,
        "rng_seed": 0,
        "hidden_dim": 32,
        "nonlinearity": "tanh",
        "track_intermediate": False,
        "seeds": 3,
    },
    "data": {
        "J": 50,
        "N": 3,
        "classes_per_worker": 1,
        "edge_mode": "noniid",
        "synthetic_fraction": 0.0,
        "rng_seed": 0,
        "pool_fraction": 0.1,
        "noise_sigma": 0.1,
    },
    "sweep": {"runs": "game"},
}

_SECTION = re.compile(r"^\[\s*([A-Za-z_]+)\s*\]$")


def derive_seed(master_seed: int, index: int) -> int:
    """Per-run seed: word 0 of SeedSequence(master_seed, spawn_key=(index,))."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(index,))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class ExperimentConfig:
    values: dict  # section -> key -> typed value (defaults filled)
    lines: dict = field(default_factory=dict)  # (section, key) -> line number

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def mode(self) -> str:
        return self.values["run"]["mode"]

    @property
    def master_seed(self) -> int:
        return self.values["run"]["master_seed"]

    @property
    def output_dir(self) -> str:
        return self.values["run"]["output_dir"]

    def game(self) -> GameConfig:
        g = self.values["game"]
        try:
            return make_game(
                d=g["d_z"],
                gamma=g["gamma_n"],
                s=g["s_n"],
                c=g["c_z"],
                m=g["m_z"],
                alpha=g["alpha"],
                beta=g["beta"],
                delta=g["delta"],
                dt=g["dt"],
                max_steps=g["max_steps"],
                eq_tol=g["eq_tol"],
                rng_seed=g["rng_seed"],
                utility_eq_tol=g.get("utility_eq_tol"),
            )
        except GameError as e:
            raise ConfigError(str(e), "game") from e

    def hfl(self) -> HFLConfig:
        h = self.values["hfl"]
        try:
            return HFLConfig(
                kappa1=h["kappa1"],
                kappa2=h["kappa2"],
                K=h["K"],
                eta0=h["eta0"],
                decay=h["decay"],
                batch_size=h["batch_size"],
                eval_every=h["eval_every"],
                rng_seed=h["rng_seed"],
                track_intermediate=h["track_intermediate"],
                arch=Architecture(hidden_dim=h["hidden_dim"], nonlinearity=h["nonlinearity"]),
            )
        except (ConfigurationError, ValueError) as e:
            raise ConfigError(str(e), "hfl") from e

    def partition(self) -> PartitionSpec:
        d = self.values["data"]
        try:
            return PartitionSpec(
                J=d["J"],
                classes_per_worker=d["classes_per_worker"],
                edge_mode=d["edge_mode"],
                synthetic_fraction=d["synthetic_fraction"],
                rng_seed=d["rng_seed"],
                shares=tuple(d["shares"]) if d.get("shares") else None,
            )
        except ConfigurationError as e:
            raise ConfigError(str(e), "data") from e

    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"), default=str)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def with_value(self, name: str, value) -> "ExperimentConfig":
        return self.with_values({name: value})

    def with_values(self, updates: dict) -> "ExperimentConfig":
        """Apply several overrides at once, validating only the result."""
        values = json.loads(json.dumps(self.values))
        for name, value in updates.items():
            section, key, index = resolve_parameter(name, values)
            if index is None:
                values[section][key] = value
            else:
                values[section][key][index] = value
        out = replace(self, values=values)
        out.validate()
        return out

    def sweep_points(self) -> list:
        sw = self.values.get("sweep", {})
        if "parameter" not in sw or "values" not in sw:
            return []
        return parse_values(sw["values"])

    def expand_sweep(self) -> list["ExperimentConfig"]:
        """One config per sweep value (or just ``[self]`` without a sweep)."""
        points = self.sweep_points()
        if not points:
            return [self]
        name = self.values["sweep"]["parameter"]
        section, key, _ = resolve_parameter(name, self.values)
        conv = SCHEMA[section][key]
        out = []
        for v in points:
            if conv is int:
                v = int(v)
            out.append(self.with_value(name, v))
        return out

    def validate(self) -> None:
        self.game()
        self.hfl()
        self.partition()
        g = self.values["game"]
        if not (len(g["d_z"]) == len(g["c_z"]) == len(g["m_z"])):
            raise ConfigError("d_z, c_z and m_z must have equal length", "d_z", self.lines.get(("game", "d_z")))
        if len(g["gamma_n"]) != len(g["s_n"]):
            raise ConfigError("gamma_n and s_n must have equal length", "gamma_n", self.lines.get(("game", "gamma_n")))


def parse_values(text: str) -> list[float]:
    text = text.strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ConfigError(f"bad range {text!r}; use start:stop:step", "values")
        start, stop, stepv = parts
        n = int(np.floor((stop - start) / stepv + 1e-9)) + 1
        return [start + i * stepv for i in range(n)]
    return _floats(text)


_LIST_KEYS = {"gamma": ("game", "gamma_n"), "s": ("game", "s_n"), "d": ("game", "d_z"), "c": ("game", "c_z"), "m": ("game", "m_z")}


def resolve_parameter(name: str, values: dict) -> tuple[str, str, int | None]:
    """Map a sweep parameter name to (section, key, list index).

    Accepts ``section.key``, a key unique across sections, or ``gamma_2`` /
    ``c_1`` style 1-based entries of the per-server / per-population lists.
    """
    if "." in name:
        section, key = name.split(".", 1)
        if section in SCHEMA and key in SCHEMA[section]:
            return section, key, None
        raise ConfigError(f"unknown sweep parameter {name!r}", name)
    m = re.fullmatch(r"([a-z]+)_(\d+)", name)
    if m and m.group(1) in _LIST_KEYS:
        section, key = _LIST_KEYS[m.group(1)]
        idx = int(m.group(2)) - 1
        if not 0 <= idx < len(values[section][key]):
            raise ConfigError(f"sweep parameter {name!r} out of range", name)
        return section, key, idx
    hits = [s for s in ("game", "hfl", "data") if name in SCHEMA[s]]
    if len(hits) == 1:
        return hits[0], name, None
    if len(hits) > 1:
        raise ConfigError(f"ambiguous sweep parameter {name!r}; qualify it as section.key", name)
    raise ConfigError(f"unknown sweep parameter {name!r}", name)


def parse_config(text: str) -> ExperimentConfig:
    values = {s: dict(DEFAULTS.get(s, {})) for s in SCHEMA}
    values = json.loads(json.dumps(values))
    lines: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            section = m.group(1)
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", section, lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", None, lineno)
        if section is None:
            raise ConfigError("key outside of any section", None, lineno)
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key in [{section}]", key, lineno)
        try:
            values[section][key] = SCHEMA[section][key](val)
        except ValueError as e:
            raise ConfigError(f"bad value {val!r}: {e}", key, lineno) from None
        lines[(section, key)] = lineno

    sw = values["sweep"]
    if ("parameter" in sw) != ("values" in sw):
        raise ConfigError("[sweep] needs both parameter and values", "sweep")
    if "parameter" in sw:
        resolve_parameter(sw["parameter"], values)
        try:
            parse_values(sw["values"])
        except ValueError as e:
            raise ConfigError(str(e), "values", lines.get(("sweep", "values"))) from None

    cfg = ExperimentConfig(values, lines)
    cfg.validate()
    return cfg


def default_config() -> ExperimentConfig:
    return parse_config("")
