"""Run configuration: TOML file merged over defaults, then CLI overrides."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = ["ConfigError", "DEFAULTS", "load_toml", "load_config", "config_hash"]


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "input": {
        "corpus": None,
        "ontology": None,
        "major_only": True,
        "years": [1970, 2018],
        "pub_types": ["Journal Article", "Review"],
        "branches": list("ABCDEFGJLN"),
        "on_error": "skip",
    },
    "cooccur": {
        "levels": [1, 2],
        "periods": [[1970, 1989], [1990, 1999], [2000, 2009], [2010, 2018]],
        "annual_exports": True,
    },
    "cluster": {
        "seed": 42,
        "resolution": 1.0,
        "diagonal": "selfloop",
        "clique_years": None,
    },
    "bridges": {
        "level": 2,
        "scope": "cluster",
        "top_rank": 20,
        "min_coverage": 0.5,
        "p_max": 0.01,
        "min_slope": 0.1,
        "on": "rank",
        "span": None,
        "ego_k": 10,
        "ego_nodes": None,
        "smoothing": 5,
    },
    "diversity": {
        "level": 2,
        "window": 3,
        "core_min": 0.5,
        "flag_min": 0.25,
        "strict_jl": False,
        "trend_center": 1990,
        "confidence": 0.99,
        "per_article": True,
        "journals": None,
    },
    "run": {
        "jobs": 1,
        "unit_bytes": 32 * 1024 * 1024,
        "chunk_articles": 65536,
    },
}


def load_toml(path: str | os.PathLike) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}{key!r} must be a table")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> dict:
    """Resolve defaults <- file <- overrides; relative input paths are made
    relative to the config file's directory."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        raw = load_toml(path)
        cfg = _merge(cfg, raw)
        base = Path(path).resolve().parent
        for key in ("corpus", "ontology"):
            val = cfg["input"][key]
            if val is not None and not os.path.isabs(val):
                cfg["input"][key] = str(base / val)
        journals = cfg["diversity"]["journals"]
        if isinstance(journals, str) and not os.path.isabs(journals):
            cfg["diversity"]["journals"] = str(base / journals)
    if overrides:
        cfg = _merge(cfg, overrides)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    inp = cfg["input"]
    y = inp["years"]
    if not (isinstance(y, list) and len(y) == 2 and y[0] <= y[1]):
        raise ConfigError(f"input.years must be [first, last], got {y!r}")
    if inp["on_error"] not in ("skip", "raise"):
        raise ConfigError("input.on_error must be 'skip' or 'raise'")
    for lv in cfg["cooccur"]["levels"]:
        if lv not in (1, 2):
            raise ConfigError(f"cooccur.levels entries must be 1 or 2, got {lv!r}")
    if cfg["bridges"]["level"] not in (1, 2) or cfg["diversity"]["level"] not in (1, 2):
        raise ConfigError("bridges.level and diversity.level must be 1 or 2")
    if cfg["bridges"]["scope"] not in ("cluster", "global"):
        raise ConfigError("bridges.scope must be 'cluster' or 'global'")
    if cfg["bridges"]["on"] not in ("rank", "norm_rank"):
        raise ConfigError("bridges.on must be 'rank' or 'norm_rank'")
    if cfg["cluster"]["diagonal"] not in ("selfloop", "drop"):
        raise ConfigError("cluster.diagonal must be 'selfloop' or 'drop'")
    if cfg["diversity"]["window"] < 1:
        raise ConfigError("diversity.window must be >= 1")
    spans = sorted(tuple(p) for p in cfg["cooccur"]["periods"])
    for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
        if a1 <= b0:
            raise ConfigError(f"periods [{a0}, {b0}] and [{a1}, {b1}] overlap")
    if cfg["run"]["jobs"] < 1:
        raise ConfigError("run.jobs must be >= 1")


def config_hash(section: object) -> str:
    canon = json.dumps(section, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()
