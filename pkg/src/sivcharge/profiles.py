"""Named, versioned model parameter sets."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping

import yaml

from .model import ChargeModelParams

__all__ = ["load_profile", "list_profiles", "profiles_version", "DEFAULT_PROFILE"]

DEFAULT_PROFILE = "emitter_a"


@lru_cache(maxsize=8)
def _read(path: str | None) -> dict:
    if path is None:
        text = resources.files("sivcharge").joinpath("data/profiles.yaml").read_text()
    else:
        text = Path(path).read_text()
    doc = yaml.safe_load(text) or {}
    if not isinstance(doc.get("profiles"), Mapping):
        raise ValueError(f"profiles file {path or '<builtin>'} has no 'profiles' mapping")
    return doc


def _merge(base: dict, over: Mapping) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = {**out.get(k, {}), **v} if k == "hole_gen" else v
    return out


def _resolve(profiles: Mapping, name: str, seen: tuple = ()) -> dict:
    if name in seen:
        raise ValueError(f"profile inheritance cycle: {' -> '.join(seen + (name,))}")
    try:
        entry = profiles[name]
    except KeyError:
        raise KeyError(f"unknown profile {name!r}; available: {sorted(profiles)}") from None
    params = dict(entry.get("params") or {})
    if "base" in entry:
        params = _merge(_resolve(profiles, entry["base"], seen + (name,)), params)
    return params


def load_profile(name: str = DEFAULT_PROFILE, path: str | None = None) -> ChargeModelParams:
    """Parameters of profile ``name`` from the built-in file or ``path``."""
    profiles = _read(None if path is None else str(path))["profiles"]
    return ChargeModelParams.from_dict(_resolve(profiles, name))


def list_profiles(path: str | None = None) -> list[tuple[str, str]]:
    """``(name, one-line description)`` for every profile, sorted by name."""
    profiles = _read(None if path is None else str(path))["profiles"]
    return [(k, " ".join(str(v.get("description", "")).split())) for k, v in sorted(profiles.items())]


def profiles_version(path: str | None = None) -> int:
    return int(_read(None if path is None else str(path)).get("version", 0))
