"""Run configuration files: ``key = value`` lines grouped into per-module sections.

Every key maps onto one :class:`HarnessConfig` field. Unknown sections or keys
are errors, so a typo cannot silently fall back to a default. ``dump_config``
writes the effective configuration in the same format; loading it back gives
an equal object.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from typing import Dict, Iterable, Mapping, Optional, Tuple

from .harness import HarnessConfig

SECTIONS: Dict[str, Tuple[str, ...]] = {
    "run": ("seed", "seeds", "workers"),
    "env": ("grid_size", "cells_per_cost_kind", "max_steps"),
    "dataset": ("n_train_maps", "n_eval_maps", "pool_variants", "pool_thresholds", "pool_distances"),
    "interpreter": (
        "interp_trajectories", "interp_grid_sizes", "interp_max_steps", "interp_epochs", "interp_lr",
        "interp_batch_size", "interp_word_dropout",
    ),
    "policy": ("algo", "n_updates", "batch_steps", "n_envs", "hidden", "use_mask", "use_budget", "use_threshold",
               "value_ridge", "penalty_weight", "h_D_init"),
    "safeopt": ("delta", "gamma", "gamma_c", "lam_r", "lam_c", "cg_iters", "damping", "projection",
                "constraint_grouping"),
    "eval": ("fine_tune_updates", "eval_episodes"),
}
_SECTION_OF = {key: sec for sec, keys in SECTIONS.items() for key in keys}
_TYPES = typing.get_type_hints(HarnessConfig)

assert set(_SECTION_OF) == {f.name for f in dataclasses.fields(HarnessConfig)}, "config sections out of sync"


class ConfigError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw: str):
    tp = _TYPES[key]
    raw = raw.strip()
    try:
        if tp is bool:
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(f"not a boolean: {raw!r}")
            return low in _TRUE
        if typing.get_origin(tp) is tuple:
            item = typing.get_args(tp)[0]
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(item(p) for p in parts)
        return tp(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    """``key=value`` strings (keys optionally ``section.key``) into a flat dict."""
    out = {}
    for p in pairs:
        if "=" not in p:
            raise ConfigError(f"override {p!r} is not key=value")
        k, v = p.split("=", 1)
        out[k.strip().split(".")[-1]] = v.strip()
    return out


def load_config(text: Optional[str] = None, overrides: Optional[Mapping[str, object]] = None) -> HarnessConfig:
    """Defaults, then the file text, then ``overrides`` (raw strings or typed values)."""
    values: Dict[str, object] = {}
    if text:
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config parse error: {exc}") from exc
        for sec in parser.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown section [{sec}]")
            for key, raw in parser.items(sec):
                if key not in SECTIONS[sec]:
                    where = f" (belongs in [{_SECTION_OF[key]}])" if key in _SECTION_OF else ""
                    raise ConfigError(f"unknown key {key!r} in [{sec}]{where}")
                values[key] = _convert(key, raw)
    for key, v in (overrides or {}).items():
        if key not in _SECTION_OF:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, v) if isinstance(v, str) else v
    try:
        return HarnessConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(config: HarnessConfig) -> str:
    lines = []
    for sec, keys in SECTIONS.items():
        lines.append(f"[{sec}]")
        lines += [f"{k} = {_format(getattr(config, k))}" for k in keys]
        lines.append("")
    return "\n".join(lines)
