"""Run configuration: ``[section]`` headers with ``key = value`` lines.

Every key has a default (or is required); unknown sections and keys are
rejected.  ``resolve`` returns typed values, ``dump`` the fully-resolved text.
"""
from __future__ import annotations

import configparser
import logging
import os
from typing import Any, Callable

log = logging.getLogger(__name__)

REQUIRED = object()


class ConfigError(ValueError):
    pass


def _opt(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str):
        return None if text.lower() in ("none", "") else parse(text)
    return inner


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.replace(" ", "").split(",") if s)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(s) for s in text.replace(" ", "").split(",") if s)


def _names(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _pairs(text: str) -> tuple[tuple[str, str], ...]:
    out = []
    for item in _names(text):
        name, sep, value = item.partition(":")
        if not sep:
            raise ValueError(f"expected name:value, got {item!r}")
        out.append((name.strip(), value.strip()))
    return tuple(out)


SCHEMA: dict[str, dict[str, tuple[Any, Callable[[str], Any]]]] = {
    "data": {
        "observed": ("", _names),
        "missing": ("", _names),
    },
    "model": {
        "latent_dim": ("8", int),
        "encoder_hidden": ("64,64", _ints),
        "prior_hidden": ("64,64", _ints),
        "decoder_hidden": ("64,64", _ints),
        "classifier_hidden": ("32", _ints),
        "activation": ("softplus", str),
        "dropout": ("0.2", float),
        "prior_mode": ("conditional", str),
        "fixed_decoder_var": ("none", _opt(float)),
        "classify_from": ("prior", str),
        "families": ("", _pairs),
    },
    "objective": {
        "omega": ("0.5", float),
        "alpha": ("10", float),
        "lambda": ("1000", float),
        "bandwidth": ("latent_dim", str),
        "sigma2": ("none", _opt(float)),
        "scales": ("1", _floats),
        "estimator": ("u_statistic", str),
    },
    "trainer": {
        "epochs": ("50", int),
        "batch_size": ("256", int),
        "seed": ("0", int),
        "lr": ("1e-4", float),
        "shuffle": ("true", _bool),
        "eval_every": ("0", int),
        "clip_norm": ("none", _opt(float)),
        "stage": ("single", str),
        "stage1_epochs": ("none", _opt(int)),
        "eval_samples": ("1", int),
    },
    "diagnostics": {
        "delta": ("0.01", float),
        "eps_min": ("0", float),
        "eps_max": ("6", float),
        "eps_points": ("61", int),
        "samples": ("1", int),
        "seed": ("0", int),
    },
    "synth": {
        "modalities": (REQUIRED, _pairs),
        "rows": (REQUIRED, int),
        "test_rows": ("1000", int),
        "classes": ("4", int),
        "latent_dim": ("8", int),
        "depth": ("1", int),
        "noise": ("0.5", float),
        "noise_var_range": ("none", _opt(_floats)),
        "hetero_modalities": ("", _names),
        "separation": ("2.0", float),
        "label_noise": ("0", float),
        "seed": ("0", int),
        "observed": ("", _names),
        "missing": ("", _names),
        "standardize": ("true", _bool),
    },
    "gradcheck": {
        "seed": ("0", int),
        "step": ("1e-5", float),
        "tolerance": ("1e-4", float),
        "batch": ("4", int),
    },
}


class RunConfig:
    """Raw string values per section, validated against ``SCHEMA``."""

    def __init__(self, raw: dict[str, dict[str, str]] | None = None):
        self.raw: dict[str, dict[str, str]] = {s: {} for s in SCHEMA}
        for section, items in (raw or {}).items():
            for key, value in items.items():
                self.set(section, key, value)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, strict=True)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        return cls({s: dict(parser.items(s)) for s in parser.sections()})

    def set(self, section: str, key: str, value: str) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.raw[section][key] = str(value).strip()

    def apply_overrides(self, overrides) -> None:
        for item in overrides or ():
            target, sep, value = item.partition("=")
            section, dot, key = target.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            self.set(section, key, value)

    def apply_env(self) -> None:
        seed = os.environ.get("CMMD_SEED")
        if seed is not None:
            log.warning("CMMD_SEED=%s overrides configured seeds", seed)
            for section in ("trainer", "synth"):
                self.set(section, "seed", seed)

    def section(self, name: str, required: bool = True) -> dict[str, Any]:
        out = {}
        for key, (default, parse) in SCHEMA[name].items():
            text = self.raw[name].get(key)
            if text is None:
                if default is REQUIRED:
                    if required:
                        raise ConfigError(f"missing required key {name}.{key}")
                    continue
                text = default
            try:
                out[key] = parse(text)
            except ValueError as e:
                raise ConfigError(f"bad value for {name}.{key}: {text!r} ({e})") from None
        return out

    def dump(self, sections=None) -> str:
        lines = []
        for name in sections or SCHEMA:
            lines.append(f"[{name}]")
            for key, (default, _) in SCHEMA[name].items():
                text = self.raw[name].get(key, None if default is REQUIRED else default)
                if text is not None:
                    lines.append(f"{key} = {text}")
            lines.append("")
        return "\n".join(lines)
