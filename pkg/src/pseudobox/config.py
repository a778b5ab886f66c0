"""TOML configuration with strict keys and command-line overrides.

A config file holds up to six sections: [sim], [ba], [cluster], [fit],
[eval], and [labels]. Every key must name a real field of the matching
dataclass; typos fail fast with ConfigError instead of silently using a
default. Overrides are "section.key=value" strings whose value part is
parsed as TOML, so strings need quotes and arrays use brackets.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

try:
    import tomllib as tomli
except ImportError:  # Python < 3.11
    import tomli

from .boxfit import FitConfig
from .cluster import ClusterConfig
from .errors import ConfigError
from .evalmetrics import EvalConfig
from .pipeline import PipelineConfig
from .simulate import SimConfig
from .triangulate import BaConfig

__all__ = ["AppConfig", "load_config", "parse_override"]

_SECTION_CLASSES = {
    "sim": SimConfig,
    "ba": BaConfig,
    "cluster": ClusterConfig,
    "fit": FitConfig,
    "eval": EvalConfig,
}
_LABELS_KEYS = ("initial_depth_range", "retrain_depth_range", "score_floor")


@dataclass(frozen=True)
class AppConfig:
    """Aggregated configuration for the CLI and the pipeline."""

    sim: SimConfig
    pipeline: PipelineConfig


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(unknown)}"
        )


def parse_override(text: str):
    """Split "section.key=value" into (section, key, parsed value)."""
    head, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} is missing '='")
    path = head.strip()
    if path.count(".") != 1:
        raise ConfigError(f"override key {path!r} must look like section.key")
    section, key = path.split(".")
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"override {text!r}: bad TOML value ({exc})") from exc
    return section, key, value


def load_config(path=None, overrides=()) -> AppConfig:
    """Read a TOML file (optional), apply overrides, build every config."""
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: bad TOML ({exc})") from exc

    known_sections = set(_SECTION_CLASSES) | {"labels"}
    _check_keys("<top level>", data, known_sections)
    sections = {name: dict(data.get(name, {})) for name in known_sections}
    for name, body in sections.items():
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table")

    for text in overrides:
        section, key, value = parse_override(text)
        if section not in known_sections:
            raise ConfigError(f"override names unknown section {section!r}")
        sections[section][key] = value

    built = {}
    for name, cls in _SECTION_CLASSES.items():
        body = sections[name]
        allowed = {f.name for f in fields(cls)}
        _check_keys(name, body, allowed)
        built[name] = cls(**{k: _tuplify(v) for k, v in body.items()})

    labels_body = sections["labels"]
    _check_keys("labels", labels_body, _LABELS_KEYS)
    pipeline = PipelineConfig(
        ba=built["ba"],
        cluster=built["cluster"],
        fit=built["fit"],
        eval=built["eval"],
        **{k: _tuplify(v) for k, v in labels_body.items()},
    )
    return AppConfig(sim=built["sim"], pipeline=pipeline)
