"""INI-style run configuration with ``section.key=value`` overrides.

Recognised sections::

    [fit]            FitConfig fields plus lambda_bpl / lambda_srl / lambda_pal
                     and ``preset`` (kitti or sunrgbd)
    [ratio_priors]   class = ratio (replaces the built-in table)
    [preprocess]     PrepConfig fields (``mode`` defaults to the fit mode)
    [synth]          SynthSceneSpec fields; ``preset = outdoor|indoor``
    [synth.class.NAME]  ClassSpec fields for one synthetic class
    [data]           image_width, image_height, classes (comma separated)

Tuples are written as comma-separated values, ``none`` clears optional fields.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field

from ..fitter import DEFAULT_RATIO_PRIORS, FitConfig
from ..losses import LossWeights
from ..preprocessing import INDOOR, OUTDOOR, PrepConfig
from .synth import CAR, INDOOR_CLASSES, ClassSpec, SynthSceneSpec


class ConfigError(ValueError):
    """Unknown key or unparsable value; the message names both."""


@dataclass
class RunConfig:
    fit: FitConfig
    prep: PrepConfig
    synth: SynthSceneSpec
    image_size: tuple[int, int] = (1242, 375)
    classes: tuple[str, ...] | None = None


_WEIGHT_KEYS = ("lambda_bpl", "lambda_srl", "lambda_pal")
_PRESETS = {"kitti": (LossWeights(0.3, 0.1, 0.1), OUTDOOR), "sunrgbd": (LossWeights(2e-3, 2e-3, 1e-4), INDOOR)}


def _parse_scalar(text: str, like, where: str):
    t = text.strip()
    try:
        if isinstance(like, bool):
            low = t.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(t)
        if isinstance(like, int):
            return int(t)
        if isinstance(like, float):
            return float(t)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(like).__name__}") from None
    return t


def _parse_value(text: str, default, where: str):
    if text.strip().lower() == "none":
        return None
    if isinstance(default, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        if default and len(parts) != len(default):
            raise ConfigError(f"{where}: expected {len(default)} comma-separated values, got {text!r}")
        return tuple(_parse_scalar(p, d, where) for p, d in zip(parts, default))
    if default is None:
        # optional numeric fields
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{where}: cannot parse {text!r} as a number") from None
    return _parse_scalar(text, default, where)


def _field_defaults(cls) -> dict:
    out = {}
    inst = cls()
    for f in dataclasses.fields(cls):
        out[f.name] = getattr(inst, f.name)
    return out


def _apply_section(section, defaults: dict, skip=(), where="") -> dict:
    values = {}
    for key, text in section.items():
        if key in skip:
            continue
        if key not in defaults:
            raise ConfigError(f"unknown key {where}.{key}")
        values[key] = _parse_value(text, defaults[key], f"{where}.{key}")
    return values


def parse_overrides(pairs) -> list[tuple[str, str, str]]:
    """``['fit.lambda_srl=0.2', ...]`` to ``[(section, key, value), ...]``."""
    out = []
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        lhs, value = item.split("=", 1)
        if "." not in lhs:
            raise ConfigError(f"override {item!r} needs a section prefix")
        section, key = lhs.rsplit(".", 1)
        out.append((section.strip(), key.strip(), value.strip()))
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep class names case-sensitive
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    for section, key, value in parse_overrides(overrides):
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)

    known = {"fit", "ratio_priors", "preprocess", "synth", "data"}
    for name in parser.sections():
        if name not in known and not name.startswith("synth.class."):
            raise ConfigError(f"unknown section [{name}]")

    fit_sec = parser["fit"] if parser.has_section("fit") else {}
    preset = fit_sec.get("preset", "kitti").strip().lower()
    if preset not in _PRESETS:
        raise ConfigError(f"fit.preset must be one of {sorted(_PRESETS)}, got {preset!r}")
    weights, mode = _PRESETS[preset]
    fit_defaults = _field_defaults(FitConfig)
    fit_defaults.pop("weights")
    fit_defaults.pop("ratio_priors")
    fit_defaults["mode"] = mode
    wvals = dataclasses.asdict(weights)
    for key in _WEIGHT_KEYS:
        if key in fit_sec:
            wvals[key] = _parse_value(fit_sec[key], 0.0, f"fit.{key}")
    fit_vals = _apply_section(fit_sec, fit_defaults, skip=_WEIGHT_KEYS + ("preset",), where="fit")
    priors = dict(DEFAULT_RATIO_PRIORS)
    if parser.has_section("ratio_priors"):
        priors = {k: _parse_value(v, 0.0, f"ratio_priors.{k}") for k, v in parser["ratio_priors"].items()}
    try:
        fit = FitConfig(weights=LossWeights(**wvals), ratio_priors=priors, **{**{"mode": mode}, **fit_vals})
    except ValueError as exc:
        raise ConfigError(f"[fit]: {exc}") from None

    prep_defaults = _field_defaults(PrepConfig)
    prep_sec = parser["preprocess"] if parser.has_section("preprocess") else {}
    prep_vals = _apply_section(prep_sec, prep_defaults, where="preprocess")
    prep_vals.setdefault("mode", fit.mode)
    try:
        prep = PrepConfig(**prep_vals)
    except ValueError as exc:
        raise ConfigError(f"[preprocess]: {exc}") from None

    synth_sec = parser["synth"] if parser.has_section("synth") else {}
    spreset = synth_sec.get("preset", "outdoor").strip().lower()
    if spreset not in (OUTDOOR, INDOOR):
        raise ConfigError(f"synth.preset must be outdoor or indoor, got {spreset!r}")
    base = SynthSceneSpec.indoor() if spreset == INDOOR else SynthSceneSpec()
    synth_defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(SynthSceneSpec)}
    synth_defaults.pop("classes")
    synth_vals = _apply_section(synth_sec, synth_defaults, skip=("preset",), where="synth")
    classes = dict(base.classes)
    for name in parser.sections():
        if name.startswith("synth.class."):
            cname = name[len("synth.class.") :]
            cdef = dataclasses.asdict(classes.get(cname, CAR))
            cdef["length_range"] = tuple(cdef["length_range"])
            cvals = _apply_section(parser[name], cdef, where=name)
            classes[cname] = ClassSpec(**{**cdef, **cvals})
    try:
        synth = dataclasses.replace(base, classes=classes, **synth_vals)
    except ValueError as exc:
        raise ConfigError(f"[synth]: {exc}") from None

    data_sec = parser["data"] if parser.has_section("data") else {}
    data_defaults = {"image_width": synth.image_size[0], "image_height": synth.image_size[1], "classes": ""}
    data_vals = _apply_section(data_sec, data_defaults, where="data")
    image_size = (int(data_vals.get("image_width", synth.image_size[0])),
                  int(data_vals.get("image_height", synth.image_size[1])))
    cls_text = data_vals.get("classes") or ""
    cls = tuple(c.strip() for c in cls_text.split(",") if c.strip()) or None
    return RunConfig(fit, prep, synth, image_size, cls)


def config_to_text(cfg: RunConfig) -> str:
    """Render a config back to INI text (used to record the effective settings)."""
    lines = ["[fit]"]
    for k, v in dataclasses.asdict(cfg.fit.weights).items():
        lines.append(f"{k} = {v!r}")
    for f in dataclasses.fields(FitConfig):
        if f.name in ("weights", "ratio_priors"):
            continue
        lines.append(f"{f.name} = {_render(getattr(cfg.fit, f.name))}")
    lines += ["", "[ratio_priors]"] + [f"{k} = {v!r}" for k, v in sorted(cfg.fit.ratio_priors.items())]
    lines += ["", "[preprocess]"]
    for f in dataclasses.fields(PrepConfig):
        lines.append(f"{f.name} = {_render(getattr(cfg.prep, f.name))}")
    lines += ["", "[synth]", f"preset = {cfg.synth.mode}"]
    for f in dataclasses.fields(SynthSceneSpec):
        if f.name != "classes":
            lines.append(f"{f.name} = {_render(getattr(cfg.synth, f.name))}")
    for name, spec in sorted(cfg.synth.classes.items()):
        lines += ["", f"[synth.class.{name}]"]
        lines += [f"{k} = {_render(v)}" for k, v in dataclasses.asdict(spec).items()]
    lines += ["", "[data]", f"image_width = {cfg.image_size[0]}", f"image_height = {cfg.image_size[1]}"]
    lines.append(f"classes = {','.join(cfg.classes or ())}")
    return "\n".join(lines) + "\n"


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(_render(x) for x in v)
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


__all__ = ["ConfigError", "RunConfig", "load_config", "parse_overrides", "config_to_text", "INDOOR_CLASSES"]
