"""INI-style configuration files with strict keys and line-numbered errors.

Run configuration sections mirror the dataclasses they build:

    [sdf]       depth, width, feature_size, encoding_order, skip_layer, init_radius, beta
    [renderer]  depth, width, view_encoding_order
    [trace]     max_sphere_steps, sdf_threshold, fallback_samples, secant_iters
    [train]     epochs, lr, lr_milestones, lr_gamma, camera_lr, pixels_per_image,
                eikonal_extra_points, checkpoint_every, seed
    [loss]      mask, eikonal
    [alpha]     alpha0, factor, period, max_multiplications
    [cameras]   trainable
    [ablation]  drop_normal, drop_view, drop_feature
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .networks import RendererConfig, SdfNetConfig
from .raycaster import TraceConfig
from .training import AlphaSchedule, LossWeights, ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def key_lines(text: str) -> dict[tuple[str, str], int]:
    """Map (section, key) to its 1-based line number."""
    out: dict[tuple[str, str], int] = {}
    section = None
    for i, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            out[(section, "")] = i
            continue
        m = _KEY_RE.match(line)
        if m and section is not None and not line[:1].isspace():
            out[(section, m.group(1).strip().lower())] = i
    return out


def parse_ini(text: str, source: str = "<config>") -> tuple[configparser.ConfigParser, dict]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        if lineno is None and getattr(exc, "errors", None):
            lineno = exc.errors[0][0]
        loc = f"{source}:{lineno}" if lineno else source
        raise ConfigError(f"{loc}: {exc.message.splitlines()[0] if hasattr(exc, 'message') else exc}") from None
    return parser, key_lines(text)


def convert(raw: str, kind: Any, where: str):
    """Convert a raw string to the annotated type ``kind`` (given as a string annotation)."""
    k = str(kind).replace(" ", "")
    optional = "None" in k
    if optional and raw.strip().lower() in ("", "none"):
        return None
    base = k.replace("|None", "").replace("None|", "")
    try:
        if base == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        if base.startswith("tuple[int"):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if base.startswith("tuple[float"):
            return tuple(float(x) for x in raw.replace(",", " ").split())
        if base == "str":
            return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}: unsupported field type {kind}")


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return " ".join(format_value(v) for v in value)
    return str(value)


def read_section(parser, lines, source: str, section: str, fields: dict[str, Any]) -> dict[str, Any]:
    """Values of the keys present in ``section``; unknown keys raise ConfigError."""
    if not parser.has_section(section):
        return {}
    out = {}
    for key, raw in parser.items(section):
        where = f"{source}:{lines.get((section, key), '?')}"
        if key not in fields:
            raise ConfigError(f"{where}: unknown key '{key}' in [{section}]")
        out[key] = convert(raw, fields[key], where)
    return out


def _fields(cls, exclude=()) -> dict[str, Any]:
    return {f.name: f.type for f in dataclasses.fields(cls) if f.name not in exclude}


_RENDER_EXCLUDE = ("use_normal", "use_view", "use_feature")


@dataclass
class RunConfig:
    sdf: SdfNetConfig = field(default_factory=SdfNetConfig)
    renderer: RendererConfig = field(default_factory=RendererConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    alpha: AlphaSchedule = field(default_factory=AlphaSchedule)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.sdf, self.renderer, self.trace)

    def ablate(self, what: str) -> None:
        if what not in ("normal", "view", "feature"):
            raise ConfigError(f"unknown ablation '{what}'")
        setattr(self.renderer, f"use_{what}", False)

    # -- serialisation ---------------------------------------------------

    def to_text(self) -> str:
        parts = []
        for section, obj, exclude in [("sdf", self.sdf, ()), ("renderer", self.renderer, _RENDER_EXCLUDE),
                                      ("trace", self.trace, ()), ("train", self.train, ("train_cameras",)),
                                      ("loss", self.loss, ()), ("alpha", self.alpha, ())]:
            parts.append(f"[{section}]")
            for name in _fields(type(obj), exclude):
                parts.append(f"{name} = {format_value(getattr(obj, name))}")
            parts.append("")
        parts += ["[cameras]", f"trainable = {format_value(self.train.train_cameras)}", "",
                  "[ablation]",
                  f"drop_normal = {format_value(not self.renderer.use_normal)}",
                  f"drop_view = {format_value(not self.renderer.use_view)}",
                  f"drop_feature = {format_value(not self.renderer.use_feature)}", ""]
        return "\n".join(parts)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        parser, lines = parse_ini(text, source)
        known = {"sdf", "renderer", "trace", "train", "loss", "alpha", "cameras", "ablation"}
        for section in parser.sections():
            if section not in known:
                raise ConfigError(f"{source}:{lines.get((section, ''), '?')}: unknown section [{section}]")

        def build(section, klass, exclude=()):
            values = read_section(parser, lines, source, section, _fields(klass, exclude))
            try:
                return klass(**values)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{source}:{lines.get((section, ''), '?')}: [{section}] {exc}") from None

        cfg = cls(build("sdf", SdfNetConfig), build("renderer", RendererConfig, _RENDER_EXCLUDE),
                  build("trace", TraceConfig), build("train", TrainConfig, ("train_cameras",)),
                  build("loss", LossWeights), build("alpha", AlphaSchedule))
        cams = read_section(parser, lines, source, "cameras", {"trainable": "bool"})
        if "trainable" in cams:
            cfg.train.train_cameras = cams["trainable"]
        abl = read_section(parser, lines, source, "ablation",
                           {"drop_normal": "bool", "drop_view": "bool", "drop_feature": "bool"})
        for what in ("normal", "view", "feature"):
            if abl.get(f"drop_{what}"):
                cfg.ablate(what)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), str(path))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())
