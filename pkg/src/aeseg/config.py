"""Pipeline configuration and its flat ``key = value`` file format.

Grammar, one entry per line::

    # comment
    section.key = value

Blank lines and ``#`` comments are skipped. Keys are ``seed``, ``out``,
``threads`` or ``<section>.<field>`` with sections ``data`` (scene
generator), ``ae`` (classifier and erasing) and ``psl`` (segmentation).
Values are parsed by the type of the target field: integers, floats,
``true``/``false``, ``none`` for optional fields, and comma-separated
lists for tuples. Repeated or unknown keys are errors.

Precedence is command-line flag, then file, then built-in default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .models import ConfigError, Topology, TrainConfig
from .synthdata import SceneSpec

ARTIFACT_ROOT_ENV = "AESEG_ARTIFACT_ROOT"


def default_segmentation_config() -> TrainConfig:
    return TrainConfig(epochs=12)


@dataclass
class PipelineConfig:
    seed: int = 42
    out: str = "runs/default"
    threads: int = 1
    data: SceneSpec = field(default_factory=SceneSpec)
    ae: TrainConfig = field(default_factory=TrainConfig)
    psl: TrainConfig = field(default_factory=default_segmentation_config)
    channels: tuple[int, ...] = Topology.channels
    strides: tuple[int, ...] = Topology.strides
    diagnostic_step: bool = True
    enable_psl: bool = True
    enable_pslpp: bool = True
    gt_weights: bool = True
    shat_weight: float = 1.0

    def __post_init__(self):
        self.apply_seed(self.seed)
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        self.topology()

    def apply_seed(self, seed: int) -> None:
        if not 0 <= int(seed) < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.data.seed = self.seed
        self.ae.seed = self.seed
        self.psl.seed = self.seed

    def topology(self) -> Topology:
        return Topology(n_classes=self.data.n_classes, channels=tuple(self.channels),
                        strides=tuple(self.strides), image_size=tuple(self.data.image_size))

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "out": self.out, "threads": self.threads}
        for key, value in flatten(self).items():
            d[key] = value
        return d

    def digest(self) -> str:
        """Hash of everything that influences results (not ``out`` or ``threads``)."""
        d = {k: v for k, v in self.to_dict().items() if k not in ("out", "threads")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def artifact_root(self) -> Path:
        """``out``, resolved under ``$AESEG_ARTIFACT_ROOT`` when that is set."""
        base = os.environ.get(ARTIFACT_ROOT_ENV)
        return Path(base) / self.out if base else Path(self.out)


_SECTIONS = {"data": SceneSpec, "ae": TrainConfig, "psl": TrainConfig}
_OPTIM = ("learning_rate", "lr_decay", "lr_decay_epoch", "epochs", "batch_size", "momentum", "flip")
# fields each section exposes; ``None`` means all but the seed
_SECTION_FIELDS = {
    "data": None,
    "ae": _OPTIM + ("delta", "delta_mode", "ae_steps", "saliency_bg_threshold",
                    "saliency_low_threshold", "loss_converge_threshold"),
    "psl": _OPTIM + ("prohibit_p",),
}


def _section_fields(section: str) -> list[str]:
    names = _SECTION_FIELDS[section]
    if names is None:
        return [f.name for f in dataclasses.fields(_SECTIONS[section]) if f.name != "seed"]
    return list(names)
_TOP = ("seed", "out", "threads", "channels", "strides", "diagnostic_step", "enable_psl",
        "enable_pslpp", "gt_weights", "shat_weight")
# config-file spellings that differ from the field names
_ALIASES = {"ae.steps": "ae.ae_steps", "psl.enable": "enable_psl", "psl.plus_plus": "enable_pslpp",
            "psl.gt_weights": "gt_weights", "psl.shat_weight": "shat_weight",
            "model.channels": "channels", "model.strides": "strides", "ae.diagnostic_step": "diagnostic_step"}


def flatten(cfg: PipelineConfig) -> dict:
    out = {}
    for name in _TOP:
        value = getattr(cfg, name)
        out[name] = list(value) if isinstance(value, tuple) else value
    for section in _SECTIONS:
        for name in _section_fields(section):
            value = getattr(getattr(cfg, section), name)
            out[f"{section}.{name}"] = list(value) if isinstance(value, tuple) else value
    return out


def _convert(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    text = raw.strip()
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() == "none":
            return None
        return _convert(text, next(a for a in args if a is not type(None)), key)
    if origin is tuple:
        inner = args[0]
        items = [t for t in text.split(",") if t.strip()]
        return tuple(_convert(t, inner, key) for t in items)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw.strip()!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; syntax errors name the line."""
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in entries:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def _target(key: str):
    """(section or None, field name, type) for a config key."""
    key = _ALIASES.get(key, key)
    if "." not in key:
        if key not in _TOP:
            raise ConfigError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(PipelineConfig)
        return None, key, hints[key]
    section, name = key.split(".", 1)
    if name == "seed":
        raise ConfigError(f"{key}: seeds are set by the top-level 'seed' key")
    cls = _SECTIONS.get(section)
    if cls is None:
        raise ConfigError(f"unknown config section in {key!r}")
    hints = typing.get_type_hints(cls)
    if name not in _section_fields(section):
        raise ConfigError(f"unknown config key {key!r}")
    return section, name, hints[name]


def build(entries: dict[str, object]) -> PipelineConfig:
    """Defaults overlaid with ``entries`` (already-typed values or raw strings)."""
    top: dict[str, object] = {}
    sections: dict[str, dict] = {s: {} for s in _SECTIONS}
    for key, value in entries.items():
        section, name, tp = _target(key)
        if isinstance(value, str):
            value = _convert(value, tp, key)
        if section is None:
            top[name] = value
        else:
            sections[section][name] = value
    try:
        data = dataclasses.replace(SceneSpec(), **sections["data"])
        ae = dataclasses.replace(TrainConfig(), **sections["ae"])
        psl = dataclasses.replace(default_segmentation_config(), **sections["psl"])
        return PipelineConfig(data=data, ae=ae, psl=psl, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path: str | Path | None = None, overrides: dict[str, object] | None = None) -> PipelineConfig:
    """Config from an optional file, then ``overrides`` (CLI values) on top."""
    entries: dict[str, object] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        entries.update(parse_text(text, str(path)))
    for key, value in (overrides or {}).items():
        if value is not None:
            entries[_ALIASES.get(key, key)] = value
    # file keys may use aliases as well
    entries = {_ALIASES.get(k, k): v for k, v in entries.items()}
    return build(entries)


def dumps(cfg: PipelineConfig) -> str:
    """Serialise back to the file format (round-trips through ``load``)."""
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            text = ",".join(str(v) for v in value)
        elif value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
