"""Hyperparameter records, presets and the ``key = value`` config file form."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass(frozen=True)
class FoundationConfig:
    dim: int = 64
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 256
    patch: int = 8
    template_size: int = 32
    search_size: int = 64
    in_channels: int = 3
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        for name in ("template_size", "search_size"):
            if getattr(self, name) % self.patch:
                raise ConfigError(f"{name} {getattr(self, name)} not divisible by patch {self.patch}")
        if self.search_size // self.patch < 1 or self.template_size // self.patch < 1:
            raise ConfigError("template/search smaller than one patch")

    @property
    def n_z(self) -> int:
        return (self.template_size // self.patch) ** 2

    @property
    def n_x(self) -> int:
        return (self.search_size // self.patch) ** 2

    @property
    def grid_z(self) -> int:
        return self.template_size // self.patch

    @property
    def grid_x(self) -> int:
        return self.search_size // self.patch


@dataclass(frozen=True)
class PromptConfig:
    """Where and how prompts enter the frozen encoder.

    ``interval`` k places MCP blocks at layers 1, 1+k, 1+2k, ...; an explicit
    ``placement`` (1-based layer indices) overrides it.  For ``vpt_sum`` the
    ``deep`` flag adds one trainable token table per layer.
    """

    mode: str = "vipt"
    interval: int = 1
    placement: tuple[int, ...] | None = None
    latent: int = 8
    aux_channels: int = 3
    deep: bool = False

    def __post_init__(self):
        if self.mode not in ("vipt", "vpt_sum"):
            raise ConfigError(f"unknown prompt mode {self.mode!r}")
        if self.interval < 1:
            raise ConfigError("interval must be >= 1")
        if self.latent < 1:
            raise ConfigError("latent channels must be >= 1")

    def layers(self, num_layers: int) -> tuple[int, ...]:
        """1-based layer indices that receive an MCP block (vipt) or token table (vpt_sum deep)."""
        if self.mode == "vpt_sum":
            return tuple(range(1, num_layers + 1)) if self.deep else ()
        if self.placement is not None:
            bad = [l for l in self.placement if not 1 <= l <= num_layers]
            if bad:
                raise ConfigError(f"placement {bad} outside 1..{num_layers}")
            return tuple(sorted(set(self.placement)))
        return tuple(range(1, num_layers + 1, self.interval))


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 20
    steps_per_epoch: int = 100
    base_lr: float = 4e-3
    weight_decay: float = 1e-4
    decay_epoch: int = 16
    decay_factor: float = 10.0
    batch_size: int = 4
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.decay_epoch > self.epochs:
            raise ConfigError("decay_epoch must not exceed epochs")
        if self.batch_size < 1 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs, steps_per_epoch and batch_size must be positive")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass(frozen=True)
class LossWeights:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0

    def __post_init__(self):
        if self.lambda_iou < 0 or self.lambda_l1 < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class DataConfig:
    template_factor: float = 2.0
    search_factor: float = 4.0
    center_jitter: float = 0.5
    scale_jitter: float = 0.1
    max_gap: int = 10


@dataclass(frozen=True)
class ViPTConfig:
    foundation: FoundationConfig = field(default_factory=FoundationConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    tune_mode: str = "prompt_tune"
    foundation_seed: int = 0

    def replace(self, **sections) -> "ViPTConfig":
        return dataclasses.replace(self, **sections)


def paper_config() -> ViPTConfig:
    """Full-size preset: ViT-B/16 tracker, 128/256 crops, 60 epochs."""
    return ViPTConfig(
        foundation=FoundationConfig(
            dim=768, layers=12, heads=12, ffn_dim=3072, patch=16, template_size=128, search_size=256
        ),
        prompt=PromptConfig(latent=8),
        schedule=TrainSchedule(
            epochs=60,
            steps_per_epoch=60000 // 64,
            base_lr=4e-5,
            weight_decay=1e-4,
            decay_epoch=48,
            decay_factor=10.0,
            batch_size=64,
        ),
    )


def toy_config() -> ViPTConfig:
    """Desk-scale preset (D=64, L=4)."""
    return ViPTConfig()


def gradcheck_config() -> ViPTConfig:
    """Tiny preset small enough for coordinate-wise finite differences."""
    return ViPTConfig(
        foundation=FoundationConfig(
            dim=16, layers=2, heads=2, ffn_dim=32, patch=8, template_size=16, search_size=32
        ),
        prompt=PromptConfig(latent=4),
    )


PRESETS = {"paper": paper_config, "toy": toy_config, "gradcheck": gradcheck_config}

_SECTIONS = {
    "foundation": FoundationConfig,
    "prompt": PromptConfig,
    "schedule": TrainSchedule,
    "loss": LossWeights,
    "data": DataConfig,
}
_TOP_KEYS = ("preset", "tune_mode", "foundation_seed")


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple) or default is None:
            if raw.lower() in ("", "none"):
                return None
            parts = [p for p in raw.replace(",", " ").split() if p]
            if key == "betas":
                return tuple(float(p) for p in parts)
            return tuple(int(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def parse_config(text: str) -> ViPTConfig:
    """Parse the config file form.

    Top-level keys (before any section header) are ``preset``, ``tune_mode``
    and ``foundation_seed``; sections ``[foundation]``, ``[prompt]``,
    ``[schedule]``, ``[loss]`` and ``[data]`` override the preset field by
    field.  Unknown sections or keys raise :class:`ConfigError`.
    """
    parser = configparser.ConfigParser(default_section="__none__", interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    top = dict(parser["__top__"]) if parser.has_section("__top__") else {}
    for key in top:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key {key!r}")
    preset = top.get("preset", "toy").strip()
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]()
    changes: dict = {}
    if "tune_mode" in top:
        changes["tune_mode"] = top["tune_mode"].strip()
    if "foundation_seed" in top:
        changes["foundation_seed"] = _parse_value(top["foundation_seed"], 0, "foundation_seed")
    for section in parser.sections():
        if section == "__top__":
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        current = getattr(cfg, section)
        fields = {f.name: getattr(current, f.name) for f in dataclasses.fields(current)}
        updates = {}
        for key, raw in parser[section].items():
            if key not in fields:
                raise ConfigError(f"unknown key {section}.{key!r}")
            updates[key] = _parse_value(raw, fields[key], key)
        try:
            changes[section] = dataclasses.replace(current, **updates)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    cfg = dataclasses.replace(cfg, **changes)
    if cfg.tune_mode not in ("prompt_tune", "full_tune", "foundation_only"):
        raise ConfigError(f"unknown tune_mode {cfg.tune_mode!r}")
    return cfg


def load_config(path: str | Path) -> ViPTConfig:
    return parse_config(Path(path).read_text())


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ViPTConfig) -> str:
    """Effective config in file form; ``parse_config(dump_config(c)) == c``."""
    lines = [f"tune_mode = {cfg.tune_mode}", f"foundation_seed = {cfg.foundation_seed}", ""]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
