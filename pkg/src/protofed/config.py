"""Run configuration: a line-oriented ``key = value`` file with ``[section]``
headers, fully validated before any computation starts.

Unknown sections or keys are rejected.  The resolved configuration (every
default materialized) can be re-serialized; parsing that text reproduces
the configuration exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import GlyphSpec, SiteSpec
from .errors import ConfigurationError
from .fed import FedConfig, WarmupConfig
from .loss import LossWeights
from .model import BackboneConfig, ModelConfig


@dataclass
class DataConfig:
    image_size: int = 64
    train_sizes: tuple = (600, 500, 400, 300)
    train_healthy: tuple = (0.76, 0.55, 0.81, 0.84)
    train_brightness: tuple = (0.0, 0.06, -0.05, 0.03)
    train_contrast: tuple = (1.0, 0.9, 1.1, 0.95)
    train_noise: tuple = (0.01, 0.02, 0.015, 0.025)
    test_size: int = 600
    test_healthy: float = 0.815
    test_brightness: float = -0.02
    test_contrast: float = 1.05
    test_noise: float = 0.02
    pretrain_size: int = 512
    pretrain_healthy: float = 0.5
    pretrain_noise: float = 0.015
    glyph_size: int = 28
    glyph_blobs: int = 2
    glyph_gain: float = 1.6
    glyph_sigma: float = 7.0
    glyph_spread: float = 0.1
    glyph_halo: float = 0.3
    background_cells: int = 8
    texture_std: float = 0.06
    augment: bool = False


@dataclass
class ModelSection:
    blocks: int = 4
    channels: tuple = (8, 16, 32, 64)
    kernel_size: int = 3
    pool_size: int = 2
    adapter_rank: int = 4
    protos_per_class: int = 5
    proto_h: int = 1
    proto_w: int = 1
    classes: int = 2
    freeze_mode: str = "warmup-pretrained"
    precision: str = "double"
    warmup_steps: int = 400
    warmup_lr: float = 2e-3
    warmup_batch: int = 16


@dataclass
class InterpretConfig:
    percentile: float = 95.0
    top_k: int = 3


@dataclass
class RunConfig:
    fed: FedConfig = field(default_factory=FedConfig)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    interpret: InterpretConfig = field(default_factory=InterpretConfig)

    def model_config(self) -> ModelConfig:
        m = self.model
        backbone = BackboneConfig(
            num_blocks=m.blocks,
            channels=tuple(m.channels),
            in_channels=1,
            image_hw=(self.data.image_size, self.data.image_size),
            kernel_size=m.kernel_size,
            pool_size=m.pool_size,
            freeze_mode=m.freeze_mode,
        )
        return ModelConfig(
            backbone=backbone,
            adapter_rank=m.adapter_rank,
            protos_per_class=m.protos_per_class,
            proto_hw=(m.proto_h, m.proto_w),
            num_classes=m.classes,
            precision=m.precision,
        )

    def warmup_config(self) -> WarmupConfig:
        return WarmupConfig(steps=self.model.warmup_steps,
                            learning_rate=self.model.warmup_lr,
                            batch_size=self.model.warmup_batch)

    def glyph(self) -> GlyphSpec:
        d = self.data
        return GlyphSpec(size=d.glyph_size, blobs=d.glyph_blobs,
                         gain=d.glyph_gain, sigma=d.glyph_sigma,
                         spread=d.glyph_spread, halo_gain=d.glyph_halo)

    def site_specs(self) -> tuple[list[SiteSpec], SiteSpec, SiteSpec]:
        """(training sites, test site, pretraining site), seeded from the
        master seed."""
        d = self.data
        seed = self.fed.master_seed
        train = [
            SiteSpec(site_id=i, num_samples=d.train_sizes[i],
                     healthy_fraction=d.train_healthy[i],
                     brightness=d.train_brightness[i], contrast=d.train_contrast[i],
                     noise_std=d.train_noise[i], seed=seed)
            for i in range(len(d.train_sizes))
        ]
        test = SiteSpec(site_id=len(train), num_samples=d.test_size,
                        healthy_fraction=d.test_healthy, brightness=d.test_brightness,
                        contrast=d.test_contrast, noise_std=d.test_noise, seed=seed)
        pretrain = SiteSpec(site_id=len(train) + 1, num_samples=d.pretrain_size,
                            healthy_fraction=d.pretrain_healthy, brightness=0.0,
                            contrast=1.0, noise_std=d.pretrain_noise, seed=seed)
        return train, test, pretrain

    def validate(self):
        self.fed.validate()
        self.loss.validate()
        self.model_config().validate()
        d = self.data
        lists = {
            "train_healthy": d.train_healthy,
            "train_brightness": d.train_brightness,
            "train_contrast": d.train_contrast,
            "train_noise": d.train_noise,
        }
        for name, values in lists.items():
            if len(values) != len(d.train_sizes):
                raise ConfigurationError(
                    f"data.{name} has {len(values)} entries, expected "
                    f"{len(d.train_sizes)} (one per training site)"
                )
        if len(d.train_sizes) != self.fed.num_clients:
            raise ConfigurationError(
                f"{self.fed.num_clients} clients configured but "
                f"{len(d.train_sizes)} training sites listed"
            )
        for spec_list in self.site_specs()[:1]:
            for spec in spec_list:
                spec.validate()
        if self.interpret.top_k < 1:
            raise ConfigurationError("interpret.top_k must be >= 1")
        if not 0 < self.interpret.percentile <= 100:
            raise ConfigurationError("interpret.percentile must be in (0, 100]")


# ---------------------------------------------------------------------------
# parsing / serialization
# ---------------------------------------------------------------------------


def _to_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _to_int_list(s: str) -> tuple:
    return tuple(int(tok.strip()) for tok in s.split(",") if tok.strip())


def _to_float_list(s: str) -> tuple:
    return tuple(float(tok.strip()) for tok in s.split(",") if tok.strip())


# (section, key) -> (config attr, field name, converter)
_SCHEMA = {
    "fed": ("fed", {
        "clients": ("num_clients", int),
        "rounds": ("rounds", int),
        "local_epochs": ("local_epochs", int),
        "learning_rate": ("learning_rate", float),
        "batch_size": ("batch_size", int),
        "optimizer": ("optimizer", str),
        "seed": ("master_seed", int),
        "communicate_adapters": ("communicate_adapters", _to_bool),
        "communicate_prototypes": ("communicate_prototypes", _to_bool),
        "communicate_head": ("communicate_head", _to_bool),
        "use_prox": ("use_prox", _to_bool),
        "allow_partial": ("allow_partial", _to_bool),
        "reset_optimizer_each_round": ("reset_optimizer_each_round", _to_bool),
        "eval_batch": ("eval_batch", int),
    }),
    "model": ("model", {
        "blocks": ("blocks", int),
        "channels": ("channels", _to_int_list),
        "kernel_size": ("kernel_size", int),
        "pool_size": ("pool_size", int),
        "adapter_rank": ("adapter_rank", int),
        "protos_per_class": ("protos_per_class", int),
        "proto_h": ("proto_h", int),
        "proto_w": ("proto_w", int),
        "classes": ("classes", int),
        "freeze_mode": ("freeze_mode", str),
        "precision": ("precision", str),
        "warmup_steps": ("warmup_steps", int),
        "warmup_lr": ("warmup_lr", float),
        "warmup_batch": ("warmup_batch", int),
    }),
    "loss": ("loss", {
        "beta": ("beta", float),
        "lambda_clst": ("lambda_clst", float),
        "lambda_sep": ("lambda_sep", float),
        "gamma": ("gamma", float),
        "mu1": ("mu1", float),
        "mu2": ("mu2", float),
        "l1_on_prototypes": ("l1_on_prototypes", _to_bool),
    }),
    "data": ("data", {
        "image_size": ("image_size", int),
        "train_sizes": ("train_sizes", _to_int_list),
        "train_healthy": ("train_healthy", _to_float_list),
        "train_brightness": ("train_brightness", _to_float_list),
        "train_contrast": ("train_contrast", _to_float_list),
        "train_noise": ("train_noise", _to_float_list),
        "test_size": ("test_size", int),
        "test_healthy": ("test_healthy", float),
        "test_brightness": ("test_brightness", float),
        "test_contrast": ("test_contrast", float),
        "test_noise": ("test_noise", float),
        "pretrain_size": ("pretrain_size", int),
        "pretrain_healthy": ("pretrain_healthy", float),
        "pretrain_noise": ("pretrain_noise", float),
        "glyph_size": ("glyph_size", int),
        "glyph_blobs": ("glyph_blobs", int),
        "glyph_gain": ("glyph_gain", float),
        "glyph_sigma": ("glyph_sigma", float),
        "glyph_spread": ("glyph_spread", float),
        "glyph_halo": ("glyph_halo", float),
        "background_cells": ("background_cells", int),
        "texture_std": ("texture_std", float),
        "augment": ("augment", _to_bool),
    }),
    "interpret": ("interpret", {
        "percentile": ("percentile", float),
        "top_k": ("top_k", int),
    }),
}


def parse_config(text: str) -> RunConfig:
    """Parse and validate a configuration; unknown keys are rejected."""
    cfg = RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SCHEMA:
                raise ConfigurationError(
                    f"line {lineno}: unknown section [{name}] "
                    f"(known: {', '.join(_SCHEMA)})"
                )
            section = name
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigurationError(f"line {lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        attr, keys = _SCHEMA[section]
        if key not in keys:
            raise ConfigurationError(f"line {lineno}: unknown key '{key}' in [{section}]")
        fieldname, conv = keys[key]
        try:
            setattr(getattr(cfg, attr), fieldname, conv(value))
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {section}.{key}: {exc}")
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def resolved_text(cfg: RunConfig) -> str:
    """Serialize with every default materialized; parses back to an equal
    configuration."""
    lines = []
    for section, (attr, keys) in _SCHEMA.items():
        lines.append(f"[{section}]")
        obj = getattr(cfg, attr)
        for key, (fieldname, _) in keys.items():
            lines.append(f"{key} = {_format_value(getattr(obj, fieldname))}")
        lines.append("")
    return "\n".join(lines)


def write_resolved(cfg: RunConfig, path):
    Path(path).write_text(resolved_text(cfg))
