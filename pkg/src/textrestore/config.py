"""Hierarchical run configuration with strict keys, file loading, and hashing.

Every command resolves one RunConfig (file -> flag overrides -> defaults) and
stamps it into the run manifest, so a run is reproducible from its manifest
alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

DEFAULT_CHARSET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class CodecConfig:
    image_size: int = 64
    latent_dim: int = 64
    patch_size: int = 2
    downsample_factor: int = 8
    text_max_tokens: int = 32
    channels: int = 32
    seed: int = 0

    @property
    def grid_size(self) -> int:
        return self.image_size // (self.downsample_factor * self.patch_size)

    @property
    def num_tokens(self) -> int:
        return self.grid_size ** 2


@dataclass
class BackboneConfig:
    num_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    zero_init_head: bool = True


@dataclass
class DiffusionConfig:
    num_steps: int = 40
    schedule: str = "linear"
    weight: str = "unit"
    # training timestep sampler: logit-normal(loc, scale) mapped onto [0, T)
    train_t_loc: float = 0.0
    train_t_scale: float = 1.0


@dataclass
class TsmConfig:
    num_queries: int = 25
    num_control_points: int = 16
    max_chars: int = 25
    charset: str = DEFAULT_CHARSET
    conf_threshold: float = 0.5
    hidden_dim: int = 64
    num_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    lambda_cls: float = 2.0
    lambda_box: float = 5.0
    lambda_giou: float = 2.0
    lambda_poly: float = 5.0
    lambda_char: float = 4.0


@dataclass
class VlmConfig:
    instruction: str = "OCR this image and transcribe only the English text"
    correction_template: str = (
        "{instruction} An OCR system read this image as \"{prior_ocr}\". "
        "Use that reading as a hint and output your best transcription."
    )
    correction_steps: tuple[int, ...] = (10, 20)
    allow_early_correction: bool = False
    endpoint: str = ""
    timeout_s: float = 10.0
    # classification rubric: per-word edit-distance cutoffs
    typo_distance: int = 1
    typo_distance_long: int = 2
    long_word_len: int = 8

    def validate(self, num_steps: int) -> None:
        for j in self.correction_steps:
            if not 1 <= j < num_steps:
                raise ConfigError(f"correction step {j} outside [1, {num_steps})")
            if not self.allow_early_correction and j <= 5:
                raise ConfigError(
                    f"correction step {j} in the unstable early window 1-5 "
                    "(set allow_early_correction to override)"
                )


@dataclass
class DatagenConfig:
    image_size: int = 64
    min_words: int = 1
    max_words: int = 3
    min_scale: int = 2
    max_scale: int = 3
    vocab: tuple[str, ...] = ()
    placement_retries: int = 20
    seed: int = 0


@dataclass
class TrainConfig:
    batch_size: int = 8
    stage0_epochs: int = 90
    stage0_lr: float = 1e-3
    stage0_subset: int = 200
    stage0_ink_weight: float = 4.0
    stage0_edge_weight: float = 1.0
    stage1_epochs: int = 40
    stage1_lr: float = 1e-3
    stage2_epochs: int = 25
    stage2_lr: float = 1e-3
    weight_decay: float = 0.01
    grad_accum: int = 1
    text_dropout: float = 0.3
    seed: int = 0


@dataclass
class RunConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    tsm: TsmConfig = field(default_factory=TsmConfig)
    vlm: VlmConfig = field(default_factory=VlmConfig)
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def validate(self) -> None:
        c = self.codec
        if c.image_size % (c.downsample_factor * c.patch_size) != 0:
            raise ConfigError(
                f"image_size {c.image_size} not divisible by "
                f"downsample_factor*patch_size {c.downsample_factor * c.patch_size}"
            )
        self.vlm.validate(self.diffusion.num_steps)


def _build(cls, data: dict[str, Any], path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        if dataclasses.is_dataclass(_resolve(ftype)):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{name} must be a mapping")
            kwargs[name] = _build(_resolve(ftype), value, f"{path}{name}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = None


def _resolve(ftype):
    # dataclass field types are strings under `from __future__ import annotations`
    global _SECTIONS
    if _SECTIONS is None:
        _SECTIONS = {c.__name__: c for c in (
            CodecConfig, BackboneConfig, DiffusionConfig, TsmConfig,
            VlmConfig, DatagenConfig, TrainConfig, RunConfig,
        )}
    if isinstance(ftype, str):
        return _SECTIONS.get(ftype, ftype)
    return ftype


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Load config from a JSON/YAML file, then apply `key.path=value` overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        _set_dotted(data, key.strip(), value.strip())
    return config_from_dict(data)


def _set_dotted(data: dict[str, Any], dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {dotted!r} collides with a scalar")
    node[parts[-1]] = _coerce(raw)


def _coerce(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
