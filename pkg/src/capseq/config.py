"""Flat key=value run configuration shared by all CLI commands.

Precedence, lowest to highest: built-in desk defaults, the --config file,
--set key=value flags, and finally the CAPSEQ_SEED environment variable
(which overrides the seed only). Validation runs before any work starts and
rejects values that would violate a downstream precondition.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

ENV_SEED = "CAPSEQ_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    image_side: int = 32
    min_word_freq: int = 1
    train_ratio: float = 0.75
    val_ratio: float = 0.125
    test_ratio: float = 0.125

    # caption model
    sat_embed_dim: int = 24
    sat_decoder_dim: int = 64
    sat_attention_dim: int = 32
    sat_dropout: float = 0.0
    sat_doubly_stochastic_weight: float = 0.0
    sat_pooled_side: int = 4
    sat_encoder_channels: int = 32
    sat_kernel_size: int = 3
    sat_fine_tune_encoder: bool = False
    sat_max_caption_len: int = 24
    sat_epochs: int = 40
    sat_batch_size: int = 8
    sat_decoder_lr: float = 5e-3
    sat_encoder_lr: float = 1e-3
    sat_clip_norm: float | None = 5.0
    sat_optimizer: str = "adam"
    sat_adam_eps: float = 1e-8

    # language model
    lm_layers: int = 2
    lm_heads: int = 2
    lm_model_dim: int = 32
    lm_ffn_dim: int = 64
    lm_block_size: int = 64
    lm_merges: int = 80
    lm_epochs: int = 40
    lm_batch_size: int = 1
    lm_lr: float = 3e-3
    lm_adam_eps: float = 1e-8
    lm_clip_norm: float | None = 1.0

    # decoding
    decode_strategy: str = "beam"
    beam_width: int = 5
    lm_rank: int = 2
    lm_max_new: int = 48
    length_normalize: bool = True

    def validate(self) -> None:
        positive = [
            "image_side", "min_word_freq", "sat_embed_dim", "sat_decoder_dim",
            "sat_attention_dim", "sat_pooled_side", "sat_encoder_channels",
            "sat_kernel_size", "sat_epochs", "sat_batch_size", "lm_layers",
            "lm_heads", "lm_model_dim", "lm_ffn_dim", "lm_epochs",
            "lm_batch_size", "lm_max_new", "beam_width", "lm_rank",
        ]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("sat_decoder_lr", "sat_encoder_lr", "lm_lr", "sat_adam_eps", "lm_adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("sat_clip_norm", "lm_clip_norm"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"{name} must be positive or none, got {value}")
        if abs(self.train_ratio + self.val_ratio + self.test_ratio - 1.0) > 1e-9:
            raise ConfigError("split ratios must sum to 1")
        if not 0.0 <= self.sat_dropout < 1.0:
            raise ConfigError(f"sat_dropout must lie in [0, 1), got {self.sat_dropout}")
        if self.sat_doubly_stochastic_weight < 0:
            raise ConfigError("sat_doubly_stochastic_weight must be non-negative")
        if self.sat_max_caption_len < 2:
            raise ConfigError("sat_max_caption_len must be at least 2")
        if self.lm_block_size < 2:
            raise ConfigError("lm_block_size must be at least 2")
        if self.lm_model_dim % self.lm_heads:
            raise ConfigError(
                f"lm_model_dim {self.lm_model_dim} must divide into lm_heads {self.lm_heads}"
            )
        if self.lm_merges < 0:
            raise ConfigError("lm_merges must be non-negative")
        if self.sat_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown sat_optimizer {self.sat_optimizer!r}")
        if self.decode_strategy not in ("greedy", "beam"):
            raise ConfigError(f"unknown decode_strategy {self.decode_strategy!r}")
        if self.lm_rank > self.beam_width:
            raise ConfigError(
                f"lm_rank {self.lm_rank} cannot exceed beam_width {self.beam_width}"
            )
        if self.image_side < self.sat_pooled_side:
            raise ConfigError("image_side must be at least sat_pooled_side")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str):
    field = _FIELDS.get(name)
    if field is None:
        raise ConfigError(f"unknown configuration key {name!r}")
    raw = raw.strip()
    tp = field.type
    if tp == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if tp == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}")
    if tp == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}")
    if tp == "float | None":
        if raw.lower() in ("none", "off"):
            return None
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number or 'none', got {raw!r}")
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{n}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        values[key.strip()] = _parse_value(key.strip(), raw)
    return values


def load_run_config(config_path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for key, value in parse_config_text(path.read_text(encoding="utf-8"), str(path)).items():
            setattr(cfg, key, value)
    for key, raw in (overrides or {}).items():
        setattr(cfg, key, _parse_value(key, raw))
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        cfg.seed = int(env_seed)
    cfg.validate()
    return cfg
