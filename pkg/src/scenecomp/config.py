"""Flat key-value run configuration with strict unknown-key rejection.

Config files are plain text, one `key = value` per line, `#` comments.
Every key has a default here; loading echoes all of them so a run
directory is self-describing. Unknown keys are an error, protecting
against typo'd hyperparameters.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(Exception):
    pass


@dataclass
class Config:
    # shared
    resolution: int = 64
    background_value: float = -1.0
    target_fill: float = 0.5
    seed: int = 0

    # toy data
    toy_n: int = 500
    toy_mode: str = "paired"
    layout_offset_x: float = 0.26
    layout_offset_y: float = 0.1
    layout_scale_ratio: float = 0.62
    layout_occlusion_order: str = "y_front"
    layout_jitter_offset: float = 0.04
    layout_jitter_scale: float = 0.08
    layout_fill_a: float = 0.42
    augment_flip: bool = False

    # relative spatial transformer
    stn_base_channels: int = 16
    stn_fc_dim: int = 128
    stn_pretrain_steps: int = 0

    # appearance-flow view synthesis
    flow_base_channels: int = 16
    flow_mask_weight: float = 0.1
    flow_steps: int = 600
    flow_batch: int = 16
    flow_lr: float = 2e-4

    # inpainting
    inpaint_base_channels: int = 16
    inpaint_gan_weight: float = 0.1
    inpaint_steps: int = 500
    inpaint_batch: int = 16
    inpaint_lr: float = 2e-4

    # composition core
    gen_base_channels: int = 16
    disc_base_channels: int = 16
    dropout: float = 0.5
    lambda1: float = 100.0
    lambda2: float = 50.0
    lambda3: float = 1.0
    gp_weight: float = 10.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 20
    dec_target: str = "stn"
    holdout_fraction: float = 0.1
    checkpoint_interval: int = 5
    sample_interval: int = 5

    # test-time refinement
    esmr_lambda: float = 100.0
    esmr_steps: int = 100
    esmr_lr: float = 1e-4
    esmr_update_d: bool = False
    real_cache_size: int = 32

    def validate(self) -> None:
        if self.resolution < 16 or self.resolution % 16:
            raise ConfigError(f"resolution must be a multiple of 16 >= 16, got {self.resolution}")
        if self.toy_mode not in ("paired", "unpaired"):
            raise ConfigError(f"toy_mode must be paired or unpaired, got {self.toy_mode!r}")
        if self.dec_target not in ("stn", "targets"):
            raise ConfigError(f"dec_target must be stn or targets, got {self.dec_target!r}")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must be in [0, 1)")


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_items(items: dict[str, str], base: Config | None = None) -> Config:
    cfg = dataclasses.replace(base) if base else Config()
    for key, raw in items.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, raw))
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        cfg = Config()
        cfg.validate()
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    items: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        items[key.strip()] = raw
    return parse_items(items)


def echo_config(cfg: Config, path: str | Path) -> None:
    """Write every key (defaults included) in stable order."""
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(Config)]
    Path(path).write_text("\n".join(lines) + "\n")


def config_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(d: dict) -> Config:
    cfg = Config(**{k: v for k, v in d.items() if k in _FIELDS})
    cfg.validate()
    return cfg
