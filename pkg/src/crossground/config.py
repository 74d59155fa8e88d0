"""Run configuration: strict JSON loading with typed defaults.

Default hyperparameters follow the reference operating point (node width
384, top-3 actions and top-5 objects per segment, EMA decay 0.995,
sharpening temperature 0.5, base margin 0.4 with curve 10, Adam at 1e-4,
batch size 32); epochs, the word/frame widths, and the toggles are local
defaults. Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    # architecture
    node_dim: int = 384
    word_dim: int = 300
    frame_dim: int = 1024
    frames_per_segment: int = 32
    actions_per_segment: int = 3
    objects_per_segment: int = 5
    event_queries: int = 4
    scl_layers: int = 2
    hsa_layers: int = 2
    attn_heads: int = 4
    # objectives
    mask_prob: float = 0.1
    sism_lambda: float = 0.4
    ema_decay: float = 0.995
    sharpen_tau: float = 0.5
    base_margin: float = 0.4
    margin_curve: float = 10.0
    # optimization
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    # ablation switches
    use_scl: bool = True
    use_vcl: bool = True
    use_hsa: bool = True
    use_vcc: bool = True
    use_msm: bool = True
    use_sc: bool = True
    use_sam: bool = True
    # paths
    data_dir: str = "data"
    out_dir: str = "runs/out"
    embeddings_path: str | None = None
    # synthetic-world section (validated by datagen)
    world: dict | None = None

    def validate(self) -> "RunConfig":
        positive_ints = ("node_dim", "word_dim", "frame_dim", "frames_per_segment",
                         "actions_per_segment", "objects_per_segment",
                         "event_queries", "scl_layers", "hsa_layers", "attn_heads",
                         "batch_size", "epochs")
        for key in positive_ints:
            v = getattr(self, key)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"config key '{key}' must be a positive integer")
        if self.node_dim % self.attn_heads != 0:
            raise ConfigError("config key 'attn_heads' must divide 'node_dim'")
        if self.node_dim % 2 != 0:
            raise ConfigError("config key 'node_dim' must be even")
        if not (0.0 <= self.mask_prob <= 1.0):
            raise ConfigError("config key 'mask_prob' must lie in [0, 1]")
        if not (0.0 <= self.sism_lambda <= 1.0):
            raise ConfigError("config key 'sism_lambda' must lie in [0, 1]")
        if not (0.0 <= self.ema_decay <= 1.0):
            raise ConfigError("config key 'ema_decay' must lie in [0, 1]")
        if self.sharpen_tau <= 0:
            raise ConfigError("config key 'sharpen_tau' must be positive")
        if self.base_margin <= 0:
            raise ConfigError("config key 'base_margin' must be positive")
        if self.margin_curve <= 1:
            raise ConfigError("config key 'margin_curve' must exceed 1")
        if self.lr <= 0:
            raise ConfigError("config key 'lr' must be positive")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("config key 'seed' must be a nonnegative integer")
        for key in ("use_scl", "use_vcl", "use_hsa", "use_vcc",
                    "use_msm", "use_sc", "use_sam"):
            if not isinstance(getattr(self, key), bool):
                raise ConfigError(f"config key '{key}' must be a boolean")
        if self.world is not None and not isinstance(self.world, dict):
            raise ConfigError("config key 'world' must be an object")
        return self

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_FLOAT_KEYS = {"mask_prob", "sism_lambda", "ema_decay", "sharpen_tau",
               "base_margin", "margin_curve", "lr"}


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(doc) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key '{unknown[0]}'")
    kwargs = {}
    for key, value in doc.items():
        if key in _FLOAT_KEYS and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[key] = value
    try:
        cfg = RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    return cfg.validate()


def load_config(path: str | Path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    return config_from_dict(doc)
