"""Run configuration: one flat key=value file drives everything.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Unknown keys are rejected so that typos fail loudly. The exact same text
representation is embedded in checkpoints, which keeps resumed runs
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class TrainConfig:
    # data: paths win when set, otherwise a synthetic corpus is generated
    train_path: str = ""
    dev_path: str = ""
    rel_info_path: str = ""
    num_relations: int = 3
    synth_train_docs: int = 200
    synth_dev_docs: int = 50
    synth_cities: int = 6
    synth_regions: int = 3
    synth_countries: int = 3
    synth_noise_rate: float = 0.2
    synth_closure: bool = True
    synth_shuffle: bool = False

    # model
    seed: int = 0
    matrix_size: int = 12
    strategy: str = "context"          # context | similarity
    similarity_literal: bool = False
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    window_length: int = 128
    window_stride: int = 64
    attn_last_layer_only: bool = False
    reduced_dim: int = 3               # pair-feature channels entering segmentation
    channel_schedule: tuple[int, ...] = (3, 16, 32, 16, 8, 16)
    use_unet: bool = True
    head_hidden: int = 64
    combine: str = "concat"            # concat | add
    loss: str = "balanced"             # balanced | bce
    exclude_diagonal: bool = True

    # optimization
    epochs: int = 30
    batch_size: int = 4
    accum_steps: int = 1
    encoder_lr: float = 3e-4
    unet_lr: float = 4e-4
    warmup: float = 0.06
    weight_decay: float = 5e-4
    clip_norm: float = 1.0
    patience: int = 5                  # epochs without dev-F1 gain; 0 disables
    eval_every: int = 1

    # output
    out_dir: str = "runs"

    def validate(self) -> None:
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError(f"warmup must be in [0, 1), got {self.warmup}")
        if self.encoder_lr < 0 or self.unet_lr < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.strategy not in ("context", "similarity"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.loss not in ("balanced", "bce"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if len(self.channel_schedule) != 6:
            raise ConfigError("channel_schedule needs exactly 6 entries")
        if self.use_unet and self.channel_schedule[0] != self.reduced_dim:
            raise ConfigError(
                f"channel_schedule starts at {self.channel_schedule[0]} but "
                f"reduced_dim is {self.reduced_dim}"
            )
        if self.matrix_size < 1 or self.matrix_size > 128:
            raise ConfigError("matrix_size must be in 1..128")
        if self.batch_size < 1 or self.accum_steps < 1:
            raise ConfigError("batch_size and accum_steps must be >= 1")


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    if ftype == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if ftype.startswith("tuple"):
        if not raw:
            return ()
        return tuple(int(p) for p in raw.split(","))
    return raw


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    values = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value': {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from e
    out = TrainConfig(**values)
    out.validate()
    return out


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, tuple):
            rendered = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"
