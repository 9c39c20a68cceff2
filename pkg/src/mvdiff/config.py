"""Flat key-value training configuration.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Every training constant is a documented key; unknown keys are rejected so
typos fail loudly.  Values are parsed by the declared field type; tuples are
comma-separated.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .denoiser import DenoiserConfig


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    # stage recipe
    steps: int = 20_000
    batch_size: int = 2              # frame sets per optimizer step
    frames_per_set: int = 5          # N
    grad_accum: int = 1
    seed: int = 0

    # diffusion schedule
    t_max: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.1

    # optimizer (decoupled weight decay, two learning-rate groups)
    lr_renderer: float = 0.005
    lr_other: float = 5e-5
    weight_decay: float = 0.01

    # multi-view recipe
    p_cond_first: float = 0.25       # chance the first frame becomes conditioning
    p_cond_second: float = 0.25      # chance the second frame does
    voxel_skip_last: bool = True     # skip the last frame when building grids
    prior_weight: float = 0.1
    prior_count: int = 300
    empty_caption_prob: float = 0.1

    # dataset
    image_size: int = 32
    brightness_jitter: float = 0.0

    # model
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    attention_stages: tuple[int, ...] = (1, 2, 3)
    projection_stages: tuple[int, ...] = (2, 3)
    grid_base: int = 16
    c_prime: int = 16
    t_dim: int = 32
    lora_rank: int = 4
    heads: int = 1
    n_render_samples: int = 32
    refine_blocks: int = 5

    # ablations: "", "no_proj", or "no_cfa"
    ablation: str = ""

    # bookkeeping
    log_every: int = 50
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.ablation not in ("", "no_proj", "no_cfa"):
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if not (0 <= self.p_cond_first <= 1 and 0 <= self.p_cond_second <= 1):
            raise ValueError("conditioning probabilities must lie in [0, 1]")

    def denoiser_config(self) -> DenoiserConfig:
        from .synthdata import vocabulary_size

        return DenoiserConfig(
            image_channels=3,
            image_size=self.image_size,
            base_channels=self.base_channels,
            channel_mults=self.channel_mults,
            attention_stages=self.attention_stages,
            projection_stages=self.projection_stages,
            grid_base=self.grid_base,
            c_prime=self.c_prime,
            t_dim=self.t_dim,
            lora_rank=self.lora_rank,
            heads=self.heads,
            vocab_size=max(vocabulary_size(), 48),
            d_txt=self.t_dim,
            n_render_samples=self.n_render_samples,
            refine_blocks=self.refine_blocks,
        )


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    field = _FIELDS[name]
    raw = raw.strip()
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    if field.type in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean for {name}: {raw!r}")
    if field.type in ("str", str):
        return raw
    # remaining fields are integer tuples
    return tuple(int(v) for v in raw.split(",") if v.strip())


def parse_config(text: str) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return TrainConfig(**values)


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
