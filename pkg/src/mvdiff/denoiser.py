"""The joint noise-prediction U-Net.

One forward pass consumes a whole frame set: 2D layers (residual blocks,
caption attention) act per frame with shared weights, cross-frame attention
exchanges information between frames, and projection layers at the inner
stages force features through a shared 3D voxel grid.  Per-stage order:

    residual block -> cross-frame attention -> caption cross-attention
        -> projection layer (inner stages only) -> down/upsample

Projection layers are never placed at the outermost stage (the first and last
blocks the data passes through), which keeps the full-resolution stages free
for image-specific detail.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import CaptionCrossAttention, CrossFrameAttention
from .conditioning import COND_DIM, timestep_embedding
from .diffusion import FrameSetState, NoiseSchedule, make_schedule
from .projection import ProjectionLayer


@dataclasses.dataclass(frozen=True)
class DenoiserConfig:
    image_channels: int = 3
    image_size: int = 32
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    attention_stages: tuple[int, ...] = (1, 2, 3)
    projection_stages: tuple[int, ...] = (2, 3)
    grid_base: int = 16
    c_prime: int = 16
    t_dim: int = 32
    lora_rank: int = 4
    heads: int = 1
    vocab_size: int = 48
    d_txt: int = 32
    n_render_samples: int = 32
    refine_blocks: int = 5
    max_frames: int = 30

    def __post_init__(self):
        n_stages = len(self.channel_mults)
        for s in self.projection_stages:
            if s == 1:
                raise ValueError("projection layers are excluded from the outermost stage")
            if not 1 <= s <= n_stages:
                raise ValueError("projection stage out of range")
        for s in self.attention_stages:
            if not 1 <= s <= n_stages:
                raise ValueError("attention stage out of range")
        if self.t_dim % 2 != 0:
            raise ValueError("t_dim must be even")
        if self.image_size % (2 ** (n_stages - 1)) != 0:
            raise ValueError("image size must survive repeated halving")
        if self.grid_base % (2 ** (n_stages - 1)) != 0:
            raise ValueError("grid base must survive repeated halving")

    @property
    def num_stages(self) -> int:
        return len(self.channel_mults)

    def channels(self, stage: int) -> int:
        return self.base_channels * self.channel_mults[stage - 1]

    def grid_size(self, stage: int) -> int:
        # Halves in lockstep with the feature resolution.
        return self.grid_base >> (stage - 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        for key in ("channel_mults", "attention_stages", "projection_stages"):
            d[key] = tuple(d[key])
        return cls(**d)


def micro_config(**overrides) -> DenoiserConfig:
    """Tiny configuration used by gradient checks and fast tests."""
    defaults = dict(
        image_channels=3,
        image_size=8,
        base_channels=8,
        channel_mults=(1, 1),
        attention_stages=(1, 2),
        projection_stages=(2,),
        grid_base=8,
        c_prime=4,
        t_dim=8,
        lora_rank=2,
        vocab_size=16,
        d_txt=8,
        n_render_samples=4,
        refine_blocks=1,
    )
    defaults.update(overrides)
    return DenoiserConfig(**defaults)


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


class ResBlock(nn.Module):
    """Per-frame residual conv block with a timestep bias; smooth activations."""

    def __init__(self, in_ch: int, out_ch: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, t_emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(t_emb.to(h.dtype)).unsqueeze(-1).unsqueeze(-1)
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class StageBlock(nn.Module):
    """One U-Net stage: residual block, then the 3D-aware layers if enabled."""

    def __init__(self, cfg: DenoiserConfig, stage: int, in_ch: int, out_ch: int):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, cfg.t_dim)
        self.cfa = (
            CrossFrameAttention(out_ch, rank=cfg.lora_rank, heads=cfg.heads)
            if stage in cfg.attention_stages
            else None
        )
        self.caption = (
            CaptionCrossAttention(out_ch, cfg.d_txt, rank=cfg.lora_rank, heads=cfg.heads)
            if stage in cfg.attention_stages
            else None
        )
        self.projection = (
            ProjectionLayer(
                out_ch,
                c_prime=cfg.c_prime,
                grid_size=cfg.grid_size(stage),
                t_dim=cfg.t_dim,
                n_samples=cfg.n_render_samples,
                refine_blocks=cfg.refine_blocks,
            )
            if stage in cfg.projection_stages
            else None
        )

    def forward(self, x, t_emb, z, tokens, views, skip, sample_gen, use_projection=True):
        x = self.res(x, t_emb)
        if self.cfa is not None:
            x = self.cfa(x, z.to(x.dtype))
        if self.caption is not None:
            x = self.caption(x, tokens, z.to(x.dtype))
        if self.projection is not None and use_projection:
            x = self.projection(x, views, t_emb, skip=skip, sample_gen=sample_gen)
        return x


class Denoiser(nn.Module):
    """Predicts per-frame noise from the joint state of all frames."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.d_txt)
        self.t_mlp = nn.Sequential(
            nn.Linear(cfg.t_dim, cfg.t_dim), nn.SiLU(), nn.Linear(cfg.t_dim, cfg.t_dim)
        )
        self.stem = nn.Conv2d(cfg.image_channels, cfg.channels(1), 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for s in range(1, cfg.num_stages + 1):
            # stem and the downsample convs already produce channels(s)
            self.down.append(StageBlock(cfg, s, cfg.channels(s), cfg.channels(s)))
            if s < cfg.num_stages:
                self.downsample.append(nn.Conv2d(cfg.channels(s), cfg.channels(s + 1), 3, stride=2, padding=1))

        mid_ch = cfg.channels(cfg.num_stages)
        self.mid = ResBlock(mid_ch, mid_ch, cfg.t_dim)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for s in range(cfg.num_stages, 0, -1):
            self.up.append(StageBlock(cfg, s, 2 * cfg.channels(s), cfg.channels(s)))
            if s > 1:
                self.upsample.append(nn.Conv2d(cfg.channels(s), cfg.channels(s - 1), 3, padding=1))

        head_ch = cfg.channels(1)
        self.head_norm = nn.GroupNorm(_groups(head_ch), head_ch)
        self.head = nn.Conv2d(head_ch, cfg.image_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def embed_timesteps(self, t: Tensor, dtype) -> Tensor:
        base = timestep_embedding(t, self.config.t_dim).to(dtype)
        return self.t_mlp(base)

    def forward(
        self,
        state: FrameSetState,
        schedule: NoiseSchedule | None = None,
        sample_gen: torch.Generator | None = None,
        use_projection: bool = True,
        use_cross_frame: bool = True,
    ) -> Tensor:
        """Returns eps_pred with the same (N, C, H, W) shape as state.x.

        The two use_* switches exist for the ablation harness: disabling
        projection bypasses the 3D grids, disabling cross-frame attention
        makes every frame attend to itself only.
        """
        cfg = self.config
        x = state.x
        n, c, h, w = x.shape
        if c != cfg.image_channels or h != cfg.image_size or w != cfg.image_size:
            raise ValueError("frame shape does not match the model configuration")
        if n > cfg.max_frames:
            raise ValueError(f"frame count {n} exceeds configured maximum {cfg.max_frames}")
        if schedule is not None and bool((state.t > schedule.t_max).any()):
            raise ValueError("timestep outside the schedule range")

        t_emb = self.embed_timesteps(state.t, x.dtype)
        z = state.condition_matrix(x.dtype)
        tokens = self.token_embed(state.caption_tokens.to(torch.long)).to(x.dtype)
        views = state.views
        skip = state.voxel_skip

        def run_stage(block: StageBlock, feats: Tensor) -> Tensor:
            if use_cross_frame or n == 1:
                return block(feats, t_emb, z, tokens, views, skip, sample_gen, use_projection)
            # Ablation: route each frame through attention alone (N=1 view of
            # the set) so cross-frame attention degrades to self-attention.
            feats = block.res(feats, t_emb)
            if block.cfa is not None:
                feats = torch.cat([block.cfa(feats[i : i + 1], z[i : i + 1].to(feats.dtype)) for i in range(n)])
            if block.caption is not None:
                feats = block.caption(feats, tokens, z.to(feats.dtype))
            if block.projection is not None and use_projection:
                feats = block.projection(feats, views, t_emb, skip=skip, sample_gen=sample_gen)
            return feats

        x = self.stem(x)
        skips = []
        for idx, block in enumerate(self.down):
            x = run_stage(block, x)
            skips.append(x)
            if idx < len(self.downsample):
                x = self.downsample[idx](x)
        x = self.mid(x, t_emb)
        for idx, block in enumerate(self.up):
            skip_feat = skips.pop()
            if x.shape[-1] != skip_feat.shape[-1]:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            if idx > 0:
                x = self.upsample[idx - 1](x)
            x = run_stage(block, torch.cat([x, skip_feat], dim=1))
        return self.head(F.silu(self.head_norm(x)))


def count_parameters(config: DenoiserConfig) -> int:
    model = Denoiser(config)
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Checkpoints: flat parameter archive + JSON manifest


def config_hash(config: DenoiserConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(
    path: str | Path,
    model: Denoiser,
    schedule: NoiseSchedule,
    seed: int,
    extra: dict | None = None,
) -> Path:
    """Write weights.pt + manifest.json into the directory `path`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / "weights.pt")
    manifest = {
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "parameter_count": sum(p.numel() for p in model.parameters()),
        "schedule": schedule.to_manifest(),
        "seed": seed,
        "stage_order": "residual, cross-frame attention, caption attention, projection, resample",
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path: str | Path) -> tuple[Denoiser, NoiseSchedule, dict]:
    """Load a checkpoint directory, validating the parameter count."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    config = DenoiserConfig.from_dict(manifest["config"])
    expected = count_parameters(config)
    if manifest["parameter_count"] != expected:
        raise ValueError(
            f"manifest parameter count {manifest['parameter_count']} does not match "
            f"configuration ({expected})"
        )
    model = Denoiser(config)
    state = torch.load(path / "weights.pt", weights_only=True)
    model.load_state_dict(state)
    sched = manifest["schedule"]
    schedule = make_schedule(sched["t_max"], sched["beta_start"], sched["beta_end"])
    return model, schedule, manifest
