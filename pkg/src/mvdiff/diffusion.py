"""Joint multi-view denoising diffusion machinery.

A frame set of N images is denoised jointly: the model sees all frames at every
step, but the forward (noising) process is applied independently per image.
Per-frame timesteps allow mixing conditioning frames (held at t=0, never
touched) with generative frames inside one reverse process.

Schedule tables are indexed directly by timestep t in [0, T_max]; index 0 is
the data itself (beta[0] = 0, alpha_bar[0] = 1).
"""

from __future__ import annotations

import dataclasses

import torch
from torch import Tensor

from . import rng
from .conditioning import ConditionVector
from .geometry import CameraView


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule and derived tables, all of length T_max + 1."""

    t_max: int
    beta: Tensor
    alpha: Tensor
    alpha_bar: Tensor
    sigma: Tensor

    def to_manifest(self) -> dict:
        return {
            "t_max": self.t_max,
            "beta_start": float(self.beta[1]),
            "beta_end": float(self.beta[-1]),
        }


def make_schedule(t_max: int = 100, beta_start: float = 1e-3, beta_end: float = 0.1) -> NoiseSchedule:
    """Linear beta schedule with sigma_t^2 = beta_t.

    The full-scale default is t_max=1000 with (1e-4, 0.02); the toy default
    compresses the same range into 100 steps.
    """
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if t_max < 1:
        raise ValueError("need t_max >= 1")
    beta = torch.zeros(t_max + 1, dtype=torch.float64)
    beta[1:] = torch.linspace(beta_start, beta_end, t_max, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    sigma = beta.sqrt()
    return NoiseSchedule(t_max=t_max, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


@dataclasses.dataclass
class FrameSetState:
    """The joint state consumed by the denoiser.

    x               (N, C, H, W) current samples
    t               (N,) integer timesteps; t=0 marks conditioning frames
    views           per-frame cameras (normalized)
    conditions      per-frame condition vectors
    caption_tokens  shared token ids, possibly empty (unconditional branch)
    voxel_skip      frame index excluded from voxel-grid construction, or None
    """

    x: Tensor
    t: Tensor
    views: list[CameraView]
    conditions: list[ConditionVector]
    caption_tokens: Tensor
    voxel_skip: int | None = None

    def __post_init__(self):
        self.t = torch.as_tensor(self.t, dtype=torch.long).reshape(-1)
        if self.x.ndim != 4:
            raise ValueError("x must be (N, C, H, W)")
        n = self.x.shape[0]
        if len(self.views) != n or len(self.conditions) != n or self.t.shape[0] != n:
            raise ValueError("frame count mismatch between x, t, views, conditions")

    @property
    def num_frames(self) -> int:
        return self.x.shape[0]

    @property
    def active_mask(self) -> Tensor:
        """True for frames still being denoised (t > 0)."""
        return self.t > 0

    def condition_matrix(self, dtype=None) -> Tensor:
        z = torch.stack([c.z for c in self.conditions])
        return z.to(dtype) if dtype is not None else z


def q_sample(x0: Tensor, t: Tensor, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Closed-form forward marginal: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    t broadcasts per frame over leading dim of x0; t=0 returns x0 exactly.
    """
    t = torch.as_tensor(t, dtype=torch.long)
    if bool((t < 0).any()) or bool((t > schedule.t_max).any()):
        raise ValueError("timestep out of schedule range")
    abar = schedule.alpha_bar.to(x0.dtype)[t]
    shape = (-1,) + (1,) * (x0.ndim - 1)
    abar = abar.reshape(shape) if t.ndim > 0 else abar
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


def eps_loss(eps_true: Tensor, eps_pred: Tensor, active_mask: Tensor) -> tuple[Tensor, bool]:
    """Mean squared error over active frames only.

    Returns (loss, all_masked): loss is 0 with all_masked=True when every frame
    is a conditioning frame, which callers should treat as a warning.
    """
    if eps_true.shape != eps_pred.shape:
        raise ValueError("shape mismatch between eps_true and eps_pred")
    active_mask = torch.as_tensor(active_mask, dtype=torch.bool)
    if not bool(active_mask.any()):
        return eps_true.new_zeros(()), True
    diff = (eps_true[active_mask] - eps_pred[active_mask]) ** 2
    return diff.mean(), False


def p_sample_step(
    state: FrameSetState,
    eps_pred: Tensor,
    schedule: NoiseSchedule,
    frame_gens: list[torch.Generator],
    deterministic: bool = False,
) -> FrameSetState:
    """One ancestral reverse step applied jointly to a frame set.

    Frames with t > 0 get x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) eps) / sqrt(alpha_t)
    plus sigma_t * noise (no noise at t=1, or in deterministic mode), and their
    t is decremented.  Conditioning frames (t = 0) pass through bit-identical.
    """
    x = state.x
    t = state.t
    new_x = x.clone()
    new_t = t.clone()
    for n in range(state.num_frames):
        tn = int(t[n])
        if tn == 0:
            continue
        beta = float(schedule.beta[tn])
        alpha = float(schedule.alpha[tn])
        abar = float(schedule.alpha_bar[tn])
        mean = (x[n] - beta / (1.0 - abar) ** 0.5 * eps_pred[n]) / alpha**0.5
        if tn > 1 and not deterministic:
            noise = torch.randn(
                x[n].shape, generator=frame_gens[n], dtype=x.dtype, device=x.device
            )
            mean = mean + float(schedule.sigma[tn]) * noise
        new_x[n] = mean
        new_t[n] = tn - 1
    return dataclasses.replace(state, x=new_x, t=new_t)


def cfg_combine(eps_uncond: Tensor, eps_cond: Tensor, lambda_cfg: float) -> Tensor:
    """Classifier-free guidance: uncond + lambda * (cond - uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("shape mismatch between guidance branches")
    return eps_uncond + lambda_cfg * (eps_cond - eps_uncond)


def frame_generators(seed_or_gen: int | torch.Generator, n_frames: int) -> list[torch.Generator]:
    """Per-frame RNG sub-streams so sampling is order-independent."""
    gen = rng.make_generator(seed_or_gen) if isinstance(seed_or_gen, int) else seed_or_gen
    return rng.spawn(gen, n_frames)
