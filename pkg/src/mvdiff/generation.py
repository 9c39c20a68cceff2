"""Sampling schemes: unconditional, image-conditional, autoregressive trajectory.

All schemes share one reverse loop.  Per-frame timesteps drive the behaviour:
conditioning frames enter un-noised with t = 0 and are never touched, while
generative frames start from per-frame Gaussian noise and denoise in lockstep.

A step count smaller than the schedule length runs the ancestral update on a
strided sub-chain (the derived tables use the same sigma^2 = beta convention);
the model always sees the true timestep of the underlying schedule.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .conditioning import condition_vector
from .diffusion import (
    FrameSetState,
    NoiseSchedule,
    cfg_combine,
    p_sample_step,
)
from .geometry import CameraView, ray_aabb, unit_cube
from .rng import make_generator, spawn


def sub_schedule(schedule: NoiseSchedule, steps: int) -> tuple[NoiseSchedule, Tensor]:
    """Strided ancestral sub-chain of `steps` timesteps.

    Returns the derived schedule (indexed by sub-step) and tau, the map from
    sub-step index to the original timestep (tau[0] = 0).
    """
    if not 1 <= steps <= schedule.t_max:
        raise ValueError("steps must lie in [1, t_max]")
    tau = torch.linspace(0, schedule.t_max, steps + 1).round().to(torch.long)
    tau = torch.unique(tau, sorted=True)
    abar = schedule.alpha_bar[tau]
    alpha = abar[1:] / abar[:-1]
    beta = torch.zeros(len(tau), dtype=torch.float64)
    beta[1:] = 1.0 - alpha
    alpha_full = 1.0 - beta
    return (
        NoiseSchedule(
            t_max=len(tau) - 1,
            beta=beta,
            alpha=alpha_full,
            alpha_bar=abar,
            sigma=beta.sqrt(),
        ),
        tau,
    )


def test_conditions(views: list[CameraView]) -> list:
    """Inference-time condition vectors: intensity fixed to (0.5, 0) for all."""
    return [condition_vector(v, None, mode="test") for v in views]


def sample_frame_set(
    model,
    schedule: NoiseSchedule,
    views: list[CameraView],
    caption_tokens: Tensor,
    steps: int | None = None,
    lambda_cfg: float = 0.0,
    gen: torch.Generator | int = 0,
    cond_images: Tensor | None = None,
    n_cond: int = 0,
    callback=None,
    forward_kwargs: dict | None = None,
) -> Tensor:
    """Joint reverse process over len(views) frames; returns (N, C, H, W) in [0, 1].

    The first n_cond frames are held at their given content (t = 0); the rest
    start from independent Gaussian noise.  lambda_cfg > 0 runs the caption
    branch against the empty-caption branch; lambda_cfg = 0 skips the caption
    branch entirely.
    """
    cfg = model.config
    n = len(views)
    if n_cond:
        if cond_images is None or cond_images.shape[0] != n_cond:
            raise ValueError("n_cond frames require matching cond_images")
    if n > cfg.max_frames:
        raise ValueError(f"{n} frames exceed the configured maximum {cfg.max_frames}")
    steps = steps or schedule.t_max
    sched, tau = sub_schedule(schedule, steps)

    gen = make_generator(gen) if isinstance(gen, int) else gen
    frame_gens = spawn(gen, n)
    x = torch.empty(n, cfg.image_channels, cfg.image_size, cfg.image_size)
    for i in range(n):
        x[i] = torch.randn(x.shape[1:], generator=frame_gens[i])
    if n_cond:
        x[:n_cond] = cond_images.to(x.dtype)

    t = torch.full((n,), sched.t_max, dtype=torch.long)
    t[:n_cond] = 0
    state = FrameSetState(
        x=x,
        t=t,
        views=views,
        conditions=test_conditions(views),
        caption_tokens=caption_tokens,
        voxel_skip=None,
    )
    empty = torch.zeros(0, dtype=torch.long)
    fwd = forward_kwargs or {}
    with torch.no_grad():
        while bool((state.t > 0).any()):
            model_state = dataclasses.replace(state, t=tau[state.t])
            eps_u = model(dataclasses.replace(model_state, caption_tokens=empty), **fwd)
            if lambda_cfg != 0.0 and caption_tokens.numel() > 0:
                eps_c = model(model_state, **fwd)
                eps = cfg_combine(eps_u, eps_c, lambda_cfg)
            else:
                eps = eps_u
            state = p_sample_step(state, eps, sched, frame_gens)
            if callback is not None:
                callback(state)
    return state.x.clamp(0.0, 1.0)


def generate_unconditional(
    model,
    schedule: NoiseSchedule,
    views: list[CameraView],
    caption_tokens: Tensor,
    steps: int | None = None,
    lambda_cfg: float = 7.5,
    gen: torch.Generator | int = 0,
) -> Tensor:
    """All frames denoise from noise in lockstep; returns (N, C, H, W)."""
    if len(views) < 2:
        raise ValueError("unconditional generation needs at least 2 views")
    return sample_frame_set(
        model, schedule, views, caption_tokens, steps, lambda_cfg, gen
    )


def generate_conditional(
    model,
    schedule: NoiseSchedule,
    cond_images: Tensor,
    cond_views: list[CameraView],
    target_views: list[CameraView],
    caption_tokens: Tensor,
    steps: int | None = None,
    lambda_cfg: float = 0.0,
    gen: torch.Generator | int = 0,
    forward_kwargs: dict | None = None,
) -> Tensor:
    """Generate target views conditioned on posed input images.

    Returns only the generated frames, (n_g, C, H, W); the conditioning frames
    pass through the joint process untouched.
    """
    n_c, n_g = len(cond_views), len(target_views)
    if n_c < 1 or n_g < 1:
        raise ValueError("need at least one conditioning and one target view")
    if n_c + n_g > model.config.max_frames:
        raise ValueError("conditioning + target frames exceed the configured maximum")
    out = sample_frame_set(
        model,
        schedule,
        list(cond_views) + list(target_views),
        caption_tokens,
        steps,
        lambda_cfg,
        gen,
        cond_images=cond_images,
        n_cond=n_c,
        forward_kwargs=forward_kwargs,
    )
    return out[n_c:]


def _check_normalized(views: list[CameraView]) -> None:
    """Trajectory poses must look at a normalized scene: cameras outside the
    unit cube with optical axes that actually hit it."""
    for i, v in enumerate(views):
        center = v.camera_center
        if float(center.abs().max()) <= 0.5:
            raise ValueError(f"trajectory view {i} sits inside the unit cube")
        t_near, t_far = ray_aabb(center, v.optical_axis, unit_cube())
        if not float(t_far) > float(t_near):
            raise ValueError(f"trajectory view {i} does not look at the unit cube")


def ring_trajectory(
    n_first: int,
    n_total: int,
    elevation: float = math.radians(25.0),
    radius: float = 1.5,
    image_size: int = 32,
    focal_factor: float = 1.1,
) -> list[CameraView]:
    """Standard trajectory: a 360-degree first batch, then a smooth sweep.

    The first n_first views are equally spaced over the full azimuth circle;
    the remaining views sweep consecutively with a small rotation between
    neighbours at the same elevation/radius.
    """
    views = []
    f = focal_factor * image_size

    def at(az: float) -> CameraView:
        center = (
            radius * math.cos(elevation) * math.cos(az),
            radius * math.cos(elevation) * math.sin(az),
            radius * math.sin(elevation),
        )
        pose = _traj_look_at(center)
        return CameraView(pose, (f, f), (image_size / 2, image_size / 2), (image_size, image_size))

    for k in range(n_first):
        views.append(at(2 * math.pi * k / n_first))
    rest = n_total - n_first
    for k in range(rest):
        views.append(at(2 * math.pi * (k + 0.5) / max(rest, 1)))
    return views


def _traj_look_at(center) -> torch.Tensor:
    center = torch.as_tensor(center, dtype=torch.float64)
    up = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
    fwd = -center / center.norm()
    right = torch.linalg.cross(fwd, up)
    right = right / right.norm()
    down = torch.linalg.cross(fwd, right)
    pose = torch.eye(4, dtype=torch.float64)
    pose[0, :3] = right
    pose[1, :3] = down
    pose[2, :3] = fwd
    pose[:3, 3] = -pose[:3, :3] @ center
    return pose


@dataclasses.dataclass
class TrajectoryResult:
    images: Tensor  # (M, C, H, W)
    views: list[CameraView]
    batch_lambdas: list[float]
    batch_sizes: list[tuple[int, int]]  # (n_cond, n_gen) per batch


def generate_trajectory(
    model,
    schedule: NoiseSchedule,
    trajectory: list[CameraView],
    caption_tokens: Tensor,
    batch_n_g: int = 10,
    first_batch: int = 10,
    steps: int | None = None,
    lambda_first: float = 7.5,
    gen: torch.Generator | int = 0,
) -> TrajectoryResult:
    """Autoregressive rendering of a long trajectory.

    The first `first_batch` poses are generated unconditionally with guidance
    `lambda_first` (the protocol expects them to span 360 degrees; see
    :func:`ring_trajectory`).  Every later batch conditions on all first-batch
    images and generates `batch_n_g` consecutive poses with guidance 0, so the
    caption branch is skipped entirely there.
    """
    m = len(trajectory)
    if m < first_batch:
        raise ValueError("trajectory shorter than the first batch")
    if first_batch + batch_n_g > model.config.max_frames:
        raise ValueError("batch sizes exceed the configured maximum frame count")
    _check_normalized(trajectory)
    gen = make_generator(gen) if isinstance(gen, int) else gen

    first_views = trajectory[:first_batch]
    first = sample_frame_set(
        model, schedule, first_views, caption_tokens, steps, lambda_first, gen
    )
    images = [first]
    lambdas = [lambda_first]
    sizes = [(0, first_batch)]
    pos = first_batch
    while pos < m:
        targets = trajectory[pos : pos + batch_n_g]
        out = generate_conditional(
            model,
            schedule,
            cond_images=first,
            cond_views=first_views,
            target_views=targets,
            caption_tokens=caption_tokens,
            steps=steps,
            lambda_cfg=0.0,
            gen=gen,
        )
        images.append(out)
        lambdas.append(0.0)
        sizes.append((first_batch, len(targets)))
        pos += len(targets)
    return TrajectoryResult(torch.cat(images), list(trajectory), lambdas, sizes)


# ---------------------------------------------------------------------------
# Output files


def view_record(view: CameraView) -> dict:
    h, w = view.resolution
    return {
        "pose": [float(v) for v in view.pose.reshape(-1)],
        "fx": view.focal[0],
        "fy": view.focal[1],
        "cx": view.principal[0],
        "cy": view.principal[1],
        "H": h,
        "W": w,
    }


def save_images(
    out_dir: str | Path,
    images: Tensor,
    views: list[CameraView],
    manifest: dict,
) -> Path:
    """Write 8-bit PNGs plus a JSON manifest with poses and run metadata."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(images.shape[0]):
        arr = (images[i].permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
        name = f"image_{i:04d}.png"
        Image.fromarray(arr).save(out_dir / name)
        names.append(name)
    manifest = dict(manifest)
    manifest["images"] = names
    manifest["poses"] = [view_record(v) for v in views]
    manifest["written_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out_dir
