"""Shared camera fixtures for the test suite."""

from __future__ import annotations

import math

import torch

from mvdiff.geometry import CameraView


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> torch.Tensor:
    """World-to-camera pose for a camera at `center` looking at `target`."""
    center = torch.as_tensor(center, dtype=torch.float64)
    target = torch.as_tensor(target, dtype=torch.float64)
    up = torch.as_tensor(up, dtype=torch.float64)
    fwd = target - center
    fwd = fwd / fwd.norm()
    right = torch.linalg.cross(fwd, up)
    if right.norm() < 1e-8:
        right = torch.linalg.cross(fwd, torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64))
    right = right / right.norm()
    down = torch.linalg.cross(fwd, right)
    pose = torch.eye(4, dtype=torch.float64)
    pose[0, :3] = right
    pose[1, :3] = down
    pose[2, :3] = fwd
    pose[:3, 3] = -pose[:3, :3] @ center
    return pose


def simple_view(center=(0.0, 0.0, 2.0), h=8, w=8, f=10.0) -> CameraView:
    return CameraView(
        pose=look_at(center),
        focal=(f, f),
        principal=(w / 2, h / 2),
        resolution=(h, w),
    )


def random_view(gen: torch.Generator) -> CameraView:
    az = float(torch.rand((), generator=gen)) * 2 * math.pi
    el = 0.2 + 0.9 * float(torch.rand((), generator=gen))
    r = 1.2 + float(torch.rand((), generator=gen))
    center = (
        r * math.cos(el) * math.cos(az),
        r * math.cos(el) * math.sin(az),
        r * math.sin(el),
    )
    h = int(4 + torch.randint(0, 12, (), generator=gen))
    w = int(4 + torch.randint(0, 12, (), generator=gen))
    f = 5.0 + 20.0 * float(torch.rand((), generator=gen))
    return CameraView(look_at(center), (f, f * 1.1), (w / 2, h / 2 * 0.9), (h, w))


def ring_views(n=6, radius=2.0, z=1.0, h=8, w=8, f=10.0) -> list[CameraView]:
    views = []
    for k in range(n):
        a = 2 * math.pi * k / n
        c = (radius * math.cos(a), radius * math.sin(a), z)
        views.append(CameraView(look_at(c), (f, f), (w / 2, h / 2), (h, w)))
    return views


def frame_state(config, n=2, t=5, seed=0, tokens=(1, 2, 3), skip=None):
    """Random FrameSetState matching a DenoiserConfig, cameras on a ring."""
    from mvdiff.conditioning import condition_vector
    from mvdiff.diffusion import FrameSetState
    from mvdiff.rng import make_generator

    gen = make_generator(seed)
    views = ring_views(
        n=n, radius=1.6, z=0.7, h=config.image_size, w=config.image_size,
        f=1.2 * config.image_size,
    )
    x = torch.randn(n, config.image_channels, config.image_size, config.image_size, generator=gen)
    conds = [condition_vector(v, None, mode="test") for v in views]
    return FrameSetState(
        x=x,
        t=torch.full((n,), t),
        views=views,
        conditions=conds,
        caption_tokens=torch.tensor(tokens, dtype=torch.long),
        voxel_skip=skip,
    )
