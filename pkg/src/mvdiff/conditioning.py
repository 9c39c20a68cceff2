"""Per-frame condition vectors and timestep embeddings.

Each frame carries a 10-dim condition z = [z1, z2, z3]:
  z1 (4)  spherical encoding of the camera center: (sin az, cos az, elevation,
          radius), azimuth measured from +z toward +x, elevation toward +y.
  z2 (4)  intrinsics normalized by image size: (fx/W, fy/H, cx/W, cy/H).
  z3 (2)  image intensity statistics: (mean, variance) at train time,
          the fixed (0.5, 0) at test time.
"""

from __future__ import annotations

import dataclasses
import math

import torch
from torch import Tensor

from .geometry import CameraView

COND_DIM = 10

TEST_INTENSITY = (0.5, 0.0)


@dataclasses.dataclass(frozen=True)
class ConditionVector:
    z1: Tensor
    z2: Tensor
    z3: Tensor

    def __post_init__(self):
        for name, size in (("z1", 4), ("z2", 4), ("z3", 2)):
            t = torch.as_tensor(getattr(self, name), dtype=torch.float64).reshape(size)
            object.__setattr__(self, name, t)
        if not (0.0 <= float(self.z3[0]) <= 1.0):
            raise ValueError("intensity mean must lie in [0, 1]")
        if float(self.z3[1]) < 0.0:
            raise ValueError("intensity variance must be non-negative")

    @property
    def z(self) -> Tensor:
        return torch.cat([self.z1, self.z2, self.z3])


def encode_pose(view: CameraView) -> Tensor:
    """4-number summary of a normalized camera pose.

    Returns (sin az, cos az, elevation, radius) of the camera center, with
    azimuth zero along +z.  Undefined for a camera at the origin.
    """
    c = view.camera_center
    r = float(c.norm())
    if r < 1e-9:
        raise ValueError("camera at the origin has no defined azimuth")
    az = math.atan2(float(c[0]), float(c[2]))
    el = math.asin(max(-1.0, min(1.0, float(c[1]) / r)))
    return torch.tensor([math.sin(az), math.cos(az), el, r], dtype=torch.float64)


def encode_intrinsics(view: CameraView) -> Tensor:
    """(fx/W, fy/H, cx/W, cy/H): resolution-independent intrinsics."""
    h, w = view.resolution
    fx, fy = view.focal
    cx, cy = view.principal
    return torch.tensor([fx / w, fy / h, cx / w, cy / h], dtype=torch.float64)


def encode_intensity(image: Tensor, mode: str = "train") -> Tensor:
    """Mean and population variance of RGB values; a fixed constant at test time."""
    if mode == "test":
        return torch.tensor(TEST_INTENSITY, dtype=torch.float64)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    image = torch.as_tensor(image, dtype=torch.float64)
    return torch.stack([image.mean(), image.var(unbiased=False)])


def condition_vector(view: CameraView, image: Tensor | None, mode: str = "train") -> ConditionVector:
    """Assemble z = [z1, z2, z3] for one frame.

    In test mode no image is needed (z3 is constant).
    """
    if mode == "train" and image is None:
        raise ValueError("train mode needs the image for the intensity encoding")
    z3 = encode_intensity(image if image is not None else torch.zeros(1), mode)
    return ConditionVector(encode_pose(view), encode_intrinsics(view), z3)


def timestep_embedding(t: Tensor | int, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of integer timesteps.

    t may be a scalar or a 1-d tensor; output has shape (..., dim) with the
    first half sines and the second half cosines.  dim must be even.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    t = torch.as_tensor(t, dtype=torch.float64)
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    )
    args = t.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
