"""Camera geometry: poses, pinhole projection, ray generation, pose normalization.

Coordinate conventions
----------------------
World-to-camera poses are 4x4 rigid transforms ``x_cam = R @ x_world + t`` with
the camera looking down its +z axis (OpenCV style: x right, y down, z forward).
Pixel coordinates are continuous, ``u`` along the width and ``v`` along the
height; the pixel at array position (row, col) has its center at
``(col + 0.5, row + 0.5)``.  The scene of interest lives inside the axis-aligned
unit cube ``[-0.5, 0.5]^3`` after pose normalization.

All geometry runs in float64; camera parameters are treated as constants, so
nothing here participates in autograd.
"""

from __future__ import annotations

import dataclasses
import math

import torch
from torch import Tensor

UNIT_CUBE_HALF = 0.5

_ORTHO_TOL = 1e-6


@dataclasses.dataclass(frozen=True)
class Aabb:
    """Axis-aligned box given by its min and max corners (3-vectors)."""

    min_corner: Tensor
    max_corner: Tensor

    def __post_init__(self):
        mn = torch.as_tensor(self.min_corner, dtype=torch.float64).reshape(3)
        mx = torch.as_tensor(self.max_corner, dtype=torch.float64).reshape(3)
        object.__setattr__(self, "min_corner", mn)
        object.__setattr__(self, "max_corner", mx)

    @property
    def extents(self) -> Tensor:
        return self.max_corner - self.min_corner

    @property
    def center(self) -> Tensor:
        return 0.5 * (self.min_corner + self.max_corner)

    def corners(self) -> Tensor:
        """All 8 corners, shape (8, 3)."""
        mn, mx = self.min_corner, self.max_corner
        pick = torch.tensor(
            [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
            dtype=torch.float64,
        )
        return mn + pick * (mx - mn)

    def is_degenerate(self) -> bool:
        return bool((self.extents <= 0).any())


def unit_cube() -> Aabb:
    h = UNIT_CUBE_HALF
    return Aabb(torch.tensor([-h, -h, -h]), torch.tensor([h, h, h]))


@dataclasses.dataclass(frozen=True)
class CameraView:
    """One frame's geometric identity: extrinsic pose plus pinhole intrinsics.

    pose        4x4 world-to-camera rigid transform
    focal       (fx, fy) in pixels
    principal   (cx, cy) in pixels
    resolution  (H, W) in pixels
    """

    pose: Tensor
    focal: tuple[float, float]
    principal: tuple[float, float]
    resolution: tuple[int, int]

    def __post_init__(self):
        pose = torch.as_tensor(self.pose, dtype=torch.float64).reshape(4, 4)
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "focal", (float(self.focal[0]), float(self.focal[1])))
        object.__setattr__(
            self, "principal", (float(self.principal[0]), float(self.principal[1]))
        )
        object.__setattr__(
            self, "resolution", (int(self.resolution[0]), int(self.resolution[1]))
        )
        r = pose[:3, :3]
        if not torch.allclose(r @ r.T, torch.eye(3, dtype=torch.float64), atol=_ORTHO_TOL):
            raise ValueError("pose rotation block is not orthonormal")
        if torch.det(r) < 0:
            raise ValueError("pose rotation block has negative determinant")
        if not torch.allclose(pose[3], torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=torch.float64)):
            raise ValueError("pose bottom row must be [0, 0, 0, 1]")
        fx, fy = self.focal
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")
        h, w = self.resolution
        cx, cy = self.principal
        if not (0 <= cx < w and 0 <= cy < h):
            raise ValueError("principal point outside the image")

    @property
    def rotation(self) -> Tensor:
        return self.pose[:3, :3]

    @property
    def translation(self) -> Tensor:
        return self.pose[:3, 3]

    @property
    def camera_center(self) -> Tensor:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> Tensor:
        """Viewing direction (camera +z) in world coordinates."""
        return self.rotation.T @ torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)

    def scaled_to(self, height: int, width: int) -> "CameraView":
        """Same camera with intrinsics rescaled to a new pixel resolution.

        Used to project into feature maps that are coarser than the image.
        """
        h, w = self.resolution
        sy, sx = height / h, width / w
        fx, fy = self.focal
        cx, cy = self.principal
        return CameraView(
            pose=self.pose,
            focal=(fx * sx, fy * sy),
            principal=(cx * sx, cy * sy),
            resolution=(height, width),
        )


@dataclasses.dataclass(frozen=True)
class Ray:
    """A single ray with the segment bounds used for marching."""

    origin: Tensor
    direction: Tensor
    near: float
    far: float

    def __post_init__(self):
        o = torch.as_tensor(self.origin, dtype=torch.float64).reshape(3)
        d = torch.as_tensor(self.direction, dtype=torch.float64).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        if abs(float(d.norm()) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not self.near < self.far:
            raise ValueError("ray requires near < far")


@dataclasses.dataclass(frozen=True)
class RayBundle:
    """One ray per pixel of a view, stored struct-of-arrays.

    origins/directions have shape (H, W, 3); near/far have shape (H, W).
    ``far <= near`` marks rays that miss the marching segment entirely.
    """

    origins: Tensor
    directions: Tensor
    near: Tensor
    far: Tensor

    def __getitem__(self, idx) -> Ray:
        r, c = idx
        return Ray(
            self.origins[r, c],
            self.directions[r, c],
            float(self.near[r, c]),
            float(self.far[r, c]),
        )


@dataclasses.dataclass(frozen=True)
class SimilarityTransform:
    """World-space map ``x -> scale * (rotation @ x - offset)``."""

    rotation: Tensor
    scale: float
    offset: Tensor

    def apply_point(self, x: Tensor) -> Tensor:
        x = torch.as_tensor(x, dtype=torch.float64)
        return self.scale * (x @ self.rotation.T - self.offset)

    def apply_box(self, box: Aabb) -> Aabb:
        corners = self.apply_point(box.corners())
        return Aabb(corners.min(dim=0).values, corners.max(dim=0).values)

    def apply_view(self, view: CameraView) -> CameraView:
        new_r = view.rotation @ self.rotation.T
        new_center = self.apply_point(view.camera_center)
        pose = torch.eye(4, dtype=torch.float64)
        pose[:3, :3] = new_r
        pose[:3, 3] = -new_r @ new_center
        return CameraView(pose, view.focal, view.principal, view.resolution)


def _rotation_between(a: Tensor, b: Tensor) -> Tensor:
    """Minimal rotation taking unit vector a onto unit vector b (Rodrigues)."""
    a = a / a.norm()
    b = b / b.norm()
    v = torch.linalg.cross(a, b)
    c = torch.dot(a, b)
    if float(c) < -1.0 + 1e-12:
        # Antipodal: rotate half-turn about any axis orthogonal to a.
        helper = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        if abs(float(a[0])) > 0.9:
            helper = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
        axis = torch.linalg.cross(a, helper)
        axis = axis / axis.norm()
        return 2.0 * torch.outer(axis, axis) - torch.eye(3, dtype=torch.float64)
    vx = torch.tensor(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ],
        dtype=torch.float64,
    )
    return torch.eye(3, dtype=torch.float64) + vx + vx @ vx / (1.0 + c)


def _camera_plane_rotation(centers: Tensor) -> Tensor:
    """Rotation aligning the best-fit plane of camera centers with z = const."""
    if centers.shape[0] < 3:
        return torch.eye(3, dtype=torch.float64)
    centered = centers - centers.mean(dim=0)
    # Least-squares plane normal: singular vector of the smallest singular value.
    _, s, vh = torch.linalg.svd(centered)
    if float(s[-1]) > 0.999 * float(s[0]):
        return torch.eye(3, dtype=torch.float64)  # isotropic cloud, plane undefined
    normal = vh[-1]
    if float(normal[2]) < 0:
        normal = -normal
    return _rotation_between(normal, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64))


def compute_normalization(views: list[CameraView], object_bounds: Aabb) -> SimilarityTransform:
    """Similarity transform that normalizes the scene.

    After the transform the object bounds fit inside the unit cube centered at
    the origin and the camera centers' best-fit plane is z = const.  Relative
    camera poses are preserved (rotations exactly, translations up to the
    global scale).
    """
    if len(views) < 1:
        raise ValueError("need at least one view")
    if object_bounds.is_degenerate():
        raise ValueError("object bounds are degenerate (zero volume)")
    centers = torch.stack([v.camera_center for v in views])
    rot = _camera_plane_rotation(centers)
    corners = object_bounds.corners() @ rot.T
    mn = corners.min(dim=0).values
    mx = corners.max(dim=0).values
    scale = 1.0 / float((mx - mn).max())
    offset = 0.5 * (mn + mx)
    return SimilarityTransform(rotation=rot, scale=scale, offset=offset)


def normalize_poses(views: list[CameraView], object_bounds: Aabb) -> list[CameraView]:
    """Normalize camera poses so the object occupies the unit cube.

    See :func:`compute_normalization` for the transform; this applies it to
    every view.
    """
    transform = compute_normalization(views, object_bounds)
    return [transform.apply_view(v) for v in views]


def project(points: Tensor, view: CameraView) -> tuple[Tensor, Tensor]:
    """Pinhole projection of world points into a view.

    points: (..., 3).  Returns (pixels (..., 2), depths (...)).  Depth is the
    camera-space z coordinate; a non-positive depth means the point is behind
    the camera and the pixel coordinates are unusable (caller drops those).
    """
    points = torch.as_tensor(points, dtype=torch.float64)
    cam = points @ view.rotation.T + view.translation
    depth = cam[..., 2]
    fx, fy = view.focal
    cx, cy = view.principal
    safe = torch.where(depth == 0, torch.ones_like(depth), depth)
    u = fx * cam[..., 0] / safe + cx
    v = fy * cam[..., 1] / safe + cy
    return torch.stack([u, v], dim=-1), depth


def unproject_pixel(pixels: Tensor, depths: Tensor, view: CameraView) -> Tensor:
    """Inverse pinhole map: pixel coordinates + camera depth -> world point.

    pixels: (..., 2), depths: (...).  Requires strictly positive depth.
    """
    pixels = torch.as_tensor(pixels, dtype=torch.float64)
    depths = torch.as_tensor(depths, dtype=torch.float64)
    if bool((depths <= 0).any()):
        raise ValueError("unproject requires positive depth")
    fx, fy = view.focal
    cx, cy = view.principal
    x = (pixels[..., 0] - cx) / fx * depths
    y = (pixels[..., 1] - cy) / fy * depths
    cam = torch.stack([x, y, depths], dim=-1)
    return (cam - view.translation) @ view.rotation


def ray_aabb(origins: Tensor, directions: Tensor, box: Aabb) -> tuple[Tensor, Tensor]:
    """Slab intersection of rays with an axis-aligned box.

    Returns (t_near, t_far) clamped to t >= 0; rays that miss get
    t_far <= t_near.  Shapes broadcast over leading dims of (..., 3) inputs.
    """
    inv = 1.0 / torch.where(directions == 0, torch.full_like(directions, 1e-12), directions)
    t0 = (box.min_corner - origins) * inv
    t1 = (box.max_corner - origins) * inv
    t_near = torch.minimum(t0, t1).max(dim=-1).values
    t_far = torch.maximum(t0, t1).min(dim=-1).values
    t_near = t_near.clamp_min(0.0)
    return t_near, t_far


def generate_rays(view: CameraView, segment: str = "foreground") -> RayBundle:
    """One ray per pixel, through pixel centers, in world coordinates.

    segment="foreground": near/far are the unit-cube entry/exit distances
    (far <= near for rays that miss the cube).
    segment="background": near is where the background march starts, i.e. the
    cube exit for rays that hit it and the closest approach to the scene
    center otherwise; far is +inf, the shell being closed off by the bounded
    contraction during marching.
    """
    h, w = view.resolution
    fx, fy = view.focal
    cx, cy = view.principal
    vv, uu = torch.meshgrid(
        torch.arange(h, dtype=torch.float64) + 0.5,
        torch.arange(w, dtype=torch.float64) + 0.5,
        indexing="ij",
    )
    dirs_cam = torch.stack([(uu - cx) / fx, (vv - cy) / fy, torch.ones_like(uu)], dim=-1)
    dirs = dirs_cam @ view.rotation  # rows are R^T @ d
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    center = view.camera_center
    origins = center.expand(h, w, 3).contiguous()

    t_near, t_far = ray_aabb(origins, dirs, unit_cube())
    if segment == "foreground":
        return RayBundle(origins, dirs, t_near, t_far)
    if segment == "background":
        hit = t_far > t_near
        closest = (-(origins * dirs).sum(dim=-1)).clamp_min(1e-3)
        start = torch.where(hit, t_far, closest)
        inf = torch.full_like(start, math.inf)
        return RayBundle(origins, dirs, start, inf)
    raise ValueError(f"unknown segment {segment!r}")
