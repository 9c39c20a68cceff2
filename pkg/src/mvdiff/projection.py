"""Projection layer: lift posed image features into a voxel grid and render back.

Pipeline (applied inside the denoiser at inner stages):

    compress -> unproject -> aggregate -> refine (3D CNN) -> volume render
             -> scale -> expand

The voxel grid has a foreground half covering the unit cube and a background
half indexed in MERF-contracted coordinates, so unbounded surroundings fit in
a bounded grid.  Rendering marches stratified samples through the foreground
cube and then through the contracted shell, alpha-compositing all samples
front to back.

Camera geometry is constant with respect to autograd; gradients flow through
feature values only (bilinear/trilinear interpolation is linear in them).
"""

from __future__ import annotations

import dataclasses
import math
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .geometry import CameraView, generate_rays


# ---------------------------------------------------------------------------
# MERF contraction


def contract_background(x: Tensor) -> Tensor:
    """MERF piecewise-projective contraction of (..., 3) points into [-2, 2]^3.

    Identity inside the L-inf unit ball; outside, the largest-magnitude
    coordinate j maps to sign(x_j) * (2 - 1/|x_j|) and the others to x_i/|x_j|.
    """
    x = torch.as_tensor(x)
    mag = x.abs()
    inf_norm = mag.max(dim=-1, keepdim=True).values
    is_max = mag == inf_norm
    # Break ties toward the first coordinate so exactly one axis is projective.
    tie_rank = torch.cumsum(is_max.to(torch.int64), dim=-1)
    is_max = is_max & (tie_rank == 1)
    safe = inf_norm.clamp_min(1e-12)
    projected = torch.where(
        is_max, torch.sign(x) * (2.0 - 1.0 / safe), x / safe
    )
    return torch.where(inf_norm <= 1.0, x, projected)


def uncontract_background(c: Tensor) -> Tensor:
    """Inverse of :func:`contract_background` (defined for ||c||_inf < 2).

    Points in the image of the contraction have exactly one coordinate of
    magnitude > 1; grid lattice points in the shell's corner regions violate
    that, so their remaining coordinates are clamped to the image boundary
    before inverting.
    """
    c = torch.as_tensor(c)
    mag = c.abs()
    inf_norm = mag.max(dim=-1, keepdim=True).values
    is_max = mag == inf_norm
    tie_rank = torch.cumsum(is_max.to(torch.int64), dim=-1)
    is_max = is_max & (tie_rank == 1)
    radius = 1.0 / (2.0 - inf_norm).clamp_min(1e-12)
    restored = torch.where(is_max, torch.sign(c) * radius, c.clamp(-1.0, 1.0) * radius)
    return torch.where(inf_norm <= 1.0, c, restored)


# ---------------------------------------------------------------------------
# Voxel grid


@dataclasses.dataclass
class FeatureVoxelGrid:
    """Foreground (unit cube) and background (contracted shell) feature grids.

    Both tensors are (C', G, G, G), indexed [c, iz, iy, ix]; foreground voxel
    (iz, iy, ix) is centered at ((ix+.5)/G-.5, (iy+.5)/G-.5, (iz+.5)/G-.5),
    background voxels live at 4x that span in contracted coordinates.
    """

    foreground: Tensor
    background: Tensor

    def __post_init__(self):
        if self.foreground.shape != self.background.shape:
            raise ValueError("foreground/background grids must share shape")
        if self.foreground.ndim != 4 or self.foreground.shape[1] != self.foreground.shape[2]:
            raise ValueError("grids must be (C', G, G, G)")
        if not bool(torch.isfinite(self.foreground.detach()).all()):
            raise ValueError("non-finite values in foreground grid")
        if not bool(torch.isfinite(self.background.detach()).all()):
            raise ValueError("non-finite values in background grid")

    @property
    def channels(self) -> int:
        return self.foreground.shape[0]

    @property
    def resolution(self) -> int:
        return self.foreground.shape[1]


def foreground_voxel_centers(g: int) -> Tensor:
    """(G, G, G, 3) world centers of the foreground grid over [-0.5, 0.5]^3."""
    coords = (torch.arange(g, dtype=torch.float64) + 0.5) / g - 0.5
    zz, yy, xx = torch.meshgrid(coords, coords, coords, indexing="ij")
    return torch.stack([xx, yy, zz], dim=-1)


def background_voxel_centers(g: int) -> tuple[Tensor, Tensor]:
    """Background grid centers in contracted ([-2, 2]^3) and world coordinates.

    World positions come from inverting the contraction at each center; the
    contraction itself operates on world coordinates rescaled by 2 so the
    foreground cube surface maps onto the L-inf unit sphere.
    """
    coords = 4.0 * ((torch.arange(g, dtype=torch.float64) + 0.5) / g - 0.5)
    zz, yy, xx = torch.meshgrid(coords, coords, coords, indexing="ij")
    contracted = torch.stack([xx, yy, zz], dim=-1)
    world = uncontract_background(contracted) / 2.0
    return contracted, world


# ---------------------------------------------------------------------------
# Unprojection


class Unprojection(NamedTuple):
    grids: Tensor  # (N, C', G, G, G)
    masks: Tensor  # (N, G, G, G) bool


def unproject(
    features: Tensor,
    views: list[CameraView],
    centers: Tensor,
    skip: int | None = None,
) -> Unprojection:
    """Gather bilinear image features at each voxel's projection in each view.

    features: (N, C', Hf, Wf) with views already scaled to (Hf, Wf).
    centers: (G, G, G, 3) world positions to sample for.
    Voxels behind a camera or projecting outside the image are masked invalid;
    a skipped view contributes an all-zero grid and an all-false mask without
    its feature map ever being read.
    """
    n, c, hf, wf = features.shape
    if len(views) != n:
        raise ValueError("one view per feature map required")
    active = [i for i in range(n) if i != skip]
    if not active:
        raise ValueError("all views skipped")
    g = centers.shape[0]
    flat = centers.reshape(-1, 3)
    grids = features.new_zeros(n, c, g, g, g)
    masks = torch.zeros(n, g, g, g, dtype=torch.bool)
    for i in active:
        view = views[i]
        cam = flat @ view.rotation.T + view.translation
        depth = cam[:, 2]
        fx, fy = view.focal
        cx, cy = view.principal
        safe = torch.where(depth <= 0, torch.ones_like(depth), depth)
        u = fx * cam[:, 0] / safe + cx
        v = fy * cam[:, 1] / safe + cy
        valid = (depth > 0) & (u >= 0) & (u < wf) & (v >= 0) & (v < hf)
        # align_corners=False grid coords: +-1 spans the pixel edges, matching
        # the half-integer pixel-center convention.
        gx = (2.0 * u / wf - 1.0).to(features.dtype)
        gy = (2.0 * v / hf - 1.0).to(features.dtype)
        coords = torch.stack([gx, gy], dim=-1).reshape(1, 1, -1, 2)
        sampled = F.grid_sample(
            features[i : i + 1],
            coords,
            mode="bilinear",
            padding_mode="border",
            align_corners=False,
        ).reshape(c, -1)
        sampled = sampled * valid.to(features.dtype)
        grids[i] = sampled.reshape(c, g, g, g)
        masks[i] = valid.reshape(g, g, g)
    return Unprojection(grids, masks)


def ray_depth_encoding(views: list[CameraView], centers: Tensor, dtype=torch.float32) -> Tensor:
    """(N, 4, G, G, G): unit view ray direction + squashed depth per voxel.

    Direction is from the camera center to the voxel; depth is the camera-space
    z, mapped through d/(1+d) to stay bounded for far background voxels.
    """
    g = centers.shape[0]
    flat = centers.reshape(-1, 3)
    encs = []
    for view in views:
        cam_center = view.camera_center
        rel = flat - cam_center
        direction = rel / rel.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        depth = flat @ view.rotation[2] + view.translation[2]
        squashed = depth / (1.0 + depth.abs())
        enc = torch.cat([direction, squashed.unsqueeze(-1)], dim=-1)
        encs.append(enc.T.reshape(4, g, g, g))
    return torch.stack(encs).to(dtype)


# ---------------------------------------------------------------------------
# Network components


class CompressNet(nn.Module):
    """1x1 convolution down to the shared 3D feature width."""

    def __init__(self, channels: int, reduced: int, bias: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(channels, reduced, kernel_size=1, bias=bias)

    def forward(self, h: Tensor) -> Tensor:
        return self.conv(h)


class ExpandNet(nn.Module):
    """1x1 convolution back up to the U-Net feature width."""

    def __init__(self, reduced: int, channels: int, bias: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(reduced, channels, kernel_size=1, bias=bias)

    def forward(self, h: Tensor) -> Tensor:
        return self.conv(h)


class ScaleNet(nn.Module):
    """1x1 conv stack with ReLU restoring arbitrary range after compositing."""

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * channels
        self.net = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 1),
        )

    def forward(self, h: Tensor) -> Tensor:
        return self.net(h)


class AggregatorMLP(nn.Module):
    """Merge per-view voxel grids into one grid.

    An MLP scores each view's (feature, ray encoding, timestep embedding)
    per voxel; scores are softmax-normalized over the valid views.  The output
    combines the weighted mean with the plain mean and population variance of
    the valid views.  Voxels seen by no view stay zero.
    """

    def __init__(self, channels: int, t_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 4 * channels
        self.weight_mlp = nn.Sequential(
            nn.Linear(channels + 4 + t_dim, hidden),
            nn.ELU(),
            nn.Linear(hidden, hidden),
            nn.ELU(),
            nn.Linear(hidden, 1),
        )
        self.combine = nn.Linear(3 * channels, channels)

    def view_logits(self, grids: Tensor, enc: Tensor, t_emb: Tensor) -> Tensor:
        """(N, V) raw per-view scores for V = G^3 voxels."""
        n, c = grids.shape[:2]
        feat = grids.flatten(2).transpose(1, 2)  # (N, V, C')
        rays = enc.flatten(2).transpose(1, 2).to(feat.dtype)  # (N, V, 4)
        t = t_emb.to(feat.dtype).unsqueeze(1).expand(n, feat.shape[1], t_emb.shape[-1])
        return self.weight_mlp(torch.cat([feat, rays, t], dim=-1)).squeeze(-1)

    def forward(self, grids: Tensor, masks: Tensor, enc: Tensor, t_emb: Tensor) -> Tensor:
        n, c, g = grids.shape[0], grids.shape[1], grids.shape[2]
        feat = grids.flatten(2)  # (N, C', V)
        valid = masks.flatten(1).to(feat.dtype)  # (N, V)
        logits = self.view_logits(grids, enc, t_emb).transpose(0, 1)  # (V, N)
        logits = logits.masked_fill(~masks.flatten(1).T, float("-inf"))
        any_valid = valid.sum(dim=0) > 0  # (V,)
        weights = torch.softmax(logits, dim=-1)
        weights = torch.where(
            any_valid.unsqueeze(-1), weights, torch.zeros_like(weights)
        )  # rows with no valid view would be NaN
        weighted_mean = torch.einsum("vn,ncv->cv", weights.to(feat.dtype), feat)
        count = valid.sum(dim=0).clamp_min(1.0)
        mean = (feat * valid.unsqueeze(1)).sum(dim=0) / count
        sq_mean = (feat.pow(2) * valid.unsqueeze(1)).sum(dim=0) / count
        var = (sq_mean - mean.pow(2)).clamp_min(0.0)
        stacked = torch.cat([weighted_mean, mean, var], dim=0).T  # (V, 3C')
        out = self.combine(stacked).T  # (C', V)
        out = out * any_valid.to(feat.dtype)
        return out.reshape(c, g, g, g)


class Refine3DBlock(nn.Module):
    """Residual 3D conv block with a timestep bias; identity at initialization."""

    def __init__(self, channels: int, t_dim: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: Tensor, t_emb: Tensor) -> Tensor:
        h = self.conv1(x.unsqueeze(0)).squeeze(0)
        h = h + self.t_proj(t_emb.to(x.dtype)).reshape(-1, 1, 1, 1)
        h = F.silu(h)
        return x + self.conv2(h.unsqueeze(0)).squeeze(0)


class RefineNet3D(nn.Module):
    """Stack of residual 3D blocks refining the aggregated grid."""

    def __init__(self, channels: int, t_dim: int, blocks: int = 5):
        super().__init__()
        self.blocks = nn.ModuleList(Refine3DBlock(channels, t_dim) for _ in range(blocks))

    def forward(self, grid: FeatureVoxelGrid, t_emb: Tensor) -> FeatureVoxelGrid:
        fg, bg = grid.foreground, grid.background
        for block in self.blocks:
            fg = block(fg, t_emb)
            bg = block(bg, t_emb)
        return FeatureVoxelGrid(fg, bg)


class RenderSample(NamedTuple):
    """Density and feature emitted by the render MLP for interpolated inputs."""

    density: Tensor
    feature: Tensor


class RenderMLP(nn.Module):
    """3-layer MLP mapping an interpolated grid feature to (density, feature).

    Density is softplus-activated (non-negative); the emitted feature is
    sigmoid-bounded, which is what ScaleNet undoes after compositing.
    """

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 4 * channels
        self.net = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ELU(),
            nn.Linear(hidden, hidden),
            nn.ELU(),
            nn.Linear(hidden, 1 + channels),
        )

    def forward(self, f: Tensor) -> RenderSample:
        out = self.net(f)
        return RenderSample(F.softplus(out[..., 0]), torch.sigmoid(out[..., 1:]))


# ---------------------------------------------------------------------------
# Volume rendering


def _trilinear(grid: Tensor, positions: Tensor, span: float) -> Tensor:
    """Sample (C', G, G, G) at (..., 3) positions in [-span/2, span/2]^3."""
    shape = positions.shape[:-1]
    coords = (positions * (2.0 / span)).to(grid.dtype).reshape(1, -1, 1, 1, 3)
    out = F.grid_sample(
        grid.unsqueeze(0),
        coords,
        mode="bilinear",
        padding_mode="zeros",
        align_corners=False,
    )
    return out.reshape(grid.shape[0], -1).T.reshape(*shape, grid.shape[0])


def _sample_offsets(n: int, shape, gen: torch.Generator | None) -> Tensor:
    """Per-stratum offsets in (0,1): midpoints when deterministic."""
    if gen is None:
        return torch.full((*shape, n), 0.5, dtype=torch.float64)
    return torch.rand((*shape, n), generator=gen, dtype=torch.float64)


def render(
    grid: FeatureVoxelGrid,
    view: CameraView,
    mlp: RenderMLP,
    n_samples: int = 32,
    sample_gen: torch.Generator | None = None,
    include_background: bool = True,
) -> Tensor:
    """Volume-render the grid into (C', H, W) features for the given view.

    Marches n_samples stratified points through the foreground cube and, when
    enabled, n_samples through the contracted background shell (spaced by
    inverse distance, i.e. approximately uniform in contracted space), then
    alpha-composites all samples front to back:

        r = sum_k T_k (1 - exp(-d_k delta_k)) s_k,
        T_k = exp(-sum_{j<k} d_j delta_j).

    Foreground deltas are world-space stratum widths; background deltas are
    distances between consecutive contracted sample positions.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    h, w = view.resolution
    rays = generate_rays(view, "foreground")
    origins = rays.origins.reshape(-1, 3)
    dirs = rays.directions.reshape(-1, 3)
    near = rays.near.reshape(-1)
    far = rays.far.reshape(-1)
    hit = far > near
    length = torch.where(hit, far - near, torch.zeros_like(far))

    offs = _sample_offsets(n_samples, (origins.shape[0],), sample_gen)
    strata = (torch.arange(n_samples, dtype=torch.float64) + offs) / n_samples
    t_fg = near.unsqueeze(-1) + strata * length.unsqueeze(-1)  # (P, S)
    pos_fg = origins.unsqueeze(1) + t_fg.unsqueeze(-1) * dirs.unsqueeze(1)
    feat_fg = _trilinear(grid.foreground, pos_fg, span=1.0)
    delta_fg = (length / n_samples).unsqueeze(-1).expand_as(t_fg)
    delta_fg = delta_fg.to(feat_fg.dtype)

    feats = feat_fg
    deltas = delta_fg
    if include_background:
        bg_rays = generate_rays(view, "background")
        start = bg_rays.near.reshape(-1)
        offs_bg = _sample_offsets(n_samples, (origins.shape[0],), sample_gen)
        s = (torch.arange(n_samples, dtype=torch.float64) + offs_bg) / (n_samples + 1)
        t_bg = start.unsqueeze(-1) / (1.0 - s)
        pos_bg = origins.unsqueeze(1) + t_bg.unsqueeze(-1) * dirs.unsqueeze(1)
        con = contract_background(2.0 * pos_bg)
        # Closing point: contraction limit of the ray direction at infinity.
        limit = contract_background(1e9 * dirs).unsqueeze(1)
        con_next = torch.cat([con[:, 1:], limit], dim=1)
        delta_bg = (con_next - con).norm(dim=-1)
        feat_bg = _trilinear(grid.background, con, span=4.0)
        feats = torch.cat([feats, feat_bg], dim=1)
        deltas = torch.cat([deltas, delta_bg.to(feat_fg.dtype)], dim=1)

    density, emitted = mlp(feats)
    alpha = 1.0 - torch.exp(-density * deltas)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[:, :1]), 1.0 - alpha + 1e-12], dim=1), dim=1
    )[:, :-1]
    weights = trans * alpha
    rendered = (weights.unsqueeze(-1) * emitted).sum(dim=1)  # (P, C')
    return rendered.T.reshape(grid.channels, h, w)


def compositing_weights(density: Tensor, deltas: Tensor) -> Tensor:
    """Front-to-back weights T_k (1 - exp(-d_k delta_k)) for given samples."""
    alpha = 1.0 - torch.exp(-density * deltas)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[..., :1]), 1.0 - alpha + 1e-12], dim=-1), dim=-1
    )[..., :-1]
    return trans * alpha


# ---------------------------------------------------------------------------
# The full layer


class ProjectionLayer(nn.Module):
    """The 3D bottleneck inserted into inner U-Net stages.

    Forces the per-frame features through an explicit voxel representation:
    whatever comes out has been rendered from one shared 3D grid, so it is
    consistent across frames by construction.
    """

    def __init__(
        self,
        channels: int,
        c_prime: int = 16,
        grid_size: int = 8,
        t_dim: int = 32,
        n_samples: int = 32,
        refine_blocks: int = 5,
    ):
        super().__init__()
        self.c_prime = c_prime
        self.grid_size = grid_size
        self.n_samples = n_samples
        self.compress = CompressNet(channels, c_prime)
        self.aggregator = AggregatorMLP(c_prime, t_dim)
        self.refine = RefineNet3D(c_prime, t_dim, refine_blocks)
        self.render_mlp = RenderMLP(c_prime)
        self.scale = ScaleNet(c_prime)
        self.expand = ExpandNet(c_prime, channels)

    def build_grid(
        self,
        compressed: Tensor,
        views: list[CameraView],
        t_emb: Tensor,
        skip: int | None = None,
    ) -> FeatureVoxelGrid:
        g = self.grid_size
        fg_centers = foreground_voxel_centers(g)
        _, bg_world = background_voxel_centers(g)
        fg = unproject(compressed, views, fg_centers, skip)
        bg = unproject(compressed, views, bg_world, skip)
        enc_fg = ray_depth_encoding(views, fg_centers, compressed.dtype)
        enc_bg = ray_depth_encoding(views, bg_world, compressed.dtype)
        fg_grid = self.aggregator(fg.grids, fg.masks, enc_fg, t_emb)
        bg_grid = self.aggregator(bg.grids, bg.masks, enc_bg, t_emb)
        used = [i for i in range(len(views)) if i != skip]
        pooled_t = t_emb[used].mean(dim=0)
        return self.refine(FeatureVoxelGrid(fg_grid, bg_grid), pooled_t)

    def forward(
        self,
        h: Tensor,
        views: list[CameraView],
        t_emb: Tensor,
        skip: int | None = None,
        sample_gen: torch.Generator | None = None,
    ) -> Tensor:
        """h: (N, C, Hf, Wf); views at image resolution; t_emb: (N, t_dim)."""
        n, _, hf, wf = h.shape
        scaled = [v.scaled_to(hf, wf) for v in views]
        compressed = self.compress(h)
        grid = self.build_grid(compressed, scaled, t_emb, skip)
        rendered = torch.stack(
            [
                render(grid, scaled[i], self.render_mlp, self.n_samples, sample_gen)
                for i in range(n)
            ]
        )
        return self.expand(self.scale(rendered))
