"""Desk-scale metrics and the gradient-check harness.

Images are (C, H, W) in [0, 1]; masks are (H, W) bool.  PSNR/SSIM evaluate
object pixels only (backgrounds are masked away), and multi-view consistency
is measured by warping object pixels between views through ground-truth depth.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .geometry import CameraView, project, unproject_pixel

PSNR_CAP_DB = 99.0


def masked_psnr(pred: Tensor, target: Tensor, mask: Tensor) -> float:
    """PSNR over masked pixels with peak 1.0, capped at 99 dB."""
    if pred.shape != target.shape:
        raise ValueError("pred/target shape mismatch")
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any()):
        raise ValueError("empty mask: PSNR undefined")
    diff = (pred.double() - target.double())[:, mask]
    mse = float((diff ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(-10.0 * math.log10(mse), PSNR_CAP_DB)


def _window_means(x: Tensor, win: int) -> Tensor:
    """Uniform win x win filter, valid region only; x is (C, H, W)."""
    kernel = torch.ones(x.shape[0], 1, win, win, dtype=x.dtype) / (win * win)
    return F.conv2d(x.unsqueeze(0), kernel, groups=x.shape[0]).squeeze(0)


def masked_ssim(
    pred: Tensor,
    target: Tensor,
    mask: Tensor,
    win: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Windowed SSIM averaged over windows whose center pixel is masked.

    Windows are win x win uniform, restricted to positions where the full
    window fits inside the image.
    """
    if pred.shape != target.shape:
        raise ValueError("pred/target shape mismatch")
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any()):
        raise ValueError("empty mask: SSIM undefined")
    pred = pred.double()
    target = target.double()
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    mu_p = _window_means(pred, win)
    mu_t = _window_means(target, win)
    var_p = _window_means(pred * pred, win) - mu_p**2
    var_t = _window_means(target * target, win) - mu_t**2
    cov = _window_means(pred * target, win) - mu_p * mu_t
    ssim_map = ((2 * mu_p * mu_t + c1) * (2 * cov + c2)) / (
        (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
    )
    half = win // 2
    centers = mask[half : mask.shape[0] - half, half : mask.shape[1] - half]
    if not bool(centers.any()):
        raise ValueError("mask has no pixels that admit a full window")
    return float(ssim_map[:, centers].mean())


def warp_pixels(
    image_src: Tensor,
    depth_src: Tensor,
    mask_src: Tensor,
    view_src: CameraView,
    view_dst: CameraView,
    depth_dst: Tensor,
    occlusion_tol: float = 0.05,
) -> tuple[Tensor, Tensor]:
    """Warp masked pixels of src into dst via ground-truth depth.

    Returns (colors_src (K, C), dst_pixel_indices (K, 2) as (row, col)) for
    the correspondences that land inside dst and are not occluded there.
    """
    mask_src = torch.as_tensor(mask_src, dtype=torch.bool)
    rows, cols = torch.nonzero(mask_src, as_tuple=True)
    if rows.numel() == 0:
        return image_src.new_zeros(0, image_src.shape[0]), rows.new_zeros(0, 2)
    pix = torch.stack([cols.double() + 0.5, rows.double() + 0.5], dim=-1)
    depth = depth_src[rows, cols].double()
    world = unproject_pixel(pix, depth, view_src)
    pix_dst, z_dst = project(world, view_dst)
    h, w = view_dst.resolution
    ok = (
        (z_dst > 0)
        & (pix_dst[:, 0] >= 0) & (pix_dst[:, 0] < w)
        & (pix_dst[:, 1] >= 0) & (pix_dst[:, 1] < h)
    )
    cd = pix_dst[:, 0].long().clamp(0, w - 1)
    rd = pix_dst[:, 1].long().clamp(0, h - 1)
    visible = ok & ((depth_dst[rd, cd].double() - z_dst).abs() < occlusion_tol)
    colors_src = image_src[:, rows[visible], cols[visible]].T
    return colors_src, torch.stack([rd[visible], cd[visible]], dim=-1)


def reprojection_consistency(
    images: Tensor,
    views: Sequence[CameraView],
    depths: Tensor,
    masks: Tensor,
    occlusion_tol: float = 0.05,
) -> float:
    """Mean absolute color difference under depth warps, over ordered pairs.

    images: (M, C, H, W); depths/masks: ground truth (M, H, W) aligned with
    the generated views.  Raises when no warp produces a valid correspondence.
    """
    m = images.shape[0]
    if len(views) != m:
        raise ValueError("one view per image required")
    errors = []
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            src_c, dst_idx = warp_pixels(
                images[i], depths[i], masks[i], views[i], views[j], depths[j], occlusion_tol
            )
            if dst_idx.shape[0] == 0:
                continue
            dst_c = images[j][:, dst_idx[:, 0], dst_idx[:, 1]].T
            errors.append((src_c.double() - dst_c.double()).abs().mean())
    if not errors:
        raise ValueError("no valid correspondences between any view pair")
    return float(torch.stack(errors).mean())


# ---------------------------------------------------------------------------
# Gradient checking


@dataclasses.dataclass
class GradCheckReport:
    component: str
    max_rel_error: float
    tolerance: float
    n_probes: int
    mode: str  # "exhaustive" | "directional"

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _flatten(tensors: Sequence[Tensor]) -> Tensor:
    return torch.cat([t.detach().reshape(-1) for t in tensors])


def _assign(tensors: Sequence[Tensor], flat: Tensor) -> None:
    pos = 0
    with torch.no_grad():
        for t in tensors:
            n = t.numel()
            t.copy_(flat[pos : pos + n].reshape(t.shape))
            pos += n


def grad_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-6,
    n_directions: int | None = None,
    seed: int = 0,
) -> tuple[float, int]:
    """Compare autograd gradients of a scalar function against central differences.

    `tensors` are the leaves fn depends on (parameters and inputs, float64,
    requires_grad).  With n_directions=None every coordinate is perturbed;
    otherwise random unit directions spanning all coordinates jointly are used.
    Returns (max relative error, probe count).  The relative error of a probe
    is |num - ana| / max(|num|, |ana|, 1e-2 * scale, 1e-12), where scale is
    the largest gradient magnitude seen.
    """
    for t in tensors:
        if t.dtype != torch.float64:
            raise ValueError("gradient checks require float64 tensors")
    loss = fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=False)
    analytic = _flatten(grads)
    base = _flatten(tensors).clone()
    scale = float(analytic.abs().max().clamp_min(1e-12))
    gen = torch.Generator().manual_seed(seed)

    def eval_at(flat: Tensor) -> float:
        _assign(tensors, flat)
        with torch.no_grad():
            return float(fn())

    max_err = 0.0
    if n_directions is None:
        probes = base.numel()
        for k in range(probes):
            e = torch.zeros_like(base)
            e[k] = eps
            num = (eval_at(base + e) - eval_at(base - e)) / (2 * eps)
            ana = float(analytic[k])
            denom = max(abs(num), abs(ana), 1e-2 * scale, 1e-12)
            max_err = max(max_err, abs(num - ana) / denom)
        mode_probes = probes
    else:
        for _ in range(n_directions):
            v = torch.randn(base.numel(), generator=gen, dtype=torch.float64)
            v = v / v.norm()
            num = (eval_at(base + eps * v) - eval_at(base - eps * v)) / (2 * eps)
            ana = float(analytic @ v)
            denom = max(abs(num), abs(ana), 1e-2 * scale, 1e-12)
            max_err = max(max_err, abs(num - ana) / denom)
        mode_probes = n_directions
    _assign(tensors, base)
    return max_err, mode_probes


def _projection_loss(seed: int = 0):
    """Scalar-valued micro projection layer instance (G=4, 2x2 features, N=2)."""
    from .projection import ProjectionLayer
    from .rng import make_generator
    from .synthdata import scene_cameras, make_scene_spec

    layer = ProjectionLayer(2, c_prime=2, grid_size=4, t_dim=4, n_samples=4, refine_blocks=1).double()
    gen = make_generator(seed)
    with torch.no_grad():
        for p in layer.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.3)
    views = scene_cameras(make_scene_spec(0, seed), image_size=2, n_poses=2)
    h = torch.randn(2, 2, 2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
    t_emb = torch.randn(2, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    weight = torch.randn(2, 2, 2, 2, generator=gen, dtype=torch.float64)

    def fn():
        return (layer(h, views, t_emb) * weight).sum()

    return fn, [h, t_emb] + list(layer.parameters())


def _render_loss(seed: int = 0):
    from .projection import FeatureVoxelGrid, RenderMLP, render
    from .rng import make_generator
    from .synthdata import scene_cameras, make_scene_spec

    gen = make_generator(seed)
    mlp = RenderMLP(2, hidden=4).double()
    with torch.no_grad():
        for p in mlp.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.4)
    fg = torch.randn(2, 4, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    bg = torch.randn(2, 4, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    view = scene_cameras(make_scene_spec(1, seed), image_size=3, n_poses=1)[0]
    weight = torch.randn(2, 3, 3, generator=gen, dtype=torch.float64)

    def fn():
        out = render(FeatureVoxelGrid(fg, bg), view, mlp, n_samples=6)
        return (out * weight).sum()

    return fn, [fg, bg] + list(mlp.parameters())


def _attention_loss(seed: int = 0):
    from .attention import CrossFrameAttention
    from .rng import make_generator

    gen = make_generator(seed)
    attn = CrossFrameAttention(3, rank=2).double()
    with torch.no_grad():
        for p in attn.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.3)
    h = torch.randn(2, 3, 2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
    z = torch.randn(2, 10, generator=gen, dtype=torch.float64, requires_grad=True)
    weight = torch.randn(2, 3, 2, 2, generator=gen, dtype=torch.float64)

    def fn():
        return (attn(h, z) * weight).sum()

    return fn, [h, z] + list(attn.parameters())


def _linear_loss(seed: int = 0):
    from .rng import make_generator

    gen = make_generator(seed)
    lin = torch.nn.Linear(5, 3).double()
    with torch.no_grad():
        for p in lin.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64))
    x = torch.randn(4, 5, generator=gen, dtype=torch.float64, requires_grad=True)
    weight = torch.randn(4, 3, generator=gen, dtype=torch.float64)

    def fn():
        return (lin(x) * weight).sum()

    return fn, [x] + list(lin.parameters())


def _denoiser_loss(seed: int = 0):
    import dataclasses as dc

    from .denoiser import Denoiser, micro_config
    from .rng import make_generator
    from .conditioning import condition_vector
    from .diffusion import FrameSetState
    from .synthdata import scene_cameras, make_scene_spec

    cfg = micro_config()
    model = Denoiser(cfg).double()
    gen = make_generator(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.1)
    views = scene_cameras(make_scene_spec(2, seed), image_size=cfg.image_size, n_poses=2)
    x = torch.randn(
        2, cfg.image_channels, cfg.image_size, cfg.image_size,
        generator=gen, dtype=torch.float64, requires_grad=True,
    )
    state = FrameSetState(
        x=x,
        t=torch.tensor([3, 5]),
        views=views,
        conditions=[condition_vector(v, None, mode="test") for v in views],
        caption_tokens=torch.tensor([1, 2], dtype=torch.long),
    )
    weight = torch.randn(x.shape, generator=gen, dtype=torch.float64)

    def fn():
        return (model(dc.replace(state, x=x)) * weight).sum()

    return fn, [x] + list(model.parameters())


GRAD_CHECK_COMPONENTS = {
    # name: (builder, tolerance, n_directions or None for exhaustive)
    "linear": (_linear_loss, 1e-8, None),
    "attention": (_attention_loss, 1e-4, None),
    "render": (_render_loss, 1e-4, None),
    "projection": (_projection_loss, 1e-4, None),
    "denoiser": (_denoiser_loss, 1e-3, 64),
}


def component_grad_check(name: str, eps: float = 1e-6, seed: int = 0) -> GradCheckReport:
    """Run the named component's finite-difference check at its tolerance."""
    if name not in GRAD_CHECK_COMPONENTS:
        raise ValueError(f"unknown grad-check component {name!r}")
    builder, tol, n_directions = GRAD_CHECK_COMPONENTS[name]
    fn, tensors = builder(seed)
    err, probes = grad_check(fn, tensors, eps=eps, n_directions=n_directions, seed=seed)
    return GradCheckReport(
        component=name,
        max_rel_error=err,
        tolerance=tol,
        n_probes=probes,
        mode="exhaustive" if n_directions is None else "directional",
    )


# ---------------------------------------------------------------------------
# Single-image reconstruction evaluation


def evaluate_reconstruction(
    model,
    schedule,
    scenes,
    n_gen: int = 4,
    steps: int | None = None,
    seed: int = 0,
    forward_kwargs: dict | None = None,
) -> dict:
    """Single-image-conditional generation quality on held-out scenes.

    For each scene, frame 0 conditions the joint generation of n_gen views
    spread around the ring; generated views are scored with masked PSNR/SSIM
    against ground truth and with depth-warp reprojection consistency across
    the generated set.  Returns per-scene records plus means.
    """
    from .generation import generate_conditional
    from .synthdata import caption_of

    per_scene = []
    for s_idx, scene in enumerate(scenes):
        k = scene.num_frames
        cond_idx = 0
        stride = max(k // (n_gen + 1), 1)
        target_idx = [(cond_idx + (i + 1) * stride) % k for i in range(n_gen)]
        targets = [scene.views[i] for i in target_idx]
        generated = generate_conditional(
            model,
            schedule,
            cond_images=scene.images[cond_idx : cond_idx + 1],
            cond_views=[scene.views[cond_idx]],
            target_views=targets,
            caption_tokens=caption_of(scene.spec),
            steps=steps,
            lambda_cfg=0.0,
            gen=seed * 7919 + s_idx,
            forward_kwargs=forward_kwargs,
        )
        psnrs, ssims = [], []
        for out_i, scene_i in enumerate(target_idx):
            mask = scene.masks[scene_i]
            if not bool(mask.any()):
                continue
            psnrs.append(masked_psnr(generated[out_i], scene.images[scene_i], mask))
            ssims.append(masked_ssim(generated[out_i], scene.images[scene_i], mask))
        try:
            reproj = reprojection_consistency(
                generated,
                targets,
                scene.depths[target_idx],
                scene.masks[target_idx],
            )
        except ValueError:
            reproj = float("nan")
        per_scene.append(
            {
                "scene": s_idx,
                "masked_psnr": sum(psnrs) / len(psnrs),
                "masked_ssim": sum(ssims) / len(ssims),
                "reprojection_error": reproj,
                "conditioning_frame": cond_idx,
                "target_frames": target_idx,
            }
        )
    valid_reproj = [r["reprojection_error"] for r in per_scene if r["reprojection_error"] == r["reprojection_error"]]
    return {
        "masked_psnr": sum(r["masked_psnr"] for r in per_scene) / len(per_scene),
        "masked_ssim": sum(r["masked_ssim"] for r in per_scene) / len(per_scene),
        "reprojection_error": sum(valid_reproj) / max(len(valid_reproj), 1),
        "per_scene": per_scene,
    }
