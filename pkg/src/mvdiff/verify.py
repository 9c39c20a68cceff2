"""Self-contained invariant suites behind the `verify` CLI command.

Each check recomputes its expected value from an independent construction
(analytic integral, matrix oracle, chain iteration) and reports the observed
maximum error against a fixed tolerance.
"""

from __future__ import annotations

import dataclasses
import math
import time

import torch

from .conditioning import condition_vector
from .diffusion import FrameSetState, make_schedule, p_sample_step, q_sample
from .evaluation import GRAD_CHECK_COMPONENTS, component_grad_check
from .geometry import CameraView, compute_normalization, project, unproject_pixel
from .projection import (
    FeatureVoxelGrid,
    RenderMLP,
    compositing_weights,
    contract_background,
    foreground_voxel_centers,
    render,
)
from .rng import make_generator, spawn
from .synthdata import make_scene_spec, scene_cameras


@dataclasses.dataclass
class CheckResult:
    suite: str
    name: str
    max_error: float
    tolerance: float
    runtime_s: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "name": self.name,
            "max_error": self.max_error,
            "tolerance": self.tolerance,
            "runtime_s": round(self.runtime_s, 3),
            "passed": self.passed,
        }


def _timed(suite: str, name: str, tolerance: float, fn) -> CheckResult:
    start = time.time()
    err = float(fn())
    return CheckResult(suite, name, err, tolerance, time.time() - start)


def _random_views(n: int, gen: torch.Generator) -> list[CameraView]:
    views = []
    for _ in range(n):
        spec = make_scene_spec(int(torch.randint(10_000, (), generator=gen)), 3)
        views.extend(scene_cameras(spec, image_size=16, n_poses=1))
    return views


def geometry_suite() -> list[CheckResult]:
    def roundtrip():
        gen = make_generator(101)
        worst = 0.0
        for view in _random_views(10, gen):
            h, w = view.resolution
            pix = torch.rand(1000, 2, generator=gen, dtype=torch.float64) * torch.tensor(
                [w, h], dtype=torch.float64
            )
            depth = 0.3 + 2.0 * torch.rand(1000, generator=gen, dtype=torch.float64)
            world = unproject_pixel(pix, depth, view)
            pix2, depth2 = project(world, view)
            worst = max(
                worst,
                float((pix2 - pix).abs().max()),
                float((depth2 - depth).abs().max()),
            )
        return worst

    def merf_closed_form():
        out = contract_background(torch.tensor([4.0, 0.0, 0.0], dtype=torch.float64))
        expected = torch.tensor([1.75, 0.0, 0.0], dtype=torch.float64)
        interior = contract_background(torch.tensor([0.5, -0.25, 0.0], dtype=torch.float64))
        interior_err = float(
            (interior - torch.tensor([0.5, -0.25, 0.0], dtype=torch.float64)).abs().max()
        )
        return max(float((out - expected).abs().max()), interior_err)

    def normalization_idempotent():
        gen = make_generator(103)
        from .geometry import Aabb

        views = _random_views(5, gen)
        box = Aabb(torch.tensor([-1.0, -0.5, 0.1]), torch.tensor([0.4, 0.8, 1.3]))
        tf = compute_normalization(views, box)
        once = [tf.apply_view(v) for v in views]
        box_once = tf.apply_box(box)
        tf2 = compute_normalization(once, box_once)
        twice = [tf2.apply_view(v) for v in once]
        return max(
            float((a.pose - b.pose).abs().max()) for a, b in zip(once, twice)
        )

    return [
        _timed("geometry", "project_unproject_roundtrip_1e4", 1e-5, roundtrip),
        _timed("geometry", "merf_contraction_closed_form", 0.0, merf_closed_form),
        _timed("geometry", "pose_normalization_idempotent", 1e-6, normalization_idempotent),
    ]


def _constant_mlp(channels: int, sigma: float, feature: float) -> RenderMLP:
    mlp = RenderMLP(channels).double()
    with torch.no_grad():
        for layer in mlp.net:
            if isinstance(layer, torch.nn.Linear):
                layer.weight.zero_()
                layer.bias.zero_()
        mlp.net[-1].bias[0] = math.log(math.expm1(sigma))
        mlp.net[-1].bias[1:] = math.log(feature / (1 - feature))
    return mlp


def render_suite() -> list[CheckResult]:
    def analytic_compositing():
        sigma, c = 2.0, 0.6
        g = 4
        grid = FeatureVoxelGrid(
            torch.zeros(2, g, g, g, dtype=torch.float64),
            torch.zeros(2, g, g, g, dtype=torch.float64),
        )
        pose = torch.eye(4, dtype=torch.float64)
        pose[2, 3] = 2.0
        pose[0, 0] = -1.0
        pose[2, 2] = -1.0
        view = CameraView(pose, (10.0, 10.0), (2.5, 2.5), (5, 5))
        out = render(grid, view, _constant_mlp(2, sigma, c), n_samples=256, include_background=False)
        expected = c * (1.0 - math.exp(-sigma * 1.0))  # central ray: L = 1
        return abs(float(out[0, 2, 2].detach()) - expected) / expected

    def weight_budget():
        gen = make_generator(104)
        density = torch.rand(64, 32, generator=gen, dtype=torch.float64) * 8
        deltas = torch.rand(64, 32, generator=gen, dtype=torch.float64) * 0.3
        w = compositing_weights(density, deltas)
        overshoot = float((w.sum(dim=-1) - 1.0).max())
        negative = float((-w.min()).clamp_min(0.0))
        return max(overshoot, negative, 0.0)

    def impulse_roundtrip():
        g = 4
        mlp = RenderMLP(2).double()
        with torch.no_grad():
            for layer in mlp.net:
                if isinstance(layer, torch.nn.Linear):
                    layer.weight.zero_()
                    layer.bias.zero_()
            mlp.net[0].weight[0, 0] = 1.0
            mlp.net[2].weight[0, 0] = 1.0
            mlp.net[4].weight[0, 0] = 50.0
            mlp.net[4].bias[0] = -10.0
        fg = torch.zeros(2, g, g, g, dtype=torch.float64)
        fg[0, 2, 1, 2] = 1.0
        grid = FeatureVoxelGrid(fg, torch.zeros_like(fg))
        center = foreground_voxel_centers(g)[2, 1, 2]
        spec = make_scene_spec(0, 41)
        worst = 0.0
        for view in scene_cameras(spec, image_size=12, n_poses=2):
            out = render(grid, view, mlp, n_samples=64, include_background=False)
            acc = out.sum(dim=0)
            got = torch.nonzero(acc == acc.max())[0].double()
            pix, _ = project(center, view)
            pred = torch.tensor([pix[1], pix[0]], dtype=torch.float64) - 0.5
            worst = max(worst, float((got - pred).abs().max()))
        return worst

    return [
        _timed("render", "constant_density_transmittance_integral", 0.01, analytic_compositing),
        _timed("render", "compositing_weights_bounded", 1e-6, weight_budget),
        _timed("render", "voxel_impulse_projects_to_predicted_pixel", 1.0, impulse_roundtrip),
    ]


def gradcheck_suite() -> list[CheckResult]:
    results = []
    for name in GRAD_CHECK_COMPONENTS:
        start = time.time()
        report = component_grad_check(name)
        results.append(
            CheckResult(
                "gradcheck",
                f"{name}_{report.mode}_{report.n_probes}probes",
                report.max_rel_error,
                report.tolerance,
                time.time() - start,
            )
        )
    return results


def diffusion_suite() -> list[CheckResult]:
    def chain_equivalence():
        s = make_schedule(10, 0.02, 0.2)
        gen = make_generator(105)
        x0 = torch.randn(16, generator=gen, dtype=torch.float64)
        x = x0.clone()
        acc = torch.zeros_like(x0)
        for t in range(1, 11):
            b = float(s.beta[t])
            e = torch.randn(16, generator=gen, dtype=torch.float64)
            x = math.sqrt(1 - b) * x + math.sqrt(b) * e
            acc = math.sqrt(1 - b) * acc + math.sqrt(b) * e
        eps = acc / math.sqrt(1 - float(s.alpha_bar[10]))
        closed = q_sample(x0, torch.tensor(10), eps, s)
        return float((closed - x).abs().max())

    def oracle_reverse():
        s = make_schedule(50, 1e-3, 0.15)
        gen = make_generator(106)
        target = torch.rand(2, 1, 4, 4, generator=gen, dtype=torch.float64)
        views = scene_cameras(make_scene_spec(1, 42), image_size=4, n_poses=2)
        state = FrameSetState(
            x=torch.randn(2, 1, 4, 4, generator=gen, dtype=torch.float64),
            t=torch.full((2,), 50),
            views=views,
            conditions=[condition_vector(v, None, mode="test") for v in views],
            caption_tokens=torch.zeros(0, dtype=torch.long),
        )
        gens = spawn(make_generator(107), 2)
        while bool((state.t > 0).any()):
            tn = int(state.t[0])
            abar = float(s.alpha_bar[tn])
            eps = (state.x - math.sqrt(abar) * target) / math.sqrt(1 - abar)
            state = p_sample_step(state, eps, s, gens, deterministic=True)
        return float(((state.x - target) ** 2).mean().sqrt())

    def conditioned_immutable():
        s = make_schedule(20)
        gen = make_generator(108)
        views = scene_cameras(make_scene_spec(2, 43), image_size=4, n_poses=3)
        x = torch.randn(3, 1, 4, 4, generator=gen)
        state = FrameSetState(
            x=x.clone(),
            t=torch.tensor([0, 20, 20]),
            views=views,
            conditions=[condition_vector(v, None, mode="test") for v in views],
            caption_tokens=torch.zeros(0, dtype=torch.long),
        )
        gens = spawn(gen, 3)
        for _ in range(20):
            eps = torch.randn(3, 1, 4, 4, generator=gen)
            state = p_sample_step(state, eps, s, gens)
        return 0.0 if torch.equal(state.x[0], x[0]) else 1.0

    return [
        _timed("diffusion", "chain_equals_closed_form_marginal", 1e-10, chain_equivalence),
        _timed("diffusion", "oracle_denoiser_reverse_rms", 0.05, oracle_reverse),
        _timed("diffusion", "conditioned_frames_bit_immutable", 0.0, conditioned_immutable),
    ]


SUITES = {
    "geometry": geometry_suite,
    "render": render_suite,
    "gradcheck": gradcheck_suite,
    "diffusion": diffusion_suite,
}


def run_suites(names: list[str]) -> list[CheckResult]:
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown verification suite {name!r}")
        results.extend(SUITES[name]())
    return results
