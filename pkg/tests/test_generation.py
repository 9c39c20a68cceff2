"""Sampling scheme tests with oracle denoisers and a micro model."""

from __future__ import annotations

import dataclasses
import json
import math

import pytest
import torch

from mvdiff.denoiser import Denoiser, micro_config
from mvdiff.diffusion import make_schedule
from mvdiff.generation import (
    generate_conditional,
    generate_trajectory,
    generate_unconditional,
    ring_trajectory,
    sample_frame_set,
    save_images,
    sub_schedule,
)
from mvdiff.rng import make_generator, spawn

from conftest import ring_views


class OracleModel:
    """Stands in for the denoiser: eps aims every frame at a fixed target."""

    def __init__(self, config, schedule, targets):
        self.config = config
        self.schedule = schedule
        self.targets = targets

    def eval(self):
        return self

    def __call__(self, state, *args, **kwargs):
        eps = torch.zeros_like(state.x)
        for n in range(state.num_frames):
            t = int(state.t[n])
            if t == 0:
                continue
            abar = float(self.schedule.alpha_bar[t])
            eps[n] = (state.x[n] - math.sqrt(abar) * self.targets[n]) / math.sqrt(1 - abar)
        return eps


class PerFrameModel:
    """eps depends only on the frame's own sample (ignores all conditioning)."""

    def __init__(self, config):
        self.config = config

    def __call__(self, state, *args, **kwargs):
        return 0.1 * state.x


class TestSubSchedule:
    def test_full_chain_identity(self):
        s = make_schedule(20)
        sub, tau = sub_schedule(s, 20)
        torch.testing.assert_close(sub.alpha_bar, s.alpha_bar)
        torch.testing.assert_close(sub.beta, s.beta)
        assert torch.equal(tau, torch.arange(21))

    def test_strided_tables_consistent(self):
        s = make_schedule(100)
        sub, tau = sub_schedule(s, 10)
        assert tau[0] == 0 and tau[-1] == 100
        torch.testing.assert_close(sub.alpha_bar, s.alpha_bar[tau])
        # alpha'_k = abar'_k / abar'_{k-1} by construction
        torch.testing.assert_close(
            sub.alpha[1:], sub.alpha_bar[1:] / sub.alpha_bar[:-1]
        )

    def test_bad_steps_rejected(self):
        s = make_schedule(10)
        with pytest.raises(ValueError):
            sub_schedule(s, 0)
        with pytest.raises(ValueError):
            sub_schedule(s, 11)


class TestUnconditional:
    def setup_method(self):
        self.cfg = micro_config()
        self.schedule = make_schedule(20)
        self.views = ring_views(n=3, radius=1.5, z=0.6, h=8, w=8, f=9.0)
        self.tokens = torch.tensor([1, 2], dtype=torch.long)

    def test_requires_two_views(self):
        model = Denoiser(self.cfg)
        with pytest.raises(ValueError):
            generate_unconditional(model, self.schedule, self.views[:1], self.tokens)

    def test_single_step_zero_model_is_affine_in_noise(self):
        model = Denoiser(self.cfg)  # zero head -> eps_pred = 0
        out = sample_frame_set(
            model, self.schedule, self.views, self.tokens, steps=1, lambda_cfg=0.0, gen=3
        )
        # Reconstruct the initial per-frame noise with the same generators.
        gen = make_generator(3)
        frame_gens = spawn(gen, 3)
        noise = torch.stack(
            [torch.randn(3, 8, 8, generator=g) for g in frame_gens]
        )
        abar_t = float(self.schedule.alpha_bar[20])
        expected = (noise / math.sqrt(abar_t)).clamp(0, 1)
        torch.testing.assert_close(out, expected)

    def test_same_seed_identical(self):
        model = Denoiser(self.cfg)
        a = generate_unconditional(model, self.schedule, self.views, self.tokens, steps=3, gen=7)
        b = generate_unconditional(model, self.schedule, self.views, self.tokens, steps=3, gen=7)
        assert torch.equal(a, b)

    def test_oracle_recovers_targets(self):
        targets = torch.rand(3, 3, 8, 8, generator=make_generator(5))
        model = OracleModel(self.cfg, self.schedule, targets)
        out = generate_unconditional(
            model, self.schedule, self.views, self.tokens, steps=20, lambda_cfg=0.0, gen=6
        )
        rms = float(((out - targets) ** 2).mean().sqrt())
        assert rms < 0.05

    def test_timesteps_lockstep(self):
        seen = []
        model = Denoiser(self.cfg)
        sample_frame_set(
            model, self.schedule, self.views, self.tokens, steps=4, gen=0,
            callback=lambda st: seen.append(st.t.clone()),
        )
        for t in seen:
            assert (t == t[0]).all()


class TestConditional:
    def setup_method(self):
        self.cfg = micro_config()
        self.schedule = make_schedule(15)
        self.views = ring_views(n=4, radius=1.5, z=0.6, h=8, w=8, f=9.0)
        self.tokens = torch.tensor([3], dtype=torch.long)
        self.cond = torch.rand(1, 3, 8, 8, generator=make_generator(8))

    def test_requires_cond_and_targets(self):
        model = Denoiser(self.cfg)
        with pytest.raises(ValueError):
            generate_conditional(
                model, self.schedule, self.cond, [], self.views[1:], self.tokens
            )

    def test_max_frames_enforced(self):
        model = Denoiser(micro_config(max_frames=3))
        with pytest.raises(ValueError):
            generate_conditional(
                model, self.schedule, self.cond, self.views[:1], self.views[1:], self.tokens
            )

    def test_conditioning_frames_bit_identical(self):
        model = Denoiser(self.cfg)
        out = sample_frame_set(
            model, self.schedule, self.views, self.tokens, steps=5,
            gen=9, cond_images=self.cond, n_cond=1,
        )
        assert torch.equal(out[0], self.cond[0])

    def test_returns_only_generated_frames(self):
        model = Denoiser(self.cfg)
        out = generate_conditional(
            model, self.schedule, self.cond, self.views[:1], self.views[1:], self.tokens,
            steps=3, gen=10,
        )
        assert out.shape == (3, 3, 8, 8)

    def test_condition_ignoring_oracle_matches_unconditional(self):
        model = PerFrameModel(self.cfg)
        cond_out = sample_frame_set(
            model, self.schedule, self.views, self.tokens, steps=5,
            gen=11, cond_images=self.cond, n_cond=1,
        )
        uncond_out = sample_frame_set(
            model, self.schedule, self.views, self.tokens, steps=5, gen=11
        )
        torch.testing.assert_close(cond_out[1:], uncond_out[1:])


class TestTrajectory:
    def setup_method(self):
        self.cfg = micro_config(max_frames=8)
        self.schedule = make_schedule(10)
        self.tokens = torch.tensor([2, 4], dtype=torch.long)

    def test_ring_trajectory_layout(self):
        traj = ring_trajectory(4, 10, image_size=8)
        assert len(traj) == 10
        azimuths = [
            math.atan2(float(v.camera_center[1]), float(v.camera_center[0]))
            for v in traj[:4]
        ]
        gaps = {round((azimuths[(i + 1) % 4] - azimuths[i]) % (2 * math.pi), 6) for i in range(3)}
        assert gaps == {round(math.pi / 2, 6)}

    def test_scheduling_arithmetic(self):
        model = Denoiser(self.cfg)
        traj = ring_trajectory(4, 12, image_size=8)
        result = generate_trajectory(
            model, self.schedule, traj, self.tokens,
            batch_n_g=4, first_batch=4, steps=2, gen=1,
        )
        assert result.images.shape[0] == 12
        assert result.batch_sizes == [(0, 4), (4, 4), (4, 4)]
        assert result.batch_lambdas == [7.5, 0.0, 0.0]

    def test_single_batch_when_m_equals_first(self):
        model = Denoiser(self.cfg)
        traj = ring_trajectory(4, 4, image_size=8)
        result = generate_trajectory(
            model, self.schedule, traj, self.tokens,
            batch_n_g=4, first_batch=4, steps=2, gen=2,
        )
        assert result.batch_sizes == [(0, 4)]
        assert result.images.shape[0] == 4

    def test_unnormalized_trajectory_rejected(self):
        from mvdiff.geometry import CameraView

        model = Denoiser(self.cfg)
        inside = CameraView(torch.eye(4), (9.0, 9.0), (4.0, 4.0), (8, 8))
        traj = [inside] + ring_trajectory(4, 5, image_size=8)[1:]
        with pytest.raises(ValueError):
            generate_trajectory(model, self.schedule, traj, self.tokens,
                                batch_n_g=4, first_batch=4, steps=2)

    def test_every_output_keeps_its_view(self):
        model = Denoiser(self.cfg)
        traj = ring_trajectory(4, 8, image_size=8)
        result = generate_trajectory(
            model, self.schedule, traj, self.tokens,
            batch_n_g=4, first_batch=4, steps=2, gen=3,
        )
        assert result.views == traj


class TestSaveImages:
    def test_pngs_and_manifest(self, tmp_path):
        views = ring_views(n=3, h=8, w=8)
        images = torch.rand(3, 3, 8, 8, generator=make_generator(12))
        out = save_images(tmp_path / "run", images, views, {"seed": 5, "lambda_cfg": 7.5})
        files = sorted(p.name for p in out.glob("*.png"))
        assert files == ["image_0000.png", "image_0001.png", "image_0002.png"]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 5
        assert len(manifest["poses"]) == 3
        assert manifest["images"] == files

    def test_deterministic_bytes(self, tmp_path):
        views = ring_views(n=2, h=8, w=8)
        images = torch.rand(2, 3, 8, 8, generator=make_generator(13))
        save_images(tmp_path / "a", images, views, {})
        save_images(tmp_path / "b", images, views, {})
        a = (tmp_path / "a" / "image_0000.png").read_bytes()
        b = (tmp_path / "b" / "image_0000.png").read_bytes()
        assert a == b
