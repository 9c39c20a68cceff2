"""Cross-frame and caption attention tests against explicit-loop oracles."""

from __future__ import annotations

import math

import pytest
import torch

from mvdiff.attention import CaptionCrossAttention, ConditionedProjection, CrossFrameAttention
from mvdiff.rng import make_generator


def randomize(module: torch.nn.Module, seed: int, dtype=torch.float64) -> torch.nn.Module:
    module = module.to(dtype)
    gen = make_generator(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=dtype) * 0.3)
    return module


def dense_attention_oracle(q, k, v):
    """Plain nested-loop softmax attention over explicit token lists."""
    q, k, v = q.detach(), k.detach(), v.detach()
    out = torch.zeros(q.shape[0], v.shape[1], dtype=q.dtype)
    d = q.shape[1]
    for a in range(q.shape[0]):
        logits = torch.tensor([float(q[a] @ k[b]) / math.sqrt(d) for b in range(k.shape[0])])
        weights = torch.softmax(logits, dim=0).to(q.dtype)
        for b in range(k.shape[0]):
            out[a] += weights[b] * v[b]
    return out


class TestConditionedProjection:
    def test_scale_zero_is_plain_linear(self):
        proj = randomize(ConditionedProjection(3, 5, rank=2), 0)
        proj.scale = 0.0
        h = torch.randn(4, 3, dtype=torch.float64)
        z = torch.randn(10, dtype=torch.float64)
        torch.testing.assert_close(proj(h, z), proj.base(h))

    def test_zero_init_up_matches_base(self):
        proj = ConditionedProjection(3, 5, rank=2).double()
        h = torch.randn(4, 3, dtype=torch.float64)
        z = torch.randn(10, dtype=torch.float64)
        torch.testing.assert_close(proj(h, z), proj.base(h))

    def test_matrix_arithmetic_oracle(self):
        proj = randomize(ConditionedProjection(2, 3, rank=2, cond_dim=4, scale=1.5), 1)
        h = torch.randn(3, 2, dtype=torch.float64)
        z = torch.randn(4, dtype=torch.float64)
        out = proj(h, z)
        w = proj.base.weight
        d = proj.down.weight
        u = proj.up.weight
        for tok in range(3):
            hz = torch.cat([h[tok], z])
            expected = w @ h[tok] + 1.5 * (u @ (d @ hz))
            torch.testing.assert_close(out[tok], expected)


class TestCrossFrameAttention:
    def test_single_key_softmax(self):
        # Two frames, one spatial token each: frame 0 attends only to frame 1
        # with weight 1, so out_0 = W_O V(h_1, z_1) + h_0.
        attn = randomize(CrossFrameAttention(3, rank=2), 2)
        with torch.no_grad():
            attn.out.bias.zero_()
        h = torch.randn(2, 3, 1, 1, dtype=torch.float64)
        z = torch.randn(2, 10, dtype=torch.float64)
        out = attn(h, z)
        tok1 = h[1].reshape(1, 3)
        v1 = attn.v_proj(tok1, z[1])
        expected0 = h[0].reshape(3) + attn.out(v1).reshape(3)
        torch.testing.assert_close(out[0].reshape(3), expected0)

    def test_permutation_equivariance(self):
        attn = randomize(CrossFrameAttention(4, rank=2), 3)
        gen = make_generator(4)
        h = torch.randn(4, 4, 2, 2, generator=gen, dtype=torch.float64)
        z = torch.randn(4, 10, generator=gen, dtype=torch.float64)
        perm = torch.tensor([2, 0, 3, 1])
        out = attn(h, z)
        out_perm = attn(h[perm], z[perm])
        torch.testing.assert_close(out_perm, out[perm], atol=1e-6, rtol=0)

    def test_matches_dense_loop_oracle(self):
        attn = randomize(CrossFrameAttention(4, rank=2), 5)
        gen = make_generator(6)
        n, c, s = 3, 4, 2
        h = torch.randn(n, c, s, s, generator=gen, dtype=torch.float64)
        z = torch.randn(n, 10, generator=gen, dtype=torch.float64)
        out = attn(h, z)
        tokens = h.flatten(2).transpose(1, 2)
        for i in range(n):
            q = attn.q_proj(tokens[i], z[i])
            ks, vs = [], []
            for j in range(n):
                if j == i:
                    continue
                ks.append(attn.k_proj(tokens[j], z[j]))
                vs.append(attn.v_proj(tokens[j], z[j]))
            k = torch.cat(ks)
            v = torch.cat(vs)
            expected = tokens[i] + attn.out(dense_attention_oracle(q, k, v))
            got = out[i].flatten(1).transpose(0, 1)
            torch.testing.assert_close(got, expected, atol=1e-5, rtol=0)

    def test_single_frame_falls_back_to_self_attention(self):
        attn = randomize(CrossFrameAttention(4, rank=2), 7)
        gen = make_generator(8)
        h = torch.randn(1, 4, 2, 2, generator=gen, dtype=torch.float64)
        z = torch.randn(1, 10, generator=gen, dtype=torch.float64)
        out = attn(h, z)
        tokens = h.flatten(2).transpose(1, 2)
        q = attn.q_proj(tokens[0], z[0])
        k = attn.k_proj(tokens[0], z[0])
        v = attn.v_proj(tokens[0], z[0])
        expected = tokens[0] + attn.out(dense_attention_oracle(q, k, v))
        torch.testing.assert_close(out[0].flatten(1).transpose(0, 1), expected, atol=1e-5, rtol=0)

    def test_identical_frames_zero_delta_give_identical_outputs(self):
        attn = randomize(CrossFrameAttention(4, rank=2), 9)
        with torch.no_grad():
            for proj in (attn.q_proj, attn.k_proj, attn.v_proj):
                proj.up.weight.zero_()
                proj.down.weight.zero_()
        frame = torch.randn(1, 4, 2, 2, dtype=torch.float64)
        h = frame.repeat(3, 1, 1, 1)
        z = torch.randn(3, 10, dtype=torch.float64)  # conditions differ, delta is off
        out = attn(h, z)
        torch.testing.assert_close(out[1], out[0])
        torch.testing.assert_close(out[2], out[0])

    def test_gradients_match_finite_differences(self):
        attn = randomize(CrossFrameAttention(3, rank=2), 10)
        names = [n for n, _ in attn.named_parameters()]

        def f(h, z, *vals):
            return torch.func.functional_call(attn, dict(zip(names, vals)), (h, z))

        gen = make_generator(11)
        h = torch.randn(2, 3, 2, 1, generator=gen, dtype=torch.float64, requires_grad=True)
        z = torch.randn(2, 10, generator=gen, dtype=torch.float64, requires_grad=True)
        params = [p.detach().clone().requires_grad_(True) for p in attn.parameters()]
        assert torch.autograd.gradcheck(f, (h, z, *params), eps=1e-6, atol=1e-4)


class TestCaptionCrossAttention:
    def test_single_token_gets_full_weight(self):
        attn = randomize(CaptionCrossAttention(3, d_txt=5, rank=2), 12)
        with torch.no_grad():
            attn.out.bias.zero_()
        h = torch.randn(2, 3, 2, 2, dtype=torch.float64)
        z = torch.randn(2, 10, dtype=torch.float64)
        tok = torch.randn(1, 5, dtype=torch.float64)
        out = attn(h, tok, z)
        v = attn.v_proj(tok)
        add = attn.out(v).reshape(3, 1, 1)
        torch.testing.assert_close(out, h + add.expand(2, 3, 2, 2), atol=1e-9, rtol=0)

    def test_empty_tokens_identity(self):
        attn = randomize(CaptionCrossAttention(3, d_txt=5, rank=2), 13)
        h = torch.randn(2, 3, 2, 2, dtype=torch.float64)
        z = torch.randn(2, 10, dtype=torch.float64)
        out = attn(h, torch.zeros(0, 5, dtype=torch.float64), z)
        torch.testing.assert_close(out, h)

    def test_matches_dense_loop_oracle(self):
        attn = randomize(CaptionCrossAttention(4, d_txt=3, rank=2), 14)
        gen = make_generator(15)
        h = torch.randn(2, 4, 2, 2, generator=gen, dtype=torch.float64)
        z = torch.randn(2, 10, generator=gen, dtype=torch.float64)
        tok = torch.randn(3, 3, generator=gen, dtype=torch.float64)
        out = attn(h, tok, z)
        spatial = h.flatten(2).transpose(1, 2)
        k = attn.k_proj(tok)
        v = attn.v_proj(tok)
        for i in range(2):
            q = attn.q_proj(spatial[i], z[i])
            expected = spatial[i] + attn.out(dense_attention_oracle(q, k, v))
            torch.testing.assert_close(out[i].flatten(1).transpose(0, 1), expected, atol=1e-5, rtol=0)

    def test_gradients_match_finite_differences(self):
        attn = randomize(CaptionCrossAttention(3, d_txt=4, rank=2), 16)
        names = [n for n, _ in attn.named_parameters()]

        def f(h, tok, z, *vals):
            return torch.func.functional_call(attn, dict(zip(names, vals)), (h, tok, z))

        gen = make_generator(17)
        h = torch.randn(2, 3, 1, 2, generator=gen, dtype=torch.float64, requires_grad=True)
        tok = torch.randn(2, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        z = torch.randn(2, 10, generator=gen, dtype=torch.float64, requires_grad=True)
        params = [p.detach().clone().requires_grad_(True) for p in attn.parameters()]
        assert torch.autograd.gradcheck(f, (h, tok, z, *params), eps=1e-6, atol=1e-4)

    def test_multihead_shapes(self):
        attn = CaptionCrossAttention(8, d_txt=5, d_att=8, heads=2).double()
        h = torch.randn(2, 8, 2, 2, dtype=torch.float64)
        z = torch.randn(2, 10, dtype=torch.float64)
        tok = torch.randn(3, 5, dtype=torch.float64)
        assert attn(h, tok, z).shape == (2, 8, 2, 2)
