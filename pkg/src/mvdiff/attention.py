"""Cross-frame attention with condition-aware projections.

The attention inside a frame set works per spatial token.  Queries of frame i
attend to the tokens of all *other* frames, so one joint denoising step can
match appearance across views.  Every projection (Q, K, V) is a pretrained-style
linear map plus a low-rank delta that sees the token concatenated with the
frame's 10-dim condition vector:

    proj(h, z) = W h + s * U D [h; z]

with U zero-initialized so the delta starts as a no-op.  Caption tokens enter
through a separate cross-attention with the same conditioned query projection.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .conditioning import COND_DIM


class ConditionedProjection(nn.Module):
    """Linear projection with a condition-augmented low-rank delta."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rank: int = 4,
        cond_dim: int = COND_DIM,
        scale: float = 1.0,
    ):
        super().__init__()
        self.base = nn.Linear(d_in, d_out, bias=False)
        self.down = nn.Linear(d_in + cond_dim, rank, bias=False)
        self.up = nn.Linear(rank, d_out, bias=False)
        nn.init.zeros_(self.up.weight)
        self.scale = scale

    def forward(self, tokens: Tensor, z: Tensor) -> Tensor:
        """tokens: (..., T, d_in); z: (..., cond_dim), broadcast over tokens."""
        z_tok = z.unsqueeze(-2).expand(*tokens.shape[:-1], z.shape[-1])
        delta = self.up(self.down(torch.cat([tokens, z_tok], dim=-1)))
        return self.base(tokens) + self.scale * delta


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """softmax(q k^T / sqrt(d_head)) v with optional head split.

    q: (Tq, d), k/v: (Tk, d).  Returns (Tq, d).
    """
    d = q.shape[-1]
    d_head = d // heads
    q = q.reshape(q.shape[0], heads, d_head).transpose(0, 1)
    k = k.reshape(k.shape[0], heads, d_head).transpose(0, 1)
    v = v.reshape(v.shape[0], heads, d_head).transpose(0, 1)
    attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d_head), dim=-1)
    out = attn @ v
    return out.transpose(0, 1).reshape(-1, d)


class CrossFrameAttention(nn.Module):
    """Attention across the frames of one set (queries i, keys/values j != i).

    With a single frame the keys and values fall back to the frame itself,
    which is exactly the self-attention behaviour the single-image prior
    training path relies on.
    """

    def __init__(
        self,
        channels: int,
        d_att: int | None = None,
        rank: int = 4,
        cond_dim: int = COND_DIM,
        heads: int = 1,
        scale: float = 1.0,
    ):
        super().__init__()
        d_att = d_att or channels
        if d_att % heads != 0:
            raise ValueError("attention dim must divide evenly into heads")
        self.heads = heads
        self.q_proj = ConditionedProjection(channels, d_att, rank, cond_dim, scale)
        self.k_proj = ConditionedProjection(channels, d_att, rank, cond_dim, scale)
        self.v_proj = ConditionedProjection(channels, d_att, rank, cond_dim, scale)
        self.out = nn.Linear(d_att, channels)

    def forward(self, h: Tensor, z: Tensor) -> Tensor:
        """h: (N, C, H, W); z: (N, cond_dim).  Returns h + attended features."""
        n, c, height, width = h.shape
        tokens = h.flatten(2).transpose(1, 2)  # (N, HW, C)
        q = self.q_proj(tokens, z)
        k = self.k_proj(tokens, z)
        v = self.v_proj(tokens, z)
        outputs = []
        for i in range(n):
            if n == 1:
                k_ctx, v_ctx = k[0], v[0]
            else:
                idx = [j for j in range(n) if j != i]
                k_ctx = k[idx].reshape(-1, k.shape[-1])
                v_ctx = v[idx].reshape(-1, v.shape[-1])
            outputs.append(self.out(_attend(q[i], k_ctx, v_ctx, self.heads)))
        attended = torch.stack(outputs)  # (N, HW, C)
        return h + attended.transpose(1, 2).reshape(n, c, height, width)


class CaptionCrossAttention(nn.Module):
    """Cross-attention from spatial tokens to shared caption tokens.

    An empty token list short-circuits to the identity, which is the
    unconditional branch used for classifier-free guidance.
    """

    def __init__(
        self,
        channels: int,
        d_txt: int,
        d_att: int | None = None,
        rank: int = 4,
        cond_dim: int = COND_DIM,
        heads: int = 1,
        scale: float = 1.0,
    ):
        super().__init__()
        d_att = d_att or channels
        if d_att % heads != 0:
            raise ValueError("attention dim must divide evenly into heads")
        self.heads = heads
        self.q_proj = ConditionedProjection(channels, d_att, rank, cond_dim, scale)
        self.k_proj = nn.Linear(d_txt, d_att, bias=False)
        self.v_proj = nn.Linear(d_txt, d_att, bias=False)
        self.out = nn.Linear(d_att, channels)

    def forward(self, h: Tensor, tokens: Tensor, z: Tensor) -> Tensor:
        """h: (N, C, H, W); tokens: (L, d_txt); z: (N, cond_dim)."""
        if tokens.shape[0] == 0:
            return h
        n, c, height, width = h.shape
        spatial = h.flatten(2).transpose(1, 2)
        q = self.q_proj(spatial, z)
        k = self.k_proj(tokens)
        v = self.v_proj(tokens)
        outputs = [self.out(_attend(q[i], k, v, self.heads)) for i in range(n)]
        attended = torch.stack(outputs)
        return h + attended.transpose(1, 2).reshape(n, c, height, width)
