"""Transformer building blocks shared by the encoders and decoders.

Attention takes an optional additive logit bias, either ``(B, NQ, NK)`` shared
by all heads or ``(B, H, NQ, NK)``, plus a boolean key padding mask. Masked
logits use the finite :data:`musubi.geometry.MASK_VALUE` so fully masked rows
stay finite.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .geometry import MASK_VALUE


class MultiheadAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, *, kdim: Optional[int] = None, dropout: float = 0.0) -> None:
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim={dim} is not divisible by num_heads={num_heads}")
        kdim = kdim or dim
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kdim, dim)
        self.v_proj = nn.Linear(kdim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        *,
        bias: Optional[torch.Tensor] = None,
        key_padding_mask: Optional[torch.Tensor] = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return the attended values ``(B, NQ, dim)`` and weights ``(B, H, NQ, NK)``."""

        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if bias is not None:
            logits = logits + (bias.unsqueeze(1) if bias.dim() == 3 else bias)
        if key_padding_mask is not None:
            logits = logits.masked_fill(key_padding_mask[:, None, None, :], MASK_VALUE)
        weights = torch.softmax(logits, dim=-1)
        out = self.dropout(weights) @ v
        out = out.transpose(1, 2).reshape(query.shape[0], query.shape[1], self.dim)
        return self.out_proj(out), weights


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, *, dropout: float = 0.0, out_dim: Optional[int] = None) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, out_dim or dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, num_heads: int, *, ffn_mult: int = 2, dropout: float = 0.0) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, num_heads, dropout=dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult * dim, dropout=dropout)

    def forward(
        self,
        x: torch.Tensor,
        *,
        pos: Optional[torch.Tensor] = None,
        bias: Optional[torch.Tensor] = None,
        key_padding_mask: Optional[torch.Tensor] = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.norm1(x)
        qk = h if pos is None else h + pos
        attended, weights = self.attn(qk, qk, h, bias=bias, key_padding_mask=key_padding_mask)
        x = x + attended
        x = x + self.ffn(self.norm2(x))
        return x, weights


class DecoderLayer(nn.Module):
    """Pre-norm query self-attention, cross-attention to a memory, then FFN.

    ``self_bias`` and ``cross_bias`` are additive logits for the two attention
    stages; the global decoder feeds its relation biases through them.
    """

    def __init__(self, dim: int, num_heads: int, *, ffn_mult: int = 2, dropout: float = 0.0) -> None:
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiheadAttention(dim, num_heads, dropout=dropout)
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = MultiheadAttention(dim, num_heads, dropout=dropout)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult * dim, dropout=dropout)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        *,
        query_pos: Optional[torch.Tensor] = None,
        memory_pos: Optional[torch.Tensor] = None,
        self_bias: Optional[torch.Tensor] = None,
        self_padding_mask: Optional[torch.Tensor] = None,
        cross_bias: Optional[torch.Tensor] = None,
        memory_padding_mask: Optional[torch.Tensor] = None,
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        h = self.norm_self(x)
        qk = h if query_pos is None else h + query_pos
        attended, self_w = self.self_attn(qk, qk, h, bias=self_bias, key_padding_mask=self_padding_mask)
        x = x + attended

        h = self.norm_cross(x)
        q = h if query_pos is None else h + query_pos
        k = memory if memory_pos is None else memory + memory_pos
        attended, cross_w = self.cross_attn(q, k, memory, bias=cross_bias, key_padding_mask=memory_padding_mask)
        x = x + attended
        x = x + self.ffn(self.norm_ffn(x))
        return x, {"self": self_w, "cross": cross_w}


class SinePositionEmbedding(nn.Module):
    """Fixed sinusoidal embedding of xyz coordinates in meters.

    Channels are split evenly over the three axes (remainder to x), each axis
    using geometric frequencies up to ``2π / scale``.
    """

    def __init__(self, dim: int, *, scale: float = 8.0, temperature: float = 10000.0) -> None:
        super().__init__()
        per_axis = (dim // 3) - (dim // 3) % 2
        sizes = [dim - 2 * per_axis, per_axis, per_axis]
        if sizes[0] % 2:
            raise ValueError(f"position embedding dim must be even, got {dim}")
        self.sizes = sizes
        for axis, size in enumerate(sizes):
            exponent = torch.arange(size // 2, dtype=torch.float64) * 2.0 / max(size, 1)
            freqs = (2.0 * math.pi / scale) / temperature**exponent
            self.register_buffer(f"freqs_{axis}", freqs.to(torch.get_default_dtype()), persistent=False)

    def forward(self, xyz: torch.Tensor) -> torch.Tensor:
        parts = []
        for axis in range(3):
            freqs = getattr(self, f"freqs_{axis}").to(xyz.dtype)
            angles = xyz[..., axis : axis + 1] * freqs
            parts.extend([torch.sin(angles), torch.cos(angles)])
        return torch.cat(parts, dim=-1)


def masked_max_pool(features: torch.Tensor, mask: torch.Tensor, empty: torch.Tensor) -> torch.Tensor:
    """Max over dim -2 restricted to ``mask``; rows with no members take ``empty``."""

    filled = features.masked_fill(~mask.unsqueeze(-1), torch.finfo(features.dtype).min)
    pooled = filled.max(dim=-2).values
    has_any = mask.any(dim=-1, keepdim=True)
    return torch.where(has_any, pooled, empty.to(features.dtype).expand_as(pooled))


def softplus_size(raw: torch.Tensor, floor: float = 1e-4) -> torch.Tensor:
    return F.softplus(raw) + floor
