"""Contextual query generation.

The whole paragraph is squeezed into a compact set of learned slots, the set
is fused with the scene tokens by stacked co-attention, and every word of
every sentence then reads the fused set back through cross-attention to form
its contextual query.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .config import ModelConfig
from .layers import MultiheadAttention


@dataclass
class CoAttentionOutput:
    fused: torch.Tensor
    affinities: list[torch.Tensor] = field(default_factory=list)


@dataclass
class ContextOutput:
    """Queries ``(B, K, T + 1, C)`` plus intermediate tensors for inspection."""

    queries: torch.Tensor
    compact: torch.Tensor | None = None
    fused: torch.Tensor | None = None
    affinities: list[torch.Tensor] = field(default_factory=list)
    aggregation_weights: torch.Tensor | None = None


class CoAttention(nn.Module):
    """Bidirectional co-attention between the compact set and scene features.

    Stage ``i`` forms ``A_i = (F_set W_set)(F_enc W_enc)^T / sqrt(d)``; the set
    side reads the scene through ``softmax(A_i)`` and the scene side reads the
    set through ``softmax(A_i^T)``. Every set-side stage, the input included,
    is concatenated and projected back to ``C`` channels.
    """

    def __init__(self, dim: int, num_heads: int, num_stages: int) -> None:
        super().__init__()
        self.head_dim = dim // num_heads
        self.num_stages = num_stages
        self.norm_set = nn.ModuleList(nn.LayerNorm(dim) for _ in range(num_stages))
        self.norm_enc = nn.ModuleList(nn.LayerNorm(dim) for _ in range(num_stages))
        self.w_set = nn.ModuleList(nn.Linear(dim, self.head_dim) for _ in range(num_stages))
        self.w_enc = nn.ModuleList(nn.Linear(dim, self.head_dim) for _ in range(num_stages))
        self.v_set = nn.ModuleList(nn.Linear(dim, dim) for _ in range(num_stages))
        self.v_enc = nn.ModuleList(nn.Linear(dim, dim) for _ in range(num_stages))
        self.w_f = nn.Linear((num_stages + 1) * dim, dim)

    def forward(self, f_set: torch.Tensor, f_enc: torch.Tensor) -> CoAttentionOutput:
        stages = [f_set]
        affinities = []
        for i in range(self.num_stages):
            s = self.norm_set[i](f_set)
            e = self.norm_enc[i](f_enc)
            affinity = self.w_set[i](s) @ self.w_enc[i](e).transpose(-2, -1) / math.sqrt(self.head_dim)
            affinities.append(affinity)
            new_set = f_set + torch.softmax(affinity, dim=-1) @ self.v_enc[i](e)
            f_enc = f_enc + torch.softmax(affinity.transpose(-2, -1), dim=-1) @ self.v_set[i](s)
            f_set = new_set
            stages.append(f_set)
        return CoAttentionOutput(fused=self.w_f(torch.cat(stages, dim=-1)), affinities=affinities)


class ContextualQueryGenerator(nn.Module):
    def __init__(self, config: ModelConfig, *, max_sentences: int, max_tokens: int, enabled: bool = True) -> None:
        super().__init__()
        dim, text_dim = config.d_model, config.text_dim
        self.enabled = enabled
        self.w_q = nn.Linear(text_dim, dim)
        self.w_l = nn.Linear(text_dim, dim)
        self.position = nn.Parameter(torch.randn(max_sentences * (max_tokens + 1), dim) * 0.02)
        self.compact_seeds = nn.Parameter(torch.randn(config.compact_size, dim) * 0.02)
        self.seed_norm = nn.LayerNorm(dim)
        self.aggregate = MultiheadAttention(dim, config.num_heads, dropout=config.dropout)
        self.co_attention = CoAttention(dim, config.num_heads, config.coattn_stages)
        self.query_norm = nn.LayerNorm(dim)
        self.propagate = MultiheadAttention(dim, config.num_heads, dropout=config.dropout)

    def aggregate_context(
        self,
        text: torch.Tensor,
        padding: torch.Tensor,
        valid: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Compact set ``(B, N_s, C)`` from paragraph features ``(B, K, T + 1, D)``.

        Keys of padded words and of padded sentences are masked.
        """

        bsz, k, t1, _ = text.shape
        keys = self.w_l(text).reshape(bsz, k * t1, -1) + self.position[: k * t1]
        key_mask = (padding | ~valid.unsqueeze(-1)).reshape(bsz, k * t1)
        seeds = self.seed_norm(self.compact_seeds).unsqueeze(0).expand(bsz, -1, -1)
        return self.aggregate(seeds, keys, keys, key_padding_mask=key_mask)

    def co_attend(self, compact: torch.Tensor, scene_features: torch.Tensor) -> CoAttentionOutput:
        return self.co_attention(compact, scene_features)

    def propagate_context(self, text: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        bsz, k, t1, _ = text.shape
        projected = self.w_q(text).reshape(bsz, k * t1, -1)
        attended, _ = self.propagate(self.query_norm(projected), fused, fused)
        return (projected + attended).reshape(bsz, k, t1, -1)

    def forward(
        self,
        text: torch.Tensor,
        padding: torch.Tensor,
        valid: torch.Tensor,
        scene_features: torch.Tensor,
    ) -> ContextOutput:
        if not self.enabled:
            return ContextOutput(queries=self.w_q(text))
        compact, weights = self.aggregate_context(text, padding, valid)
        co = self.co_attend(compact, scene_features)
        queries = self.propagate_context(text, co.fused)
        return ContextOutput(
            queries=queries,
            compact=compact,
            fused=co.fused,
            affinities=co.affinities,
            aggregation_weights=weights,
        )
