"""Point-cloud and sentence encoders, plus word-erasing augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .config import ModelConfig
from .geometry import MASK_VALUE
from .layers import EncoderLayer, SinePositionEmbedding, masked_max_pool
from .vocab import MASK_ID, PAD_ID, SPECIAL_TOKENS


@dataclass
class SceneTokens:
    """Encoded scene: positions ``(B, M, 3)`` and features ``(B, M, C)``."""

    positions: torch.Tensor
    features: torch.Tensor


def farthest_point_sample(xyz: torch.Tensor, num_samples: int) -> torch.Tensor:
    """Indices ``(B, num_samples)`` chosen by iterative farthest-point sampling.

    The first pick is the point farthest from the centroid; every tie goes to
    the lowest index.
    """

    bsz, n_points, _ = xyz.shape
    if n_points < num_samples:
        raise ValueError(
            f"cannot sample {num_samples} scene tokens from {n_points} points; "
            "lower model.num_scene_tokens or raise world.num_points"
        )
    batch = torch.arange(bsz, device=xyz.device)
    centroid = xyz.mean(dim=1, keepdim=True)
    start = torch.argmax(((xyz - centroid) ** 2).sum(-1), dim=1)

    selected = torch.zeros(bsz, num_samples, dtype=torch.long, device=xyz.device)
    nearest = torch.full((bsz, n_points), float("inf"), dtype=xyz.dtype, device=xyz.device)
    taken = torch.zeros(bsz, n_points, dtype=torch.bool, device=xyz.device)
    current = start
    for i in range(num_samples):
        selected[:, i] = current
        taken[batch, current] = True
        dist = ((xyz - xyz[batch, current].unsqueeze(1)) ** 2).sum(-1)
        nearest = torch.minimum(nearest, dist)
        current = torch.argmax(nearest.masked_fill(taken, -1.0), dim=1)
    return selected


def ball_query(
    xyz: torch.Tensor,
    centers: torch.Tensor,
    radius: float,
    num_neighbors: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest ``num_neighbors`` points strictly within ``radius`` of each center.

    Returns indices ``(B, M, k)`` and a validity mask; invalid slots point at 0.
    """

    k = min(num_neighbors, xyz.shape[1])
    dist = torch.cdist(centers, xyz)
    near_dist, idx = torch.topk(dist, k, dim=-1, largest=False)
    valid = near_dist < radius
    idx = torch.where(valid, idx, torch.zeros_like(idx))
    if k < num_neighbors:
        pad = num_neighbors - k
        idx = torch.cat([idx, idx.new_zeros(*idx.shape[:-1], pad)], dim=-1)
        valid = torch.cat([valid, valid.new_zeros(*valid.shape[:-1], pad)], dim=-1)
    return idx, valid


def _gather(values: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``values[b, idx[b, m, j]]`` for ``values (B, N, D)`` and ``idx (B, M, k)``."""

    bsz, m, k = idx.shape
    flat = idx.reshape(bsz, m * k, 1).expand(-1, -1, values.shape[-1])
    return torch.gather(values, 1, flat).reshape(bsz, m, k, values.shape[-1])


class SetAbstraction(nn.Module):
    """FPS seeds, ball-query grouping, shared point MLP and max-pool."""

    def __init__(self, in_features: int, dim: int, *, num_tokens: int, radius: float, num_neighbors: int) -> None:
        super().__init__()
        self.num_tokens = num_tokens
        self.radius = radius
        self.num_neighbors = num_neighbors
        self.mlp = nn.Sequential(
            nn.Linear(3 + in_features, dim),
            nn.ReLU(),
            nn.Linear(dim, dim),
            nn.ReLU(),
            nn.Linear(dim, dim),
        )
        self.empty = nn.Parameter(torch.zeros(dim))

    def forward(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        xyz, feats = points[..., :3], points[..., 3:]
        seeds = farthest_point_sample(xyz.detach(), self.num_tokens)
        centers = torch.gather(xyz, 1, seeds.unsqueeze(-1).expand(-1, -1, 3))
        idx, valid = ball_query(xyz, centers, self.radius, self.num_neighbors)
        rel = (_gather(xyz, idx) - centers.unsqueeze(2)) / self.radius
        grouped = torch.cat([rel, _gather(feats, idx)], dim=-1)
        tokens = masked_max_pool(self.mlp(grouped), valid, self.empty)
        return centers, tokens


class SceneEncoder(nn.Module):
    """Set abstraction followed by self-attention blocks.

    The first ``masked_scene_layers`` blocks only attend to tokens closer than
    ``scene_mask_radius``.
    """

    def __init__(self, config: ModelConfig, *, point_features: int, room_scale: float = 8.0) -> None:
        super().__init__()
        dim = config.d_model
        self.mask_radius = config.scene_mask_radius
        self.num_masked = config.masked_scene_layers
        self.tokenizer = SetAbstraction(
            point_features,
            dim,
            num_tokens=config.num_scene_tokens,
            radius=config.sa_radius,
            num_neighbors=config.sa_neighbors,
        )
        self.pos = SinePositionEmbedding(dim, scale=room_scale)
        self.layers = nn.ModuleList(
            EncoderLayer(dim, config.num_heads, ffn_mult=config.ffn_mult, dropout=config.dropout)
            for _ in range(config.scene_layers)
        )
        self.norm = nn.LayerNorm(dim)
        self.last_attention: list[torch.Tensor] = []

    def tokenize_points(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.tokenizer(points)

    def encode(self, positions: torch.Tensor, tokens: torch.Tensor) -> SceneTokens:
        pos = self.pos(positions).to(tokens.dtype)
        dist = torch.cdist(positions, positions)
        local_bias = torch.where(
            dist < self.mask_radius,
            torch.zeros_like(dist),
            torch.full_like(dist, MASK_VALUE),
        ).to(tokens.dtype)
        x = tokens
        self.last_attention = []
        for i, layer in enumerate(self.layers):
            x, weights = layer(x, pos=pos, bias=local_bias if i < self.num_masked else None)
            self.last_attention.append(weights.detach())
        return SceneTokens(positions=positions, features=self.norm(x))

    def forward(self, points: torch.Tensor) -> SceneTokens:
        positions, tokens = self.tokenize_points(points)
        return self.encode(positions, tokens)


class SentenceEncoder(nn.Module):
    """Shared text encoder; slot 0 of every sentence is a learned start token."""

    def __init__(self, config: ModelConfig, *, vocab_size: int, max_tokens: int) -> None:
        super().__init__()
        dim = config.text_dim
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.embed = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        self.start = nn.Parameter(torch.randn(dim) * 0.02)
        self.position = nn.Parameter(torch.randn(max_tokens + 1, dim) * 0.02)
        self.layers = nn.ModuleList(
            EncoderLayer(dim, config.num_heads, ffn_mult=config.ffn_mult, dropout=config.dropout)
            for _ in range(config.text_layers)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode ``(B, K, T)`` token ids.

        Returns features ``(B, K, T + 1, D)`` and the padding mask
        ``(B, K, T + 1)`` (``True`` marks padding; slot 0 is never padding).
        """

        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.vocab_size):
            raise ValueError(f"token ids must lie in [0, {self.vocab_size}); got out-of-vocabulary id")
        bsz, k, t = tokens.shape
        if t > self.max_tokens:
            raise ValueError(f"sentences have {t} tokens, encoder supports {self.max_tokens}")
        flat = tokens.reshape(bsz * k, t)
        words = self.embed(flat)
        start = self.start.expand(bsz * k, 1, -1)
        x = torch.cat([start, words], dim=1) + self.position[: t + 1]

        slots = torch.arange(1, t + 1, device=tokens.device)
        padding = slots.unsqueeze(0) > lengths.reshape(-1, 1)
        padding = torch.cat([padding.new_zeros(bsz * k, 1), padding], dim=1)
        for layer in self.layers:
            x, _ = layer(x, key_padding_mask=padding)
        x = self.norm(x)
        return x.reshape(bsz, k, t + 1, -1), padding.reshape(bsz, k, t + 1)

    def encode_sentence(self, tokens: torch.Tensor) -> torch.Tensor:
        """Features ``(T + 1, D)`` of a single unpadded sentence."""

        if tokens.dim() != 1 or tokens.numel() == 0:
            raise ValueError("encode_sentence expects a non-empty 1-D token sequence")
        feats, _ = self.forward(tokens.view(1, 1, -1), torch.tensor([[tokens.numel()]], device=tokens.device))
        return feats[0, 0]


def erase_words(
    tokens: torch.Tensor,
    lengths: torch.Tensor,
    p_erase: float,
    *,
    training: bool = True,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Replace each non-special word with the mask id with probability ``p_erase``."""

    if not 0.0 <= p_erase < 1.0:
        raise ValueError(f"p_erase must lie in [0, 1), got {p_erase}")
    if not training or p_erase == 0.0:
        return tokens
    slots = torch.arange(tokens.shape[-1], device=tokens.device)
    in_sentence = slots < lengths.unsqueeze(-1)
    word = in_sentence & (tokens >= len(SPECIAL_TOKENS))
    draw = torch.rand(tokens.shape, generator=generator, device=tokens.device) < p_erase
    return torch.where(word & draw, torch.full_like(tokens, MASK_ID), tokens)
