"""Per-sentence grounding: contextual queries decode against the scene tokens
and the sentence slot is turned into an initial box proposal."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .encoders import SceneTokens
from .layers import DecoderLayer, FeedForward, SinePositionEmbedding, softplus_size


@dataclass
class SceneBounds:
    """Axis-aligned extent of each scene's points, ``(B, 3)`` each."""

    minimum: torch.Tensor
    extent: torch.Tensor

    @classmethod
    def from_points(cls, xyz: torch.Tensor) -> "SceneBounds":
        lo = xyz.min(dim=1).values
        hi = xyz.max(dim=1).values
        return cls(minimum=lo, extent=(hi - lo).clamp(min=1e-3))


@dataclass
class LocalOutput:
    """Sentence-slot proposals ``(B, K, 6)`` / features ``(B, K, C)`` and every slot's box."""

    boxes: torch.Tensor
    features: torch.Tensor
    slot_boxes: torch.Tensor
    slot_features: torch.Tensor
    cross_attention: list[torch.Tensor]


class GroundingHead(nn.Module):
    """Two-layer FFN: sigmoid center inside the scene bounds, softplus size."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.ffn = FeedForward(dim, dim, out_dim=6)

    def forward(self, features: torch.Tensor, bounds: SceneBounds, *, clamp: float | None = None) -> torch.Tensor:
        raw = self.ffn(features)
        shape = (bounds.minimum.shape[0],) + (1,) * (features.dim() - 2) + (3,)
        lo = bounds.minimum.reshape(shape).to(raw.dtype)
        extent = bounds.extent.reshape(shape).to(raw.dtype)
        center = lo + torch.sigmoid(raw[..., :3]) * extent
        size = softplus_size(raw[..., 3:])
        if clamp is not None:
            size = torch.minimum(size, clamp * extent)
        return torch.cat([center, size], dim=-1)


class LocalDecoder(nn.Module):
    def __init__(self, config: ModelConfig, *, max_tokens: int, room_scale: float = 8.0) -> None:
        super().__init__()
        dim = config.d_model
        self.box_clamp = config.box_clamp
        self.query_pos = nn.Parameter(torch.randn(max_tokens + 1, dim) * 0.02)
        self.scene_pos = SinePositionEmbedding(dim, scale=room_scale)
        self.layers = nn.ModuleList(
            DecoderLayer(dim, config.num_heads, ffn_mult=config.ffn_mult, dropout=config.dropout)
            for _ in range(config.local_layers)
        )
        self.norm = nn.LayerNorm(dim)
        self.head = GroundingHead(dim)

    def decode_local(
        self,
        queries: torch.Tensor,
        padding: torch.Tensor,
        scene: SceneTokens,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Decode ``(B, K, T + 1, C)`` queries; sentences never attend to each other."""

        bsz, k, t1, dim = queries.shape
        x = queries.reshape(bsz * k, t1, dim)
        pad = padding.reshape(bsz * k, t1)
        m = scene.features.shape[1]
        memory = scene.features.unsqueeze(1).expand(bsz, k, m, dim).reshape(bsz * k, m, dim)
        memory_pos = self.scene_pos(scene.positions).to(x.dtype)
        memory_pos = memory_pos.unsqueeze(1).expand(bsz, k, m, dim).reshape(bsz * k, m, dim)
        query_pos = self.query_pos[:t1].unsqueeze(0)

        cross = []
        for layer in self.layers:
            x, weights = layer(x, memory, query_pos=query_pos, memory_pos=memory_pos, self_padding_mask=pad)
            cross.append(weights["cross"])
        return self.norm(x).reshape(bsz, k, t1, dim), cross

    def forward(
        self,
        queries: torch.Tensor,
        padding: torch.Tensor,
        scene: SceneTokens,
        bounds: SceneBounds,
    ) -> LocalOutput:
        decoded, cross = self.decode_local(queries, padding, scene)
        clamp = None if self.training else self.box_clamp
        slot_boxes = self.head(decoded, bounds, clamp=clamp)
        return LocalOutput(
            boxes=slot_boxes[:, :, 0],
            features=decoded[:, :, 0],
            slot_boxes=slot_boxes,
            slot_features=decoded,
            cross_attention=cross,
        )


@dataclass
class ProposalState:
    box: torch.Tensor
    feature: torch.Tensor
    layer: int
    sentence: int


def init_proposals(output: LocalOutput, valid: torch.Tensor) -> list[list[ProposalState]]:
    """Layer-0 states for the valid sentences of each paragraph; padded slots are skipped."""

    states = []
    for b in range(valid.shape[0]):
        slots = torch.nonzero(valid[b], as_tuple=True)[0].tolist()
        states.append(
            [ProposalState(box=output.boxes[b, k], feature=output.features[b, k], layer=0, sentence=k) for k in slots]
        )
    return states
