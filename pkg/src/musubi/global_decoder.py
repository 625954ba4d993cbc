"""Proposal-guided global refinement.

Every layer lets the K initial proposals attend to each other and to the scene
tokens with spatially biased attention, then nudges each box by a predicted
offset. The attention logits receive

* an explicit bias from the distance/direction between box centers,
* an implicit bias from point crops inside the boxes,
* in the scene cross-attention only, a focused-region mask that hides scene
  tokens far from the proposals.

One scalar bias is shared by all heads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from .config import AblationConfig, ModelConfig
from .encoders import SceneTokens
from .geometry import (
    MaskDiagnostics,
    crop_points,
    focused_region,
    focused_region_mask,
    pairwise_explicit_features,
)
from .layers import FeedForward, MultiheadAttention, SinePositionEmbedding, masked_max_pool

logger = logging.getLogger(__name__)


def add_proposal_noise(
    boxes: torch.Tensor,
    sigma_center: float,
    sigma_log_size: float,
    *,
    training: bool = True,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Gaussian jitter on centers (meters) and log-sizes; identity outside training."""

    if not training or (sigma_center == 0.0 and sigma_log_size == 0.0):
        return boxes
    noise = torch.randn(boxes.shape, generator=generator, dtype=boxes.dtype, device=boxes.device)
    center = boxes[..., :3] + sigma_center * noise[..., :3]
    size = boxes[..., 3:] * torch.exp(sigma_log_size * noise[..., 3:])
    return torch.cat([center, size], dim=-1)


def point_key_boxes(positions: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Scene tokens as cubes of side ``epsilon`` centred on their positions."""

    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    return torch.cat([positions, torch.full_like(positions, epsilon)], dim=-1)


class ExplicitBias(nn.Module):
    """``A^E_ij = (q_i W^E) · f^E_ij`` with the 5-channel center-pair feature."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.w_e = nn.Linear(dim, 5, bias=False)

    def forward(
        self,
        queries: torch.Tensor,
        centers_q: torch.Tensor,
        centers_k: torch.Tensor,
        *,
        gate: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        g = self.w_e(queries) if gate is None else gate.to(queries.dtype).expand(*queries.shape[:-1], 5)
        feats = pairwise_explicit_features(centers_q.to(queries.dtype), centers_k.to(queries.dtype))
        return (g.unsqueeze(-2) * feats).sum(-1)


class PointSetEncoder(nn.Module):
    """Shared per-point MLP and masked max-pool; empty crops get a learned code."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(3, dim), nn.ReLU(), nn.Linear(dim, dim))
        self.empty = nn.Parameter(torch.zeros(dim))

    def forward(self, rel_points: torch.Tensor, occupied: torch.Tensor) -> torch.Tensor:
        return masked_max_pool(self.mlp(rel_points), occupied, self.empty)


class ImplicitBias(nn.Module):
    """``A^I_ij = (q_i W^I) · MLP([code_q_i ; code_k_j])``.

    With ``only`` given, the pair MLP runs just for the selected pairs and the
    rest of the matrix is zero.
    """

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.pair_mlp = nn.Sequential(nn.Linear(2 * dim, dim), nn.ReLU(), nn.Linear(dim, dim))
        self.w_i = nn.Linear(dim, dim, bias=False)

    def pair_features(self, codes_q: torch.Tensor, codes_k: torch.Tensor) -> torch.Tensor:
        nq, nk = codes_q.shape[-2], codes_k.shape[-2]
        left = codes_q.unsqueeze(-2).expand(*codes_q.shape[:-1], nk, codes_q.shape[-1])
        right = codes_k.unsqueeze(-3).expand(*codes_k.shape[:-2], nq, nk, codes_k.shape[-1])
        return self.pair_mlp(torch.cat([left, right], dim=-1))

    def forward(
        self,
        queries: torch.Tensor,
        codes_q: torch.Tensor,
        codes_k: torch.Tensor,
        *,
        only: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        g = self.w_i(queries)
        if only is None:
            return (g.unsqueeze(-2) * self.pair_features(codes_q, codes_k)).sum(-1)
        b_idx, q_idx, k_idx = torch.nonzero(only, as_tuple=True)
        pairs = self.pair_mlp(torch.cat([codes_q[b_idx, q_idx], codes_k[b_idx, k_idx]], dim=-1))
        values = (g[b_idx, q_idx] * pairs).sum(-1)
        bias = queries.new_zeros(only.shape)
        return bias.index_put((b_idx, q_idx, k_idx), values)


@dataclass
class LayerRecord:
    boxes: torch.Tensor
    features: torch.Tensor
    input_boxes: torch.Tensor
    self_attention: torch.Tensor
    cross_attention: torch.Tensor


@dataclass
class GlobalOutput:
    """Box trajectory of ``L + 1`` entries (initial proposals first) and per-layer records."""

    trajectory: list[torch.Tensor]
    layers: list[LayerRecord] = field(default_factory=list)

    @property
    def final_boxes(self) -> torch.Tensor:
        return self.trajectory[-1]


class GlobalDecoderLayer(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        dim = config.d_model
        self.location = nn.Linear(6, dim)
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiheadAttention(dim, config.num_heads, dropout=config.dropout)
        self.explicit_self = ExplicitBias(dim)
        self.implicit_self = ImplicitBias(dim)
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = MultiheadAttention(dim, config.num_heads, dropout=config.dropout)
        self.explicit_cross = ExplicitBias(dim)
        self.implicit_cross = ImplicitBias(dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, config.ffn_mult * dim, dropout=config.dropout)

    def pgsa(
        self,
        features: torch.Tensor,
        boxes: torch.Tensor,
        valid: torch.Tensor,
        *,
        codes_q: Optional[torch.Tensor],
        codes_k: Optional[torch.Tensor],
        switches: AblationConfig,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Self-attention among proposals with the explicit and implicit biases."""

        h = features + self.location(boxes)
        q = self.norm_self(h)
        centers = boxes[..., :3]
        bias = q.new_zeros(q.shape[0], q.shape[1], q.shape[1])
        if switches.explicit:
            bias = bias + self.explicit_self(q, centers, centers)
        if switches.implicit and codes_q is not None and codes_k is not None:
            bias = bias + self.implicit_self(q, codes_q, codes_k)
        attended, weights = self.self_attn(q, q, q, bias=bias, key_padding_mask=~valid)
        return h + attended, weights

    def pgca(
        self,
        features: torch.Tensor,
        boxes: torch.Tensor,
        scene: SceneTokens,
        scene_pos: torch.Tensor,
        *,
        codes_q: Optional[torch.Tensor],
        codes_key_points: Optional[torch.Tensor],
        focus_bias: Optional[torch.Tensor],
        switches: AblationConfig,
        implicit_focus_only: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Cross-attention from proposals to the scene tokens (point-as-box keys)."""

        q = self.norm_cross(features)
        keys = scene.features + scene_pos
        bias = q.new_zeros(q.shape[0], q.shape[1], keys.shape[1])
        if switches.explicit:
            bias = bias + self.explicit_cross(q, boxes[..., :3], scene.positions)
        if switches.implicit and codes_q is not None and codes_key_points is not None:
            only = None
            if implicit_focus_only and focus_bias is not None:
                only = (focus_bias == 0).expand_as(bias)
            bias = bias + self.implicit_cross(q, codes_q, codes_key_points, only=only)
        if focus_bias is not None:
            bias = bias + focus_bias
        attended, weights = self.cross_attn(q, keys, scene.features, bias=bias)
        return features + attended, weights

    def forward(
        self,
        features: torch.Tensor,
        boxes: torch.Tensor,
        valid: torch.Tensor,
        scene: SceneTokens,
        scene_pos: torch.Tensor,
        *,
        codes: dict[str, Optional[torch.Tensor]],
        focus_bias: Optional[torch.Tensor],
        switches: AblationConfig,
        implicit_focus_only: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h, self_w = self.pgsa(
            features,
            boxes,
            valid,
            codes_q=codes["query"],
            codes_k=codes["proposal_key"],
            switches=switches,
        )
        h, cross_w = self.pgca(
            h,
            boxes,
            scene,
            scene_pos,
            codes_q=codes["query"],
            codes_key_points=codes["point_key"],
            focus_bias=focus_bias,
            switches=switches,
            implicit_focus_only=implicit_focus_only,
        )
        h = h + self.ffn(self.norm_ffn(h))
        return h, self_w, cross_w


class OffsetHead(nn.Module):
    """Predicts ``(Δcenter, Δlog size)``; shared by all layers."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.ffn = FeedForward(dim, dim, out_dim=6)

    def forward(self, features: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        delta = self.ffn(features)
        center = boxes[..., :3] + delta[..., :3]
        size = boxes[..., 3:] * torch.exp(delta[..., 3:])
        return torch.cat([center, size], dim=-1)


class GlobalDecoder(nn.Module):
    def __init__(
        self,
        config: ModelConfig,
        *,
        switches: AblationConfig | None = None,
        room_scale: float = 8.0,
    ) -> None:
        super().__init__()
        dim = config.d_model
        self.config = config
        self.switches = switches or AblationConfig()
        self.tau = config.tau
        self.scene_pos = SinePositionEmbedding(dim, scale=room_scale)
        self.query_encoder = PointSetEncoder(dim)
        self.key_encoder = PointSetEncoder(dim)
        self.layers = nn.ModuleList(GlobalDecoderLayer(config) for _ in range(config.global_layers))
        self.offset = OffsetHead(dim)
        self.diagnostics = MaskDiagnostics()

    def _codes(
        self,
        xyz: torch.Tensor,
        boxes: torch.Tensor,
        scene: SceneTokens,
        region_center: torch.Tensor,
        region_radius: torch.Tensor,
        generator: Optional[torch.Generator],
    ) -> dict[str, Optional[torch.Tensor]]:
        if not self.switches.implicit:
            return {"query": None, "proposal_key": None, "point_key": None}
        rel, occupied = crop_points(xyz, boxes, self.config.crop_points, generator=generator)
        rel = rel.to(boxes.dtype)
        # Each point-as-box key holds just its own point, placed in the focused-region frame.
        key_boxes = point_key_boxes(scene.positions, self.config.epsilon)
        key_points = (key_boxes[..., :3] - region_center.unsqueeze(1)) / region_radius[:, None, None]
        key_occupied = torch.ones(key_points.shape[:2] + (1,), dtype=torch.bool, device=xyz.device)
        return {
            "query": self.query_encoder(rel, occupied),
            "proposal_key": self.key_encoder(rel, occupied),
            "point_key": self.key_encoder(key_points.unsqueeze(2).to(boxes.dtype), key_occupied),
        }

    def forward(
        self,
        boxes: torch.Tensor,
        features: torch.Tensor,
        valid: torch.Tensor,
        scene: SceneTokens,
        xyz: torch.Tensor,
        *,
        generator: Optional[torch.Generator] = None,
        noise_generator: Optional[torch.Generator] = None,
        tau: Optional[float] = None,
    ) -> GlobalOutput:
        """Refine ``(B, K, 6)`` proposals with their ``(B, K, C)`` features.

        ``xyz`` holds the raw scene points ``(B, N, 3)`` for the crops. Each
        layer consumes the previous box (detached, jittered during training).
        ``diagnostics`` counts the focused-region fallbacks of this call only.
        """

        self.diagnostics = MaskDiagnostics()
        tau = self.tau if tau is None else tau
        scene_pos = self.scene_pos(scene.positions).to(features.dtype)
        trajectory = [boxes]
        records: list[LayerRecord] = []
        current, h = boxes, features
        for layer in self.layers:
            box_in = add_proposal_noise(
                current.detach(),
                self.config.noise_center,
                self.config.noise_log_size,
                training=self.training,
                generator=noise_generator,
            )
            region = focused_region(box_in[..., :3], valid=valid, r_min=self.config.r_min)
            focus_bias = None
            if self.switches.focus:
                mask = focused_region_mask(region, tau, scene.positions, diagnostics=self.diagnostics)
                focus_bias = mask.to(h.dtype).unsqueeze(1)
            codes = self._codes(xyz, box_in, scene, region.center.detach(), region.radius.detach(), generator)
            h, self_w, cross_w = layer(
                h,
                box_in,
                valid,
                scene,
                scene_pos,
                codes=codes,
                focus_bias=focus_bias,
                switches=self.switches,
                implicit_focus_only=self.config.implicit_focus_only,
            )
            current = self.offset(h, box_in)
            trajectory.append(current)
            records.append(
                LayerRecord(
                    boxes=current,
                    features=h,
                    input_boxes=box_in,
                    self_attention=self_w,
                    cross_attention=cross_w,
                )
            )
        return GlobalOutput(trajectory=trajectory, layers=records)
