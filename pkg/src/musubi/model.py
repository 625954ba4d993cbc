"""The full grounding network and its training-stage gating."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .config import AblationConfig, ModelConfig
from .context import ContextOutput, ContextualQueryGenerator
from .encoders import SceneEncoder, SceneTokens, SentenceEncoder, erase_words
from .global_decoder import GlobalDecoder, GlobalOutput
from .local_decoder import LocalDecoder, LocalOutput, SceneBounds

logger = logging.getLogger(__name__)

STAGES = (1, 2, 3)


@dataclass
class ModelOutput:
    scene: SceneTokens
    context: ContextOutput
    local: LocalOutput
    refined: Optional[GlobalOutput]

    @property
    def final_boxes(self) -> torch.Tensor:
        return self.refined.final_boxes if self.refined is not None else self.local.boxes


class GroundingModel(nn.Module):
    """Scene/sentence encoders, contextual queries, local then global decoding.

    Stage 1 trains the local path with the contextual generator bypassed,
    stage 2 switches the generator on, stage 3 adds global refinement.
    """

    def __init__(
        self,
        config: ModelConfig,
        *,
        vocab_size: int,
        max_sentences: int,
        max_tokens: int,
        point_features: int,
        ablation: AblationConfig | None = None,
        room_scale: float = 8.0,
    ) -> None:
        super().__init__()
        self.config = config
        self.ablation = ablation or AblationConfig()
        self.scene_encoder = SceneEncoder(config, point_features=point_features, room_scale=room_scale)
        self.sentence_encoder = SentenceEncoder(config, vocab_size=vocab_size, max_tokens=max_tokens)
        self.context = ContextualQueryGenerator(
            config, max_sentences=max_sentences, max_tokens=max_tokens, enabled=self.ablation.cqg
        )
        self.local_decoder = LocalDecoder(config, max_tokens=max_tokens, room_scale=room_scale)
        self.global_decoder = GlobalDecoder(config, switches=self.ablation, room_scale=room_scale)
        self.stage = 3
        self.set_stage(3)

    def set_stage(self, stage: int) -> None:
        if stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {stage}")
        self.stage = stage
        self.context.enabled = self.ablation.cqg and stage >= 2

    @property
    def uses_global(self) -> bool:
        return self.stage == 3

    def forward(
        self,
        points: torch.Tensor,
        tokens: torch.Tensor,
        lengths: torch.Tensor,
        valid: torch.Tensor,
        *,
        crop_generator: Optional[torch.Generator] = None,
        erase_generator: Optional[torch.Generator] = None,
        noise_generator: Optional[torch.Generator] = None,
    ) -> ModelOutput:
        """Ground ``(B, K, T)`` paragraphs in ``(B, N, 3 + F)`` point clouds."""

        if crop_generator is None:
            crop_generator = torch.Generator(device=points.device).manual_seed(self.config.crop_seed)
        tokens = erase_words(
            tokens,
            lengths,
            self.config.erase_prob,
            training=self.training,
            generator=erase_generator,
        )
        xyz = points[..., :3]
        scene = self.scene_encoder(points)
        text, padding = self.sentence_encoder(tokens, lengths)
        context = self.context(text, padding, valid, scene.features)
        local = self.local_decoder(context.queries, padding, scene, SceneBounds.from_points(xyz))
        refined = None
        if self.uses_global:
            refined = self.global_decoder(
                local.boxes,
                local.features,
                valid,
                scene,
                xyz,
                generator=crop_generator,
                noise_generator=noise_generator,
            )
        return ModelOutput(scene=scene, context=context, local=local, refined=refined)


def build_model(
    config: ModelConfig,
    *,
    vocab_size: int,
    max_sentences: int,
    max_tokens: int,
    point_features: int,
    ablation: AblationConfig | None = None,
    room_scale: float = 8.0,
    seed: int = 0,
) -> GroundingModel:
    """Construct a model with parameters drawn from ``torch.manual_seed(seed)``."""

    torch.manual_seed(seed)
    model = GroundingModel(
        config,
        vocab_size=vocab_size,
        max_sentences=max_sentences,
        max_tokens=max_tokens,
        point_features=point_features,
        ablation=ablation,
        room_scale=room_scale,
    )
    n_params = sum(p.numel() for p in model.parameters())
    logger.debug("model built with %d parameters", n_params)
    return model
