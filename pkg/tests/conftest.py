from __future__ import annotations

from typing import Any, Callable, Sequence

import numpy as np
import pytest
import torch
from torch import nn
from torch.func import functional_call

from musubi.config import RunConfig, from_mapping
from musubi.world import GroundingDataset, PointCloudScene, build_dataset

TINY: dict[str, Any] = {
    "seed": 0,
    "world": {
        "min_objects": 3,
        "max_objects": 6,
        "num_points": 256,
        "max_sentences": 6,
        "train_scenes": 4,
        "eval_scenes": 3,
        "paragraphs_per_scene": 2,
        "train_k": 4,
        "eval_k": 4,
    },
    "model": {
        "d_model": 16,
        "text_dim": 16,
        "num_heads": 2,
        "num_scene_tokens": 32,
        "compact_size": 8,
        "scene_layers": 2,
        "text_layers": 1,
        "local_layers": 1,
        "global_layers": 2,
        "coattn_stages": 2,
        "sa_neighbors": 8,
        "crop_points": 8,
    },
    "train": {"steps": 3, "warmup_steps": 2, "log_every": 0},
    "eval": {"k_list": [4], "batch_size": 2, "paragraphs_per_scene": 2, "beam_width": 3, "beam_size": 4},
}


def tiny_mapping(**sections: dict[str, Any]) -> dict[str, Any]:
    """Deep copy of :data:`TINY` with ``sections`` merged in."""

    payload = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TINY.items()}
    for name, values in sections.items():
        payload[name] = {**payload.get(name, {}), **values}
    return payload


@pytest.fixture
def tiny_cfg(tmp_path) -> RunConfig:
    payload = tiny_mapping()
    payload["out"] = str(tmp_path / "run")
    return from_mapping(payload)


@pytest.fixture
def tiny_train(tiny_cfg: RunConfig) -> GroundingDataset:
    return build_dataset(tiny_cfg.world, tiny_cfg.seed, split="train")


@pytest.fixture
def tiny_eval(tiny_cfg: RunConfig) -> GroundingDataset:
    return build_dataset(tiny_cfg.world, tiny_cfg.seed, split="eval")


def manual_scene(centers: list[tuple[float, float]], labels: list[int], size: float = 0.5) -> PointCloudScene:
    """Scene of equal cubes resting on the floor at the given xy centers."""

    boxes = np.array([[x, y, size / 2, size, size, size] for x, y in centers], dtype=float)
    points = np.concatenate([np.tile(b[:3], (8, 1)) for b in boxes])
    points = np.column_stack([points, np.zeros((len(points), 3))])
    return PointCloudScene(
        points=points,
        boxes=boxes,
        labels=np.asarray(labels, dtype=np.int64),
        room=np.array([8.0, 8.0, 3.0]),
        scene_id="manual",
        seed=0,
    )


def parameter_gradcheck(
    module: nn.Module,
    names: Sequence[str],
    args: tuple,
    *,
    kwargs: dict[str, Any] | None = None,
    select: Callable[[Any], torch.Tensor] = lambda out: out,
) -> bool:
    """Float64 ``gradcheck`` of ``module(*args, **kwargs)`` with respect to the named parameters."""

    module = module.double()
    own = dict(module.named_parameters())
    start = tuple(own[name].detach().clone().requires_grad_(True) for name in names)

    def call(*values: torch.Tensor) -> torch.Tensor:
        return select(functional_call(module, dict(zip(names, values)), args, kwargs or {}))

    return torch.autograd.gradcheck(call, start)
