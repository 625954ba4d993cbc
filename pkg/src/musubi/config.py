"""Run configuration: frozen dataclass sections loaded from YAML.

Precedence is dataclass defaults < config file < ``MUSUBI__SECTION__KEY``
environment variables < explicit overrides (CLI flags).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

ENV_PREFIX = "MUSUBI__"

DEFAULT_CLASSES = (
    "chair",
    "table",
    "sofa",
    "bed",
    "cabinet",
    "desk",
    "bookshelf",
    "lamp",
    "plant",
    "bin",
)


class ConfigError(ValueError):
    """Config file or override does not match the schema."""


@dataclass(frozen=True)
class WorldConfig:
    """Synthetic scenes and paragraph sampling."""

    room_extent: tuple[float, float, float] = (8.0, 8.0, 3.0)
    min_objects: int = 4
    max_objects: int = 16
    class_names: tuple[str, ...] = DEFAULT_CLASSES
    num_points: int = 4096
    num_features: int = 3
    min_points_per_object: int = 8
    floor_fraction: float = 0.2
    max_retries: int = 200
    placement_gap: float = 0.1
    max_sentences: int = 12
    max_tokens: int = 16
    train_scenes: int = 256
    eval_scenes: int = 64
    paragraphs_per_scene: int = 4
    train_k: int = 12
    eval_k: int = 12
    # None: half the larger horizontal room extent
    sigma_order: Optional[float] = None
    anaphora_prob: float = 0.5

    @property
    def order_scale(self) -> float:
        if self.sigma_order is not None:
            return float(self.sigma_order)
        return 0.5 * max(self.room_extent[0], self.room_extent[1])


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    text_dim: int = 64
    num_heads: int = 4
    num_scene_tokens: int = 256
    compact_size: int = 64
    scene_layers: int = 4
    masked_scene_layers: int = 1
    scene_mask_radius: float = 2.0
    text_layers: int = 3
    local_layers: int = 4
    global_layers: int = 4
    coattn_stages: int = 3
    sa_radius: float = 0.4
    sa_neighbors: int = 16
    ffn_mult: int = 2
    dropout: float = 0.0
    tau: float = 2.0
    epsilon: float = 0.01
    r_min: float = 0.5
    crop_points: int = 32
    implicit_focus_only: bool = False
    noise_center: float = 0.05
    noise_log_size: float = 0.05
    erase_prob: float = 0.15
    box_clamp: float = 1.2
    crop_seed: int = 0


@dataclass(frozen=True)
class LossWeights:
    iou: float = 1.0
    l1: float = 1.0
    cent: float = 1.0
    size: float = 1.0
    refine: float = 1.0
    init: float = 0.05


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    batch_size: int = 2
    steps: int = 3000
    rotation_augment: bool = True
    log_every: int = 50
    grad_clip: float = 0.0
    # 0 keeps only the end-of-stage checkpoint
    checkpoint_every: int = 500


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = (0.25, 0.5)
    k_list: tuple[int, ...] = (12,)
    beam_width: int = 12
    beam_size: int = 12
    batch_size: int = 8
    paragraphs_per_scene: int = 4


@dataclass(frozen=True)
class AblationConfig:
    """Component switches; ``True`` keeps the component."""

    cqg: bool = True
    explicit: bool = True
    implicit: bool = True
    focus: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out: str = "outputs/run"
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        return from_mapping(merge_dotted(self.to_dict(), overrides))


_SECTIONS: dict[str, type] = {
    "world": WorldConfig,
    "model": ModelConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}
_TOP_LEVEL = {"seed", "out"}


def config_hash(payload: Mapping[str, Any]) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _coerce(value: Any, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)

    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args)))

    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def _build_section(cls: type, payload: Any, name: str) -> Any:
    if payload is None:
        return cls()
    if not isinstance(payload, Mapping):
        raise ConfigError(f"{name}: expected a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown config key: {name}.{unknown[0]}")
    kwargs = {k: _coerce(v, hints[k], f"{name}.{k}") for k, v in payload.items()}
    return cls(**kwargs)


def from_mapping(payload: Mapping[str, Any]) -> RunConfig:
    """Validate a nested mapping against the schema and build a :class:`RunConfig`."""

    unknown = sorted(set(payload) - set(_SECTIONS) - _TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    if payload.get("seed") is None:
        raise ConfigError("missing required config key: seed")

    sections = {name: _build_section(cls, payload.get(name), name) for name, cls in _SECTIONS.items()}
    seed = _coerce(payload["seed"], int, "seed")
    out = _coerce(payload.get("out", "outputs/run"), str, "out")
    cfg = RunConfig(seed=seed, out=out, **sections)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    w, m = cfg.world, cfg.model
    if w.min_objects < 1 or w.max_objects < w.min_objects:
        raise ConfigError("world.min_objects/max_objects must satisfy 1 <= min <= max")
    if w.num_points < w.min_points_per_object * w.max_objects + 1:
        raise ConfigError("world.num_points too small for min_points_per_object * max_objects")
    if m.num_scene_tokens > w.num_points:
        raise ConfigError("model.num_scene_tokens must not exceed world.num_points")
    if m.d_model % m.num_heads != 0:
        raise ConfigError("model.d_model must be divisible by model.num_heads")
    if not 0.0 <= m.erase_prob < 1.0:
        raise ConfigError("model.erase_prob must lie in [0, 1)")
    if not 2 <= w.train_k <= w.max_sentences or not 2 <= w.eval_k <= w.max_sentences:
        raise ConfigError("world.train_k/eval_k must lie in [2, max_sentences]")
    if cfg.train.checkpoint_every < 0:
        raise ConfigError("train.checkpoint_every must be >= 0")
    for k in cfg.eval.k_list:
        if not 2 <= k <= w.max_sentences:
            raise ConfigError(f"eval.k_list entry {k} must lie in [2, {w.max_sentences}]")


def merge_dotted(base: Mapping[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Apply ``{"section.key": value}`` overrides to a nested mapping."""

    merged: dict[str, Any] = {k: (dict(v) if isinstance(v, Mapping) else v) for k, v in base.items()}
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if len(parts) == 1:
            merged[parts[0]] = value
        elif len(parts) == 2:
            section = merged.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError(f"{parts[0]}: expected a mapping")
            section[parts[1]] = value
        else:
            raise ConfigError(f"override key too deep: {dotted}")
    return merged


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    out: dict[str, Any] = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = ".".join(part.lower() for part in name[len(ENV_PREFIX):].split("__"))
        out[dotted] = yaml.safe_load(raw)
    return out


def load_config_file(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    payload = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    if not isinstance(payload, Mapping):
        raise ConfigError(f"{p}: top level must be a mapping")
    return dict(payload)


def load_run_config(
    path: str | Path | None = None,
    *,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    payload = load_config_file(path) if path is not None else {}
    payload = merge_dotted(payload, env_overrides(environ))
    payload = merge_dotted(payload, {k: v for k, v in (overrides or {}).items() if v is not None})
    return from_mapping(payload)


def save_run_config(cfg: RunConfig, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    payload = json.loads(json.dumps(cfg.to_dict(), default=list))
    p.write_text(yaml.safe_dump(payload, sort_keys=False), encoding="utf-8")
    return p


def ablated(cfg: RunConfig, *, cqg: bool = False, ae: bool = False, ai: bool = False, af: bool = False) -> RunConfig:
    """Copy of ``cfg`` with the named components switched off."""

    ab = cfg.ablation
    return replace(
        cfg,
        ablation=AblationConfig(
            cqg=ab.cqg and not cqg,
            explicit=ab.explicit and not ae,
            implicit=ab.implicit and not ai,
            focus=ab.focus and not af,
        ),
    )


def section_from_mapping(cls: type, payload: Any, name: str) -> Any:
    """Build one config section (e.g. a :class:`WorldConfig` echoed in a file header)."""

    return _build_section(cls, payload, name)


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="YAML run config")
    parser.add_argument("--seed", type=int, default=None, help="Overrides the config seed")
    parser.add_argument("--out", default=None, help="Output directory (overrides config 'out')")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value (YAML scalar); repeatable",
    )
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")


def config_from_args(args: argparse.Namespace, environ: Mapping[str, str] | None = None) -> RunConfig:
    overrides: dict[str, Any] = {}
    for item in args.overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = yaml.safe_load(raw)
    overrides["seed"] = args.seed
    overrides["out"] = args.out
    return load_run_config(args.config, overrides=overrides, environ=environ)
