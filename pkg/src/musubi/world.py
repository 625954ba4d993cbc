"""Synthetic desk-scale world: scenes, template sentences and dense paragraphs.

A scene is a room of axis-aligned furniture boxes resting on the floor, seen as
a point cloud sampled on the box surfaces and the floor. A dense sample is a
paragraph of up to ``max_sentences`` referring sentences describing a focus
object and its nearest neighbours, padded with zero rows.
"""

from __future__ import annotations

import argparse
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .config import RunConfig, WorldConfig, add_config_arguments, config_from_args, section_from_mapping
from .geometry import Box3D, k_nearest_objects
from .io import DATASET_MAGIC, read_container, write_container
from .vocab import PAD_ID, Vocabulary, build_vocabulary, save_vocabulary

logger = logging.getLogger(__name__)

# (sx, sy, sz) ranges in meters; sx/sy are swapped at random per object.
CLASS_SIZE_RANGES: dict[str, tuple[tuple[float, float], tuple[float, float], tuple[float, float]]] = {
    "chair": ((0.45, 0.6), (0.45, 0.6), (0.8, 1.0)),
    "table": ((1.0, 1.6), (0.7, 1.0), (0.7, 0.8)),
    "sofa": ((1.6, 2.2), (0.8, 1.0), (0.7, 0.9)),
    "bed": ((1.4, 2.0), (1.9, 2.1), (0.4, 0.6)),
    "cabinet": ((0.6, 1.0), (0.4, 0.6), (0.8, 1.8)),
    "desk": ((1.0, 1.4), (0.6, 0.8), (0.7, 0.8)),
    "bookshelf": ((0.8, 1.2), (0.3, 0.4), (1.5, 2.0)),
    "lamp": ((0.3, 0.4), (0.3, 0.4), (1.2, 1.7)),
    "plant": ((0.3, 0.6), (0.3, 0.6), (0.4, 1.2)),
    "bin": ((0.25, 0.4), (0.25, 0.4), (0.3, 0.5)),
}
DEFAULT_SIZE_RANGE = ((0.4, 1.0), (0.4, 1.0), (0.4, 1.2))

_PALETTE = np.array(
    [
        [0.12, 0.47, 0.71],
        [1.00, 0.50, 0.05],
        [0.17, 0.63, 0.17],
        [0.84, 0.15, 0.16],
        [0.58, 0.40, 0.74],
        [0.55, 0.34, 0.29],
        [0.89, 0.47, 0.76],
        [0.74, 0.74, 0.13],
        [0.09, 0.75, 0.81],
        [0.30, 0.30, 0.30],
    ]
)
FLOOR_COLOR = np.array([0.6, 0.6, 0.6])
COLOR_NOISE = 0.03
SURFACE_SHRINK = 0.999

# Relation vocabulary. "_it" variants use the previous sentence's target as anchor.
RELATIONS = (
    "unique",
    "closest",
    "farthest",
    "closest_it",
    "farthest_it",
    "next_to",
    "next_to_it",
    "left_of",
    "right_of",
    "front_of",
    "back_of",
    "leftmost",
    "rightmost",
    "frontmost",
    "backmost",
    "largest",
    "smallest",
    "tallest",
    "shortest",
    "room_center",
)
RELATION_IDS = {name: i for i, name in enumerate(RELATIONS)}
FALLBACK_RELATION = "room_center"

_ANCHORED = ("closest", "farthest", "next_to", "left_of", "right_of", "front_of", "back_of")
_ANAPHORIC = {"closest_it": "closest", "farthest_it": "farthest", "next_to_it": "next_to"}
_SUPERLATIVES = (
    "leftmost",
    "rightmost",
    "frontmost",
    "backmost",
    "largest",
    "smallest",
    "tallest",
    "shortest",
)

DISTANCE_MARGIN = 0.1
DIRECTION_MARGIN = 0.1
SIZE_MARGIN = 0.05
NEXT_TO_RADIUS = 1.5
NEXT_TO_CLEARANCE = 2.0

_TEMPLATES = {
    "unique": "the {cls} .",
    "closest": "the {cls} closest to the {anchor} .",
    "farthest": "the {cls} farthest from the {anchor} .",
    "closest_it": "the {cls} closest to it .",
    "farthest_it": "the {cls} farthest from it .",
    "next_to": "the {cls} next to the {anchor} .",
    "next_to_it": "the {cls} next to it .",
    "left_of": "the {cls} to the left of the {anchor} .",
    "right_of": "the {cls} to the right of the {anchor} .",
    "front_of": "the {cls} to the front of the {anchor} .",
    "back_of": "the {cls} to the back of the {anchor} .",
    "room_center": "the {cls} closest to the room center .",
}


class SceneGenerationError(RuntimeError):
    """Object placement failed within the retry budget."""

    def __init__(self, message: str, *, seed: int) -> None:
        super().__init__(f"{message} (seed={seed})")
        self.seed = seed


@dataclass(eq=False)
class PointCloudScene:
    """Points ``(N, 3 + F)``, boxes ``(O, 6)`` and class ids ``(O,)``."""

    points: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray
    room: np.ndarray
    scene_id: str
    seed: int

    @property
    def num_objects(self) -> int:
        return int(len(self.labels))

    @property
    def centers(self) -> np.ndarray:
        return self.boxes[:, :3]

    @property
    def objects(self) -> list[tuple[Box3D, int]]:
        return [(Box3D.from_array(b), int(c)) for b, c in zip(self.boxes, self.labels)]

    def class_count(self, label: int) -> int:
        return int(np.sum(self.labels == label))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PointCloudScene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.seed == other.seed
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.room, other.room)
        )


@dataclass(frozen=True)
class Sentence:
    tokens: np.ndarray
    target: int
    text: str
    relation: str
    anchor: Optional[int] = None
    fallback: bool = False


@dataclass(eq=False)
class DenseSample:
    """One paragraph; rows past ``k`` are padding (zero tokens, target -1, invalid)."""

    scene_index: int
    focus: int
    tokens: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray
    valid: np.ndarray
    relations: np.ndarray
    anchors: np.ndarray
    fallback: np.ndarray

    @property
    def k(self) -> int:
        return int(self.valid.sum())

    def texts(self, vocab: Vocabulary) -> list[str]:
        return [vocab.decode(self.tokens[i]) for i in range(self.k)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DenseSample):
            return NotImplemented
        return (
            self.scene_index == other.scene_index
            and self.focus == other.focus
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in ("tokens", "lengths", "targets", "valid", "relations", "anchors", "fallback")
            )
        )


@dataclass
class GroundingDataset:
    config: WorldConfig
    vocab: Vocabulary
    seed: int
    split: str
    scenes: list[PointCloudScene] = field(default_factory=list)
    samples: list[DenseSample] = field(default_factory=list)


# --------------------------------------------------------------------------
# scenes


def _footprints_clear(candidate: np.ndarray, placed: list[np.ndarray], gap: float) -> bool:
    for other in placed:
        sep = 0.5 * (candidate[3:5] + other[3:5]) + gap
        if np.all(np.abs(candidate[:2] - other[:2]) < sep):
            return False
    return True


def _sample_box(
    rng: np.random.Generator,
    class_name: str,
    room: np.ndarray,
    gap: float,
) -> np.ndarray | None:
    ranges = CLASS_SIZE_RANGES.get(class_name, DEFAULT_SIZE_RANGE)
    size = np.array([rng.uniform(lo, hi) for lo, hi in ranges])
    if rng.random() < 0.5:
        size[[0, 1]] = size[[1, 0]]
    lo = gap + 0.5 * size[:2]
    hi = room[:2] - gap - 0.5 * size[:2]
    if np.any(hi <= lo) or size[2] > room[2]:
        return None
    center_xy = rng.uniform(lo, hi)
    return np.array([center_xy[0], center_xy[1], 0.5 * size[2], *size])


def _surface_points(rng: np.random.Generator, box: np.ndarray, count: int) -> np.ndarray:
    sx, sy, sz = box[3:]
    face_area = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    faces = rng.choice(6, size=count, p=face_area / face_area.sum())
    unit = rng.random((count, 3)) - 0.5
    axis = faces // 2
    unit[np.arange(count), axis] = np.where(faces % 2 == 0, -0.5, 0.5)
    return box[:3] + unit * box[3:] * SURFACE_SHRINK


def generate_scene(seed: int, config: WorldConfig) -> PointCloudScene:
    """Random room of non-overlapping boxes on the floor, sampled as a point cloud.

    Objects that cannot be placed within ``config.max_retries`` attempts are
    dropped once ``config.min_objects`` are in the room; before that a
    :class:`SceneGenerationError` is raised.
    """

    if not 0 <= config.num_features <= 3:
        raise ValueError("world.num_features must lie in [0, 3] (RGB channels)")
    rng = np.random.default_rng(seed)
    room = np.asarray(config.room_extent, dtype=float)
    n_classes = len(config.class_names)
    n_target = int(rng.integers(config.min_objects, config.max_objects + 1))

    boxes: list[np.ndarray] = []
    labels: list[int] = []
    for _ in range(n_target):
        label = int(rng.integers(n_classes))
        placed = None
        for _attempt in range(config.max_retries):
            box = _sample_box(rng, config.class_names[label], room, config.placement_gap)
            if box is not None and _footprints_clear(box, boxes, config.placement_gap):
                placed = box
                break
        if placed is None:
            if len(boxes) >= config.min_objects:
                logger.debug("seed %d: room full after %d objects", seed, len(boxes))
                break
            raise SceneGenerationError(
                f"could not place object {len(boxes) + 1} of at least {config.min_objects} "
                f"after {config.max_retries} retries",
                seed=seed,
            )
        boxes.append(placed)
        labels.append(label)

    box_arr = np.stack(boxes)
    n_objects = len(box_arr)
    per_object_min = config.min_points_per_object
    n_floor = min(int(round(config.floor_fraction * config.num_points)), config.num_points - per_object_min * n_objects)
    n_floor = max(n_floor, 0)
    extra = config.num_points - n_floor - per_object_min * n_objects
    s = box_arr[:, 3:]
    area = 2.0 * (s[:, 0] * s[:, 1] + s[:, 0] * s[:, 2] + s[:, 1] * s[:, 2])
    counts = per_object_min + rng.multinomial(extra, area / area.sum())

    xyz_parts = []
    rgb_parts = []
    for i in range(n_objects):
        xyz_parts.append(_surface_points(rng, box_arr[i], int(counts[i])))
        base = _PALETTE[labels[i] % len(_PALETTE)]
        rgb_parts.append(np.repeat(base[None, :], counts[i], axis=0))
    floor_xy = rng.random((n_floor, 2)) * room[:2]
    xyz_parts.append(np.column_stack([floor_xy, np.zeros(n_floor)]))
    rgb_parts.append(np.repeat(FLOOR_COLOR[None, :], n_floor, axis=0))

    xyz = np.concatenate(xyz_parts)
    rgb = np.concatenate(rgb_parts)
    rgb = np.clip(rgb + rng.normal(0.0, COLOR_NOISE, size=rgb.shape), 0.0, 1.0)
    order = rng.permutation(len(xyz))
    points = np.column_stack([xyz, rgb[:, : config.num_features]])[order]

    return PointCloudScene(
        points=points,
        boxes=box_arr,
        labels=np.asarray(labels, dtype=np.int64),
        room=room.copy(),
        scene_id=f"scene-{seed}",
        seed=int(seed),
    )


# --------------------------------------------------------------------------
# sentences


def _unique_best(values: np.ndarray, candidates: np.ndarray, *, largest: bool, margin: float) -> int | None:
    """Candidate with the extreme value if it wins by at least ``margin``."""

    if len(candidates) == 0:
        return None
    v = values[candidates]
    order = np.argsort(-v if largest else v, kind="stable")
    if len(order) > 1 and abs(v[order[0]] - v[order[1]]) < margin:
        return None
    return int(candidates[order[0]])


def _referent(scene: PointCloudScene, relation: str, label: int, anchor: int | None) -> int | None:
    """Object of class ``label`` the phrase picks out, or ``None`` when ambiguous."""

    candidates = np.flatnonzero(scene.labels == label)
    if anchor is not None:
        candidates = candidates[candidates != anchor]
    if len(candidates) == 0:
        return None
    relation = _ANAPHORIC.get(relation, relation)
    centers = scene.centers

    if relation == "unique":
        return int(candidates[0]) if len(candidates) == 1 else None

    if relation in ("closest", "farthest"):
        dist = np.linalg.norm(centers - centers[anchor], axis=1)
        return _unique_best(dist, candidates, largest=relation == "farthest", margin=DISTANCE_MARGIN)

    if relation == "room_center":
        dist = np.linalg.norm(centers[:, :2] - 0.5 * scene.room[:2], axis=1)
        return _unique_best(dist, candidates, largest=False, margin=0.0)

    if relation == "next_to":
        tree = cKDTree(centers[candidates, :2])
        near = tree.query_ball_point(centers[anchor, :2], NEXT_TO_RADIUS)
        clear = tree.query_ball_point(centers[anchor, :2], NEXT_TO_CLEARANCE)
        if len(near) == 1 and len(clear) == 1:
            return int(candidates[near[0]])
        return None

    if relation in ("left_of", "right_of", "front_of", "back_of"):
        axis = 0 if relation in ("left_of", "right_of") else 1
        sign = -1.0 if relation in ("left_of", "front_of") else 1.0
        offset = sign * (centers[candidates, axis] - centers[anchor, axis])
        if np.any(np.abs(offset) <= DIRECTION_MARGIN):
            return None
        hits = candidates[offset > DIRECTION_MARGIN]
        return int(hits[0]) if len(hits) == 1 else None

    if relation in ("leftmost", "rightmost", "frontmost", "backmost"):
        axis = 0 if relation in ("leftmost", "rightmost") else 1
        largest = relation in ("rightmost", "backmost")
        return _unique_best(centers[:, axis], candidates, largest=largest, margin=DIRECTION_MARGIN)

    if relation in ("largest", "smallest"):
        log_volume = np.log(np.prod(scene.boxes[:, 3:], axis=1))
        return _unique_best(log_volume, candidates, largest=relation == "largest", margin=SIZE_MARGIN)

    if relation in ("tallest", "shortest"):
        return _unique_best(scene.boxes[:, 5], candidates, largest=relation == "tallest", margin=SIZE_MARGIN)

    raise ValueError(f"unknown relation {relation!r}")


def relation_holds(scene: PointCloudScene, target: int, relation: str, anchor: int | None = None) -> bool:
    """Whether ``relation`` (with ``anchor``) singles out ``target`` among its class."""

    return _referent(scene, relation, int(scene.labels[target]), anchor) == target


def valid_relations(
    scene: PointCloudScene,
    target: int,
    previous: int | None = None,
) -> list[tuple[str, int | None]]:
    """Every (relation, anchor) pair that identifies ``target`` without ambiguity.

    Named anchors must be the only object of their class, and of a different
    class than the target. Anaphoric relations anchor on ``previous``.
    """

    if not 0 <= target < scene.num_objects:
        raise ValueError(f"target {target} out of range for {scene.num_objects} objects")
    label = int(scene.labels[target])
    if scene.class_count(label) == 1:
        return [("unique", None)]

    options: list[tuple[str, int | None]] = []
    for relation in _SUPERLATIVES:
        if relation_holds(scene, target, relation):
            options.append((relation, None))

    anchors = [
        a
        for a in range(scene.num_objects)
        if a != target and scene.labels[a] != label and scene.class_count(int(scene.labels[a])) == 1
    ]
    for relation in _ANCHORED:
        for anchor in anchors:
            if relation_holds(scene, target, relation, anchor):
                options.append((relation, anchor))

    if previous is not None and previous != target:
        for relation in _ANAPHORIC:
            if relation_holds(scene, target, relation, previous):
                options.append((relation, previous))
    return options


def render_sentence(relation: str, class_name: str, anchor_name: str | None = None) -> str:
    if relation in _SUPERLATIVES:
        return f"the {relation} {class_name} ."
    return _TEMPLATES[relation].format(cls=class_name, anchor=anchor_name)


def generate_sentence(
    scene: PointCloudScene,
    target: int,
    rng: np.random.Generator,
    *,
    vocab: Vocabulary,
    class_names: Sequence[str],
    previous: int | None = None,
    anaphora_prob: float = 0.5,
) -> Sentence:
    """Template sentence for ``target``; falls back to the room-center phrase when nothing disambiguates."""

    options = valid_relations(scene, target, previous)
    fallback = not options
    if fallback:
        relation, anchor = FALLBACK_RELATION, None
        logger.debug("%s: no disambiguating template for object %d", scene.scene_id, target)
    else:
        anaphoric = [o for o in options if o[0] in _ANAPHORIC]
        plain = [o for o in options if o[0] not in _ANAPHORIC]
        pool = anaphoric if anaphoric and (not plain or rng.random() < anaphora_prob) else plain
        relation, anchor = pool[int(rng.integers(len(pool)))]

    cls = class_names[int(scene.labels[target])]
    anchor_name = class_names[int(scene.labels[anchor])] if anchor is not None else None
    text = render_sentence(relation, cls, anchor_name)
    return Sentence(
        tokens=vocab.encode(text),
        target=int(target),
        text=text,
        relation=relation,
        anchor=anchor,
        fallback=fallback,
    )


# --------------------------------------------------------------------------
# paragraphs


def proximity_order(distances: np.ndarray, rng: np.random.Generator, scale: float) -> np.ndarray:
    """Successive draws without replacement, weight ``exp(-d / scale)``."""

    remaining = list(range(len(distances)))
    weights = np.exp(-np.asarray(distances, dtype=float) / scale)
    order = []
    while remaining:
        w = weights[remaining]
        pick = int(rng.choice(len(remaining), p=w / w.sum()))
        order.append(remaining.pop(pick))
    return np.asarray(order, dtype=np.int64)


def sample_paragraph(
    scene: PointCloudScene,
    k: int,
    rng: np.random.Generator,
    *,
    vocab: Vocabulary,
    config: WorldConfig,
    scene_index: int = 0,
) -> DenseSample:
    """Paragraph about a random focus object and its ``k - 1`` nearest neighbours."""

    if not 2 <= k <= config.max_sentences:
        raise ValueError(f"k={k} must lie in [2, {config.max_sentences}]")
    k_eff = min(k, scene.num_objects)
    if k_eff < 2:
        raise ValueError(f"{scene.scene_id}: paragraph needs at least 2 objects, scene has {scene.num_objects}")

    focus = int(rng.integers(scene.num_objects))
    members = np.array([focus, *k_nearest_objects(scene.centers, focus, k_eff - 1)], dtype=np.int64)
    distances = np.linalg.norm(scene.centers[members] - scene.centers[focus], axis=1)
    ordered = members[proximity_order(distances, rng, config.order_scale)]

    k_max, t_max = config.max_sentences, config.max_tokens
    tokens = np.full((k_max, t_max), PAD_ID, dtype=np.int64)
    lengths = np.zeros(k_max, dtype=np.int64)
    targets = np.full(k_max, -1, dtype=np.int64)
    relations = np.full(k_max, -1, dtype=np.int64)
    anchors = np.full(k_max, -1, dtype=np.int64)
    fallback = np.zeros(k_max, dtype=bool)
    valid = np.zeros(k_max, dtype=bool)

    previous = None
    for slot, target in enumerate(ordered):
        sentence = generate_sentence(
            scene,
            int(target),
            rng,
            vocab=vocab,
            class_names=config.class_names,
            previous=previous,
            anaphora_prob=config.anaphora_prob,
        )
        n_tok = len(sentence.tokens)
        if n_tok > t_max:
            raise ValueError(f"sentence {sentence.text!r} exceeds max_tokens={t_max}")
        tokens[slot, :n_tok] = sentence.tokens
        lengths[slot] = n_tok
        targets[slot] = sentence.target
        relations[slot] = RELATION_IDS[sentence.relation]
        anchors[slot] = -1 if sentence.anchor is None else sentence.anchor
        fallback[slot] = sentence.fallback
        valid[slot] = True
        previous = int(target)

    return DenseSample(
        scene_index=int(scene_index),
        focus=focus,
        tokens=tokens,
        lengths=lengths,
        targets=targets,
        valid=valid,
        relations=relations,
        anchors=anchors,
        fallback=fallback,
    )


def build_paragraphs(
    scenes: Sequence[PointCloudScene],
    k: int,
    rng: np.random.Generator,
    *,
    vocab: Vocabulary,
    config: WorldConfig,
    paragraphs_per_scene: int,
) -> list[DenseSample]:
    samples = []
    for index, scene in enumerate(scenes):
        if scene.num_objects < 2:
            logger.warning("%s has %d object(s); no paragraphs drawn", scene.scene_id, scene.num_objects)
            continue
        for _ in range(paragraphs_per_scene):
            samples.append(sample_paragraph(scene, k, rng, vocab=vocab, config=config, scene_index=index))
    return samples


_SPLIT_CODES = {"train": 0, "eval": 1}


def build_dataset(config: WorldConfig, seed: int, *, split: str = "train") -> GroundingDataset:
    """All scenes and paragraphs of one split, a pure function of ``(config, seed, split)``."""

    if split not in _SPLIT_CODES:
        raise ValueError(f"split must be one of {sorted(_SPLIT_CODES)}, got {split!r}")
    scene_ss, paragraph_ss = np.random.SeedSequence([seed, _SPLIT_CODES[split]]).spawn(2)
    num_scenes = config.train_scenes if split == "train" else config.eval_scenes
    k = config.train_k if split == "train" else config.eval_k
    scene_seeds = np.random.default_rng(scene_ss).integers(0, 2**31 - 1, size=num_scenes)
    scenes = [generate_scene(int(s), config) for s in scene_seeds]
    vocab = build_vocabulary(config.class_names)
    samples = build_paragraphs(
        scenes,
        k,
        np.random.default_rng(paragraph_ss),
        vocab=vocab,
        config=config,
        paragraphs_per_scene=config.paragraphs_per_scene,
    )
    return GroundingDataset(config=config, vocab=vocab, seed=seed, split=split, scenes=scenes, samples=samples)


# --------------------------------------------------------------------------
# split tags


def split_tags(dataset: GroundingDataset) -> list[list[str]]:
    """Per sample, ``"unique"`` or ``"multiple"`` for every valid sentence."""

    tags = []
    for sample in dataset.samples:
        scene = dataset.scenes[sample.scene_index]
        row = []
        for target in sample.targets[: sample.k]:
            row.append("unique" if scene.class_count(int(scene.labels[target])) == 1 else "multiple")
        tags.append(row)
    return tags


def difficulty_tags(dataset: GroundingDataset) -> list[list[str]]:
    """Per sample, ``"hard"`` when the target has more than one same-class distractor."""

    tags = []
    for sample in dataset.samples:
        scene = dataset.scenes[sample.scene_index]
        row = []
        for target in sample.targets[: sample.k]:
            distractors = scene.class_count(int(scene.labels[target])) - 1
            row.append("hard" if distractors > 1 else "easy")
        tags.append(row)
    return tags


# --------------------------------------------------------------------------
# persistence


_SAMPLE_FIELDS = ("tokens", "lengths", "targets", "valid", "relations", "anchors", "fallback")


def save_dataset(dataset: GroundingDataset, path: str | Path) -> Path:
    scenes = dataset.scenes
    point_offsets = np.cumsum([0] + [len(s.points) for s in scenes])
    box_offsets = np.cumsum([0] + [len(s.boxes) for s in scenes])
    n_feat = dataset.config.num_features
    arrays: dict[str, np.ndarray] = {
        "scene/points": np.concatenate([s.points for s in scenes]) if scenes else np.zeros((0, 3 + n_feat)),
        "scene/point_offsets": point_offsets,
        "scene/boxes": np.concatenate([s.boxes for s in scenes]) if scenes else np.zeros((0, 6)),
        "scene/labels": np.concatenate([s.labels for s in scenes]) if scenes else np.zeros(0, dtype=np.int64),
        "scene/box_offsets": box_offsets,
        "scene/rooms": np.asarray([s.room for s in scenes], dtype=float).reshape(-1, 3),
        "scene/seeds": np.asarray([s.seed for s in scenes], dtype=np.int64),
        "sample/scene_index": np.asarray([s.scene_index for s in dataset.samples], dtype=np.int64),
        "sample/focus": np.asarray([s.focus for s in dataset.samples], dtype=np.int64),
    }
    k_max, t_max = dataset.config.max_sentences, dataset.config.max_tokens
    empty_shapes = {"tokens": (0, k_max, t_max)}
    for name in _SAMPLE_FIELDS:
        values = [getattr(s, name) for s in dataset.samples]
        arrays[f"sample/{name}"] = np.stack(values) if values else np.zeros(empty_shapes.get(name, (0, k_max)))
    arrays["sample/valid"] = arrays["sample/valid"].astype(bool)
    arrays["sample/fallback"] = arrays["sample/fallback"].astype(bool)
    for name in ("tokens", "lengths", "targets", "relations", "anchors"):
        arrays[f"sample/{name}"] = arrays[f"sample/{name}"].astype(np.int64)

    header = {
        "kind": "dataset",
        "split": dataset.split,
        "seed": int(dataset.seed),
        "config": asdict(dataset.config),
        "vocab": list(dataset.vocab.tokens),
        "scene_ids": [s.scene_id for s in scenes],
        "relations": list(RELATIONS),
    }
    return write_container(path, DATASET_MAGIC, header, arrays)


def load_dataset(path: str | Path) -> GroundingDataset:
    header, arrays = read_container(path, DATASET_MAGIC)
    config = section_from_mapping(WorldConfig, header["config"], "world")
    vocab = Vocabulary(tokens=tuple(header["vocab"]))

    p_off, b_off = arrays["scene/point_offsets"], arrays["scene/box_offsets"]
    scenes = [
        PointCloudScene(
            points=arrays["scene/points"][p_off[i] : p_off[i + 1]],
            boxes=arrays["scene/boxes"][b_off[i] : b_off[i + 1]],
            labels=arrays["scene/labels"][b_off[i] : b_off[i + 1]],
            room=arrays["scene/rooms"][i],
            scene_id=scene_id,
            seed=int(arrays["scene/seeds"][i]),
        )
        for i, scene_id in enumerate(header["scene_ids"])
    ]
    samples = [
        DenseSample(
            scene_index=int(arrays["sample/scene_index"][j]),
            focus=int(arrays["sample/focus"][j]),
            **{name: arrays[f"sample/{name}"][j] for name in _SAMPLE_FIELDS},
        )
        for j in range(len(arrays["sample/scene_index"]))
    ]
    return GroundingDataset(
        config=config,
        vocab=vocab,
        seed=int(header["seed"]),
        split=str(header["split"]),
        scenes=scenes,
        samples=samples,
    )


# --------------------------------------------------------------------------
# CLI


def generate_datasets(cfg: RunConfig, out_dir: Path) -> dict[str, object]:
    """Write ``train.musubi``, ``eval.musubi`` and ``vocab.txt``; return a manifest payload."""

    from .runlog import sha256_file

    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, dict[str, object]] = {}
    for split in ("train", "eval"):
        dataset = build_dataset(cfg.world, cfg.seed, split=split)
        path = save_dataset(dataset, out_dir / f"{split}.musubi")
        n_fallback = int(sum(s.fallback.sum() for s in dataset.samples))
        artifacts[split] = {
            "path": str(path),
            "sha256": sha256_file(path),
            "num_scenes": len(dataset.scenes),
            "num_samples": len(dataset.samples),
            "num_fallback_sentences": n_fallback,
        }
        logger.info("%s: %d scenes, %d paragraphs", split, len(dataset.scenes), len(dataset.samples))
    vocab_path = save_vocabulary(build_vocabulary(cfg.world.class_names), out_dir / "vocab.txt")
    artifacts["vocab"] = {"path": str(vocab_path), "sha256": sha256_file(vocab_path)}
    return {
        "status": "ok",
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "artifacts": artifacts,
    }


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="musubi-generate",
        description="Generate the synthetic train/eval datasets and vocabulary.",
    )
    add_config_arguments(parser)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    from .runlog import configure_logging, run_step, write_manifest

    args = _build_parser().parse_args(argv)
    configure_logging(args.verbose)

    def body() -> int:
        cfg = config_from_args(args)
        out_dir = Path(cfg.out)
        payload = generate_datasets(cfg, out_dir)
        # Same config and seed must give a byte-identical manifest.
        write_manifest(out_dir / "generate_manifest.json", payload, timestamp=False)
        logger.info("generated datasets in %s", out_dir)
        return 0

    return run_step(body)


if __name__ == "__main__":
    raise SystemExit(main())
