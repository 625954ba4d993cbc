from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from conftest import manual_scene

from musubi.config import WorldConfig
from musubi.geometry import iou3d, k_nearest_objects, points_in_box
from musubi.io import ContainerFormatError, ContainerVersionError
from musubi.vocab import PAD_ID, build_vocabulary
from musubi.world import (
    RELATIONS,
    SceneGenerationError,
    build_dataset,
    difficulty_tags,
    generate_scene,
    generate_sentence,
    load_dataset,
    proximity_order,
    relation_holds,
    sample_paragraph,
    save_dataset,
    split_tags,
    valid_relations,
)

TINY_WORLD = WorldConfig(min_objects=3, max_objects=8, num_points=256, max_sentences=6, train_k=4, eval_k=4)


def test_generate_scene_is_deterministic() -> None:
    a = generate_scene(7, TINY_WORLD)
    b = generate_scene(7, TINY_WORLD)
    c = generate_scene(8, TINY_WORLD)
    assert a == b
    assert not np.array_equal(a.points, c.points) or not np.array_equal(a.boxes, c.boxes)
    assert a.scene_id == "scene-7"


def test_generated_scenes_are_valid() -> None:
    for seed in range(300):
        scene = generate_scene(seed, TINY_WORLD)
        assert scene.points.shape == (TINY_WORLD.num_points, 3 + TINY_WORLD.num_features)
        assert TINY_WORLD.min_objects <= scene.num_objects <= TINY_WORLD.max_objects
        assert np.all(scene.boxes[:, 3:] > 0)
        assert np.all((scene.points[:, 3:] >= 0) & (scene.points[:, 3:] <= 1))
        for i, j in itertools.combinations(range(scene.num_objects), 2):
            assert float(iou3d(scene.boxes[i], scene.boxes[j])) == 0.0
        for box, _ in scene.objects:
            inside = points_in_box(scene.points, box, TINY_WORLD.num_points)
            assert len(inside) >= TINY_WORLD.min_points_per_object


def test_generate_scene_reports_seed_on_placement_failure() -> None:
    cramped = WorldConfig(
        room_extent=(0.5, 0.5, 3.0),
        min_objects=2,
        max_objects=2,
        class_names=("bin", "lamp"),
        max_retries=20,
    )
    with pytest.raises(SceneGenerationError) as info:
        generate_scene(3, cramped)
    assert info.value.seed == 3
    assert "seed=3" in str(info.value)


def test_unique_class_sentence_needs_no_anchor() -> None:
    scene = manual_scene([(1.0, 1.0), (5.0, 5.0)], [0, 1])
    vocab = build_vocabulary(TINY_WORLD.class_names)
    sentence = generate_sentence(
        scene, 0, np.random.default_rng(0), vocab=vocab, class_names=TINY_WORLD.class_names
    )
    assert sentence.text == "the chair ."
    assert sentence.relation == "unique"
    assert not sentence.fallback
    assert vocab.decode(sentence.tokens) == sentence.text
    assert np.array_equal(vocab.encode(sentence.text), sentence.tokens)


def test_closest_relation_picks_the_chair_nearer_the_table() -> None:
    # chairs 0 and 1, table 2 next to chair 0
    scene = manual_scene([(1.0, 1.0), (6.0, 6.0), (2.0, 1.0)], [0, 0, 1])
    assert ("closest", 2) in valid_relations(scene, 0)
    assert ("farthest", 2) in valid_relations(scene, 1)
    assert relation_holds(scene, 0, "closest", 2)
    assert not relation_holds(scene, 1, "closest", 2)


def test_distance_relations_agree_with_brute_force() -> None:
    vocab = build_vocabulary(TINY_WORLD.class_names)
    rng = np.random.default_rng(1)
    checked = 0
    for seed in range(60):
        scene = generate_scene(seed, TINY_WORLD)
        for target in range(scene.num_objects):
            sentence = generate_sentence(
                scene, target, rng, vocab=vocab, class_names=TINY_WORLD.class_names
            )
            assert sentence.target == target
            assert np.all(sentence.tokens < len(vocab))
            if sentence.relation not in ("closest", "farthest"):
                continue
            same = [
                i
                for i in range(scene.num_objects)
                if scene.labels[i] == scene.labels[target] and i != sentence.anchor
            ]
            dist = {i: np.linalg.norm(scene.centers[i] - scene.centers[sentence.anchor]) for i in same}
            pick = min if sentence.relation == "closest" else max
            assert pick(dist, key=dist.get) == target
            checked += 1
    assert checked > 0


def test_proximity_order_prefers_near_objects() -> None:
    rng = np.random.default_rng(0)
    firsts = Counter(int(proximity_order(np.array([0.0, 1.0, 2.0, 3.0]), rng, 4.0)[0]) for _ in range(5000))
    assert firsts[0] > firsts[1] > firsts[2] > firsts[3]


def test_sample_paragraph_targets_form_the_knn_cluster() -> None:
    scene = manual_scene([(0.0, 0.0), (1.0, 0.0), (5.0, 0.0)], [0, 0, 1])
    vocab = build_vocabulary(TINY_WORLD.class_names)
    rng = np.random.default_rng(2)
    seen_focus_zero = False
    for _ in range(50):
        sample = sample_paragraph(scene, 2, rng, vocab=vocab, config=TINY_WORLD)
        expected = {sample.focus, *k_nearest_objects(scene.centers, sample.focus, 1)}
        assert set(sample.targets[: sample.k].tolist()) == expected
        if sample.focus == 0:
            seen_focus_zero = True
            assert expected == {0, 1}
    assert seen_focus_zero


def test_sample_paragraph_clamps_and_pads() -> None:
    scene = manual_scene([(0.0, 0.0), (2.0, 0.0), (4.0, 0.0)], [0, 1, 2])
    vocab = build_vocabulary(TINY_WORLD.class_names)
    sample = sample_paragraph(scene, 5, np.random.default_rng(0), vocab=vocab, config=TINY_WORLD)
    assert sample.k == 3
    assert sample.valid.tolist() == [True, True, True, False, False, False]
    assert np.all(sample.tokens[3:] == PAD_ID)
    assert np.all(sample.lengths[3:] == 0)
    assert np.all(sample.targets[3:] == -1)
    assert len(sample.texts(vocab)) == 3

    with pytest.raises(ValueError):
        sample_paragraph(scene, 1, np.random.default_rng(0), vocab=vocab, config=TINY_WORLD)
    with pytest.raises(ValueError):
        sample_paragraph(scene, 7, np.random.default_rng(0), vocab=vocab, config=TINY_WORLD)

    lonely = manual_scene([(1.0, 1.0)], [0])
    with pytest.raises(ValueError):
        sample_paragraph(lonely, 2, np.random.default_rng(0), vocab=vocab, config=TINY_WORLD)


def test_dataset_targets_match_brute_force_knn() -> None:
    ds = build_dataset(replace(TINY_WORLD, train_scenes=20, paragraphs_per_scene=5), 4)
    assert ds.samples
    for sample in ds.samples:
        scene = ds.scenes[sample.scene_index]
        centers = scene.centers
        dist = np.linalg.norm(centers - centers[sample.focus], axis=1)
        order = sorted(range(len(centers)), key=lambda i: (dist[i], i))
        expected = set(order[: sample.k])
        assert set(sample.targets[: sample.k].tolist()) == expected
        assert sample.relations[: sample.k].min() >= 0
        assert sample.relations[: sample.k].max() < len(RELATIONS)


def test_build_dataset_is_a_pure_function_of_seed() -> None:
    a = build_dataset(TINY_WORLD, 9)
    b = build_dataset(TINY_WORLD, 9)
    assert a.scenes == b.scenes
    assert a.samples == b.samples
    ev = build_dataset(TINY_WORLD, 9, split="eval")
    assert ev.scenes[0] != a.scenes[0]
    with pytest.raises(ValueError):
        build_dataset(TINY_WORLD, 9, split="test")


def test_split_and_difficulty_tags_match_class_histogram() -> None:
    ds = build_dataset(TINY_WORLD, 5)
    uniq = split_tags(ds)
    diff = difficulty_tags(ds)
    for sample, u_row, d_row in zip(ds.samples, uniq, diff):
        scene = ds.scenes[sample.scene_index]
        histogram = np.bincount(scene.labels, minlength=len(TINY_WORLD.class_names))
        for slot, target in enumerate(sample.targets[: sample.k]):
            count = histogram[scene.labels[target]]
            assert u_row[slot] == ("unique" if count == 1 else "multiple")
            assert d_row[slot] == ("hard" if count > 2 else "easy")


def test_vocabulary_closure() -> None:
    ds = build_dataset(TINY_WORLD, 6)
    for sample in ds.samples:
        assert sample.tokens.max() < len(ds.vocab)
        assert np.all(sample.lengths[: sample.k] <= TINY_WORLD.max_tokens)


def test_dataset_round_trip(tmp_path: Path) -> None:
    ds = build_dataset(TINY_WORLD, 3)
    path = save_dataset(ds, tmp_path / "train.musubi")
    loaded = load_dataset(path)
    assert loaded.config == ds.config
    assert loaded.vocab == ds.vocab
    assert loaded.seed == ds.seed
    assert loaded.split == ds.split
    assert loaded.scenes == ds.scenes
    assert loaded.samples == ds.samples
    assert loaded.scenes[0].points.dtype == np.float64


def test_dataset_file_errors(tmp_path: Path) -> None:
    ds = build_dataset(TINY_WORLD, 3)
    path = save_dataset(ds, tmp_path / "train.musubi")
    raw = path.read_bytes()

    bad_version = tmp_path / "version.musubi"
    bad_version.write_bytes(raw[:8] + (99).to_bytes(8, "little") + raw[16:])
    with pytest.raises(ContainerVersionError):
        load_dataset(bad_version)

    truncated = tmp_path / "truncated.musubi"
    truncated.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ContainerFormatError):
        load_dataset(truncated)

    wrong_magic = tmp_path / "magic.musubi"
    wrong_magic.write_bytes(b"NOTMUSUB" + raw[8:])
    with pytest.raises(ContainerFormatError):
        load_dataset(wrong_magic)
