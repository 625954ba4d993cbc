from __future__ import annotations

import itertools
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch
from conftest import tiny_mapping

import musubi.global_decoder as global_decoder
from musubi.config import RunConfig, ablated, from_mapping
from musubi.evaluation import acc_at_iou, box_ious
from musubi.geometry import Box3D, points_in_box
import musubi.training as training
from musubi.training import (
    UNIT_BOX,
    CheckpointMismatchError,
    StageOrderError,
    collate,
    load_checkpoint,
    load_trained_model,
    model_from_config,
    read_step_log,
    restore_model,
    rotate_scene,
    stage_loss,
    train_stage,
    warmup_factor,
)
from musubi.world import RELATIONS, PointCloudScene, build_dataset, render_sentence, relation_holds

_TURN = {
    "left_of": "front_of",
    "front_of": "right_of",
    "right_of": "back_of",
    "back_of": "left_of",
    "leftmost": "frontmost",
    "frontmost": "rightmost",
    "rightmost": "backmost",
    "backmost": "leftmost",
}


def _turned(relation: str, turns: int) -> str:
    for _ in range(turns):
        relation = _TURN.get(relation, relation)
    return relation


def _with_steps(cfg: RunConfig, steps: int) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, steps=steps))


def _with_train(cfg: RunConfig, **values) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, **values))


def test_rotation_keeps_points_inside_their_boxes(tiny_train) -> None:
    scene = tiny_train.scenes[0]
    n = len(scene.points)
    for turns in range(4):
        points, boxes = rotate_scene(scene, turns)
        for original, rotated in zip(scene.boxes, boxes):
            assert len(points_in_box(points, Box3D.from_array(rotated), n)) == len(
                points_in_box(scene.points, Box3D.from_array(original), n)
            )
    points, boxes = rotate_scene(scene, 4)
    assert np.allclose(points, scene.points) and np.allclose(boxes, scene.boxes)


def test_rotated_sentences_still_describe_their_targets(tiny_train) -> None:
    ds = tiny_train
    names = ds.config.class_names
    checked = 0
    for index, sample in enumerate(ds.samples):
        scene = ds.scenes[sample.scene_index]
        for turns in (1, 2, 3):
            points, boxes = rotate_scene(scene, turns)
            room = scene.room.copy()
            if turns % 2:
                room[[0, 1]] = room[[1, 0]]
            turned = PointCloudScene(points, boxes, scene.labels, room, scene.scene_id, scene.seed)
            batch = collate(ds, [index], quarter_turns=[turns])
            for slot in range(sample.k):
                if sample.fallback[slot]:
                    continue
                relation = _turned(RELATIONS[sample.relations[slot]], turns)
                target = int(sample.targets[slot])
                anchor = int(sample.anchors[slot])
                anchor = None if anchor < 0 else anchor
                assert relation_holds(turned, target, relation, anchor)

                anchor_name = None if anchor is None else names[int(scene.labels[anchor])]
                expected = render_sentence(relation, names[int(scene.labels[target])], anchor_name)
                assert ds.vocab.decode(batch.tokens[0, slot].numpy()) == expected
                checked += 1
    assert checked > 0


def test_collate_pads_ground_truth_with_unit_boxes(tiny_train) -> None:
    batch = collate(tiny_train, [0, 1])
    assert batch.points.dtype == torch.float32
    assert batch.sample_indices == [0, 1]
    for row, index in enumerate((0, 1)):
        sample = tiny_train.samples[index]
        scene = tiny_train.scenes[sample.scene_index]
        k = sample.k
        assert np.allclose(batch.gt_boxes[row, :k].numpy(), scene.boxes[sample.targets[:k]], atol=1e-6)
        assert np.allclose(batch.gt_boxes[row, k:].numpy(), UNIT_BOX)
        assert not batch.valid[row, k:].any()


def test_warmup_factor() -> None:
    assert warmup_factor(0, 4) == pytest.approx(0.25)
    assert warmup_factor(3, 4) == 1.0
    assert warmup_factor(10, 4) == 1.0
    assert warmup_factor(0, 0) == 1.0


def test_stages_must_run_in_order(tiny_cfg, tiny_train, tmp_path: Path) -> None:
    with pytest.raises(StageOrderError):
        train_stage(tiny_cfg, tiny_train, stage=2, out_dir=tmp_path)
    first = train_stage(tiny_cfg, tiny_train, stage=1, out_dir=tmp_path)
    with pytest.raises(StageOrderError):
        train_stage(tiny_cfg, tiny_train, stage=3, out_dir=tmp_path, init_checkpoint=first.checkpoint_path)
    with pytest.raises(StageOrderError):
        train_stage(tiny_cfg, tiny_train, stage=2, out_dir=tmp_path, resume=first.checkpoint_path)
    with pytest.raises(ValueError):
        train_stage(tiny_cfg, tiny_train, stage=4, out_dir=tmp_path)

    second = train_stage(tiny_cfg, tiny_train, stage=2, out_dir=tmp_path, init_checkpoint=first.checkpoint_path)
    assert second.checkpoint_path == tmp_path / "stage2.ckpt"
    assert second.model.context.enabled


def test_training_is_deterministic(tiny_cfg, tiny_train, tmp_path: Path) -> None:
    a = train_stage(tiny_cfg, tiny_train, stage=3, out_dir=tmp_path / "a", from_scratch=True)
    b = train_stage(tiny_cfg, tiny_train, stage=3, out_dir=tmp_path / "b", from_scratch=True)
    assert len(a.losses) == tiny_cfg.train.steps
    assert a.losses == b.losses
    assert all(np.isfinite(a.losses))


def test_checkpoint_restores_the_trained_model(tiny_cfg, tiny_train, tiny_eval, tmp_path: Path) -> None:
    result = train_stage(tiny_cfg, tiny_train, stage=3, out_dir=tmp_path, from_scratch=True)
    loaded, checkpoint = load_trained_model(tiny_cfg, result.checkpoint_path)
    assert checkpoint.stage == 3
    assert checkpoint.step == tiny_cfg.train.steps
    assert checkpoint.meta["config_hash"] == tiny_cfg.config_hash()

    batch = collate(tiny_eval, [0, 1])
    with torch.no_grad():
        expected = result.model(batch.points, batch.tokens, batch.lengths, batch.valid).final_boxes
        actual = loaded(batch.points, batch.tokens, batch.lengths, batch.valid).final_boxes
    assert torch.allclose(expected, actual, atol=1e-6)


def test_checkpoint_mismatch_is_reported(tiny_cfg, tiny_train, tmp_path: Path) -> None:
    result = train_stage(tiny_cfg, tiny_train, stage=1, out_dir=tmp_path)
    payload = tiny_mapping(model={"d_model": 32, "text_dim": 32})
    payload["out"] = str(tmp_path)
    wider = from_mapping(payload)
    with pytest.raises(CheckpointMismatchError):
        load_trained_model(wider, result.checkpoint_path)

    model = model_from_config(wider, vocab_size=len(tiny_train.vocab))
    with pytest.raises(CheckpointMismatchError, match="shape"):
        restore_model(model, load_checkpoint(result.checkpoint_path))


def test_resume_continues_the_same_run(tiny_cfg, tiny_train, tmp_path: Path) -> None:
    full = train_stage(_with_steps(tiny_cfg, 4), tiny_train, stage=1, out_dir=tmp_path / "full")

    first = train_stage(_with_steps(tiny_cfg, 2), tiny_train, stage=1, out_dir=tmp_path / "split")
    resumed = train_stage(
        _with_steps(tiny_cfg, 4),
        tiny_train,
        stage=1,
        out_dir=tmp_path / "split",
        resume=first.checkpoint_path,
    )
    assert resumed.step == 4
    assert np.allclose(resumed.losses, full.losses[2:], rtol=1e-6, atol=1e-7)
    for name, tensor in full.model.state_dict().items():
        assert torch.allclose(tensor, resumed.model.state_dict()[name], atol=1e-6), name

    log = read_step_log(resumed.log_path)
    assert log["step"].tolist() == [0, 1, 2, 3]


def test_interrupted_stage_resumes_from_its_last_checkpoint(tiny_cfg, tiny_train, tmp_path: Path, monkeypatch) -> None:
    cfg = _with_train(tiny_cfg, steps=5, checkpoint_every=2)
    full = train_stage(cfg, tiny_train, stage=1, out_dir=tmp_path / "full")

    real_loss = training.stage_loss
    calls = {"n": 0}

    def crash_at_step_three(*args, **kwargs):
        if calls["n"] == 3:
            raise RuntimeError("interrupted")
        calls["n"] += 1
        return real_loss(*args, **kwargs)

    monkeypatch.setattr(training, "stage_loss", crash_at_step_three)
    with pytest.raises(RuntimeError, match="interrupted"):
        train_stage(cfg, tiny_train, stage=1, out_dir=tmp_path / "cut")
    monkeypatch.setattr(training, "stage_loss", real_loss)

    ckpt = tmp_path / "cut" / "stage1.ckpt"
    assert load_checkpoint(ckpt).step == 2
    assert read_step_log(tmp_path / "cut" / "train_log.jsonl")["step"].tolist() == [0, 1, 2]

    resumed = train_stage(cfg, tiny_train, stage=1, out_dir=tmp_path / "cut", resume=ckpt)
    assert resumed.step == 5
    log = read_step_log(resumed.log_path)
    assert log["step"].tolist() == [0, 1, 2, 3, 4]
    assert np.allclose(log["loss"], full.losses, rtol=1e-6, atol=1e-7)
    for name, tensor in full.model.state_dict().items():
        assert torch.allclose(tensor, resumed.model.state_dict()[name], atol=1e-6), name


def test_step_log_columns(tiny_cfg, tiny_train, tmp_path: Path) -> None:
    result = train_stage(tiny_cfg, tiny_train, stage=3, out_dir=tmp_path, from_scratch=True)
    log = read_step_log(result.log_path)
    assert list(log.columns) == ["stage", "step", "loss", "loss_init", "loss_refine", "lr", "config_hash"]
    assert len(log) == tiny_cfg.train.steps
    assert (log["stage"] == 3).all()
    assert (log["config_hash"] == tiny_cfg.config_hash()).all()
    assert np.allclose(log["loss"], result.losses)
    assert (log["loss_refine"] > 0).all()

    empty = read_step_log(tmp_path / "missing.jsonl")
    assert empty.empty and "loss" in empty.columns



def test_end_to_end_gradients_match_central_differences(tmp_path: Path, monkeypatch) -> None:
    payload = tiny_mapping(
        world={"train_k": 2, "eval_k": 2},
        model={
            "d_model": 8,
            "text_dim": 8,
            "num_heads": 2,
            "num_scene_tokens": 16,
            "compact_size": 4,
            "global_layers": 2,
            "crop_points": 4,
        },
    )
    payload["out"] = str(tmp_path / "run")
    cfg = from_mapping(payload)
    dataset = build_dataset(cfg.world, cfg.seed, split="train")
    model = model_from_config(cfg, vocab_size=len(dataset.vocab)).double().eval()
    assert model.uses_global
    batch = collate(dataset, [0, 1], dtype=torch.float64)

    def loss() -> torch.Tensor:
        output = model(batch.points, batch.tokens, batch.lengths, batch.valid)
        return stage_loss(output, batch, cfg).total

    # The graph stops at each layer's input boxes, so they are held fixed here.
    real_noise = global_decoder.add_proposal_noise
    layer_inputs: list[torch.Tensor] = []

    def record(boxes, *args, **kwargs):
        layer_inputs.append(real_noise(boxes, *args, **kwargs))
        return layer_inputs[-1]

    monkeypatch.setattr(global_decoder, "add_proposal_noise", record)
    model.zero_grad()
    loss().backward()
    assert len(layer_inputs) == cfg.model.global_layers
    replay = itertools.cycle(list(layer_inputs))
    monkeypatch.setattr(global_decoder, "add_proposal_noise", lambda boxes, *args, **kwargs: next(replay))

    entries = [
        (param, int(i))
        for param in model.parameters()
        if param.grad is not None
        for i in torch.nonzero(param.grad.reshape(-1).abs() > 1e-6).flatten()
    ]
    rng = np.random.default_rng(0)
    chosen = rng.choice(len(entries), size=50, replace=False)
    h = 1e-6
    with torch.no_grad():
        for index in chosen:
            param, i = entries[index]
            flat = param.view(-1)
            analytic = float(param.grad.reshape(-1)[i])
            original = float(flat[i])
            flat[i] = original + h
            plus = float(loss())
            flat[i] = original - h
            minus = float(loss())
            flat[i] = original
            numeric = (plus - minus) / (2 * h)
            assert abs(numeric - analytic) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-9, (index, analytic, numeric)


def _toy_cfg(tmp_path: Path, **model) -> RunConfig:
    payload = tiny_mapping(
        world={"train_scenes": 8},
        model={"d_model": 32, "text_dim": 32, "erase_prob": 0.0, **model},
        train={"warmup_steps": 20, "rotation_augment": False},
    )
    payload["out"] = str(tmp_path / "run")
    return from_mapping(payload)


def _train_three_stages(cfg: RunConfig, dataset, out_dir: Path, steps: tuple[int, int, int]):
    first = train_stage(_with_steps(cfg, steps[0]), dataset, stage=1, out_dir=out_dir)
    second = train_stage(
        _with_steps(cfg, steps[1]), dataset, stage=2, out_dir=out_dir, init_checkpoint=first.checkpoint_path
    )
    return train_stage(
        _with_steps(cfg, steps[2]), dataset, stage=3, out_dir=out_dir, init_checkpoint=second.checkpoint_path
    )


def _accuracy_on(model, dataset, threshold: float) -> float:
    batch = collate(dataset, list(range(len(dataset.samples))))
    model.eval()
    with torch.no_grad():
        boxes = model(batch.points, batch.tokens, batch.lengths, batch.valid).final_boxes
    valid = batch.valid
    return acc_at_iou(box_ious(boxes[valid].numpy(), batch.gt_boxes[valid].numpy()), threshold)


@pytest.mark.slow
def test_stage_one_loss_halves_on_a_toy_set(tmp_path: Path) -> None:
    cfg = _toy_cfg(tmp_path)
    dataset = build_dataset(cfg.world, cfg.seed, split="train")
    assert len(dataset.scenes) == 8
    result = train_stage(_with_steps(cfg, 500), dataset, stage=1, out_dir=tmp_path)
    assert np.mean(result.losses[-20:]) <= 0.5 * np.mean(result.losses[:20])


@pytest.mark.slow
def test_three_stage_training_fits_the_toy_set(tmp_path: Path) -> None:
    cfg = _toy_cfg(tmp_path)
    dataset = build_dataset(cfg.world, cfg.seed, split="train")
    result = _train_three_stages(cfg, dataset, tmp_path, (1500, 500, 1000))
    assert _accuracy_on(result.model, dataset, 0.5) >= 0.9


@pytest.mark.slow
def test_every_single_ablation_is_no_better_than_the_full_model(tmp_path: Path) -> None:
    cfg = _toy_cfg(tmp_path)
    train = build_dataset(cfg.world, cfg.seed, split="train")
    held_out = build_dataset(cfg.world, cfg.seed, split="eval")
    steps = (600, 200, 400)
    full = _accuracy_on(_train_three_stages(cfg, train, tmp_path / "full", steps).model, held_out, 0.25)
    for switch in ("cqg", "ae", "ai", "af"):
        variant = ablated(cfg, **{switch: True})
        model = _train_three_stages(variant, train, tmp_path / switch, steps).model
        assert full >= _accuracy_on(model, held_out, 0.25) - 0.05, switch
