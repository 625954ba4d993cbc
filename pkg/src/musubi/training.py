"""Three-stage training: local pretraining, contextual queries, global refinement."""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from .config import RunConfig, ablated, add_config_arguments, config_from_args
from .io import CHECKPOINT_MAGIC, read_container, write_container
from .losses import LossBreakdown, loss_init, total_loss
from .model import STAGES, GroundingModel, ModelOutput, build_model
from .world import GroundingDataset, PointCloudScene, load_dataset

logger = logging.getLogger(__name__)

UNIT_BOX = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])


class StageOrderError(RuntimeError):
    """A stage was started without a checkpoint of the preceding stage."""


class CheckpointMismatchError(ValueError):
    """Checkpoint parameters or config do not fit the model being restored."""


# --------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    points: torch.Tensor
    tokens: torch.Tensor
    lengths: torch.Tensor
    valid: torch.Tensor
    targets: torch.Tensor
    gt_boxes: torch.Tensor
    sample_indices: list[int] = field(default_factory=list)


def rotate_scene(scene: PointCloudScene, quarter_turns: int) -> tuple[np.ndarray, np.ndarray]:
    """Points and boxes after ``quarter_turns`` CCW turns about +z.

    The room is turned about its centre and shifted back so it starts at the
    origin again; box footprints swap their x/y sizes on odd turns.
    """

    points = scene.points.copy()
    boxes = scene.boxes.copy()
    room = scene.room.copy()
    for _ in range(quarter_turns % 4):
        x, y = points[:, 0].copy(), points[:, 1].copy()
        points[:, 0], points[:, 1] = room[1] - y, x
        bx, by = boxes[:, 0].copy(), boxes[:, 1].copy()
        boxes[:, 0], boxes[:, 1] = room[1] - by, bx
        boxes[:, [3, 4]] = boxes[:, [4, 3]]
        room[[0, 1]] = room[[1, 0]]
    return points, boxes


def collate(
    dataset: GroundingDataset,
    indices: Sequence[int],
    *,
    quarter_turns: Optional[Sequence[int]] = None,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    points, tokens, lengths, valid, targets, gt = [], [], [], [], [], []
    for j, index in enumerate(indices):
        sample = dataset.samples[index]
        scene = dataset.scenes[sample.scene_index]
        turns = 0 if quarter_turns is None else int(quarter_turns[j])
        pts, boxes = rotate_scene(scene, turns)
        sample_tokens = dataset.vocab.rotation_table(turns)[sample.tokens] if turns else sample.tokens
        gt_boxes = np.tile(UNIT_BOX, (len(sample.targets), 1))
        gt_boxes[sample.valid] = boxes[sample.targets[sample.valid]]
        points.append(pts)
        tokens.append(sample_tokens)
        lengths.append(sample.lengths)
        valid.append(sample.valid)
        targets.append(sample.targets)
        gt.append(gt_boxes)
    return Batch(
        points=torch.as_tensor(np.stack(points), dtype=dtype),
        tokens=torch.as_tensor(np.stack(tokens), dtype=torch.long),
        lengths=torch.as_tensor(np.stack(lengths), dtype=torch.long),
        valid=torch.as_tensor(np.stack(valid), dtype=torch.bool),
        targets=torch.as_tensor(np.stack(targets), dtype=torch.long),
        gt_boxes=torch.as_tensor(np.stack(gt), dtype=dtype),
        sample_indices=[int(i) for i in indices],
    )


def stage_loss(output: ModelOutput, batch: Batch, cfg: RunConfig) -> LossBreakdown:
    if output.refined is None:
        init = loss_init(output.local.boxes, batch.gt_boxes, batch.valid, cfg.loss)
        return LossBreakdown(total=init, init=init, refine=torch.zeros_like(init))
    layer_boxes = [record.boxes for record in output.refined.layers]
    return total_loss(output.local.boxes, layer_boxes, batch.gt_boxes, batch.valid, cfg.loss)


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    stage: int
    step: int
    config: dict[str, Any]
    params: dict[str, np.ndarray]
    optimizer: Optional[dict[str, Any]] = None
    rng: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)


def model_from_config(cfg: RunConfig, *, vocab_size: int) -> GroundingModel:
    w = cfg.world
    return build_model(
        cfg.model,
        vocab_size=vocab_size,
        max_sentences=w.max_sentences,
        max_tokens=w.max_tokens,
        point_features=w.num_features,
        ablation=cfg.ablation,
        room_scale=float(max(w.room_extent)),
        seed=cfg.seed,
    )


def save_checkpoint(
    path: str | Path,
    model: GroundingModel,
    *,
    cfg: RunConfig,
    stage: int,
    step: int,
    vocab_size: int,
    optimizer: Optional[torch.optim.Optimizer] = None,
    generators: Optional[dict[str, torch.Generator]] = None,
    np_rng: Optional[np.random.Generator] = None,
) -> Path:
    arrays: dict[str, np.ndarray] = {}
    torch_dtypes: dict[str, str] = {}
    for name, tensor in model.state_dict().items():
        key = f"param/{name}"
        arrays[key] = tensor.detach().cpu().numpy()
        torch_dtypes[key] = str(tensor.dtype).replace("torch.", "")

    optim_meta = None
    if optimizer is not None:
        state = optimizer.state_dict()
        for idx, entry in state["state"].items():
            for key, value in entry.items():
                name = f"optim/{idx}/{key}"
                tensor = torch.as_tensor(value)
                arrays[name] = tensor.detach().cpu().numpy()
                torch_dtypes[name] = str(tensor.dtype).replace("torch.", "")
        optim_meta = {"param_groups": state["param_groups"]}

    arrays["rng/torch"] = torch.get_rng_state().numpy().astype(np.int64)
    for name, gen in (generators or {}).items():
        arrays[f"rng/{name}"] = gen.get_state().numpy().astype(np.int64)

    header = {
        "kind": "checkpoint",
        "stage": int(stage),
        "step": int(step),
        "config": json.loads(json.dumps(cfg.to_dict(), default=list)),
        "config_hash": cfg.config_hash(),
        "vocab_size": int(vocab_size),
        "torch_dtypes": torch_dtypes,
        "optimizer": optim_meta,
        "numpy_rng": None if np_rng is None else np_rng.bit_generator.state,
    }
    return write_container(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    dtypes = header["torch_dtypes"]
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}

    optimizer = None
    if header.get("optimizer") is not None:
        state: dict[int, dict[str, torch.Tensor]] = {}
        for name, value in arrays.items():
            if not name.startswith("optim/"):
                continue
            _, idx, key = name.split("/", 2)
            tensor = torch.as_tensor(value).to(getattr(torch, dtypes[name]))
            state.setdefault(int(idx), {})[key] = tensor
        optimizer = {"state": state, "param_groups": header["optimizer"]["param_groups"]}

    rng = {k[len("rng/"):]: torch.as_tensor(v.astype(np.uint8)) for k, v in arrays.items() if k.startswith("rng/")}
    if header.get("numpy_rng") is not None:
        rng["numpy"] = header["numpy_rng"]
    return Checkpoint(
        stage=int(header["stage"]),
        step=int(header["step"]),
        config=header["config"],
        params=params,
        optimizer=optimizer,
        rng=rng,
        meta={"config_hash": header["config_hash"], "vocab_size": header["vocab_size"], "torch_dtypes": dtypes},
    )


def check_compatible(checkpoint: Checkpoint, cfg: RunConfig) -> None:
    """Raise :class:`CheckpointMismatchError` if the model sections differ."""

    current = json.loads(json.dumps(cfg.to_dict(), default=list))
    for section in ("model", "ablation"):
        if checkpoint.config.get(section) != current[section]:
            raise CheckpointMismatchError(f"checkpoint {section} config differs from the run config")
    for key in ("max_sentences", "max_tokens", "num_features", "class_names"):
        if checkpoint.config["world"].get(key) != current["world"][key]:
            raise CheckpointMismatchError(f"checkpoint world.{key} differs from the run config")


def restore_model(model: GroundingModel, checkpoint: Checkpoint) -> None:
    own = model.state_dict()
    missing = sorted(set(own) - set(checkpoint.params))
    unexpected = sorted(set(checkpoint.params) - set(own))
    if missing or unexpected:
        raise CheckpointMismatchError(f"parameter names differ (missing {missing[:3]}, unexpected {unexpected[:3]})")
    restored = {}
    for name, tensor in own.items():
        value = checkpoint.params[name]
        if tuple(value.shape) != tuple(tensor.shape):
            raise CheckpointMismatchError(
                f"parameter {name} has shape {tuple(value.shape)} in checkpoint, model expects {tuple(tensor.shape)}"
            )
        restored[name] = torch.as_tensor(value).to(tensor.dtype)
    model.load_state_dict(restored)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: GroundingModel
    checkpoint_path: Path
    log_path: Path
    losses: list[float]
    stage: int
    step: int


def warmup_factor(step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, (step + 1) / warmup_steps)


def _make_generators(seed_rng: np.random.Generator) -> dict[str, torch.Generator]:
    gens = {}
    for name in ("erase", "noise", "crop"):
        gens[name] = torch.Generator().manual_seed(int(seed_rng.integers(0, 2**62)))
    return gens


def train_stage(
    cfg: RunConfig,
    dataset: GroundingDataset,
    *,
    stage: int,
    out_dir: str | Path,
    init_checkpoint: Optional[str | Path] = None,
    resume: Optional[str | Path] = None,
    from_scratch: bool = False,
    ckpt_out: Optional[str | Path] = None,
    progress: bool = False,
) -> TrainResult:
    """Run one training stage and write its checkpoint and step log.

    Stage 2 and 3 start from a checkpoint of the previous stage unless
    ``from_scratch`` is set. ``resume`` continues a checkpoint of the same
    stage with its optimizer, step counter and random states. Every
    ``train.checkpoint_every`` steps the same checkpoint file is rewritten
    mid-stage, so an interrupted run can be resumed from it.
    """

    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage}")
    if not dataset.samples:
        raise ValueError("training dataset has no paragraphs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(ckpt_out) if ckpt_out is not None else out / f"stage{stage}.ckpt"
    log_path = ckpt_path.with_name("train_log.jsonl")
    digest = cfg.config_hash()

    torch.use_deterministic_algorithms(True, warn_only=True)
    vocab_size = len(dataset.vocab)
    model = model_from_config(cfg, vocab_size=vocab_size)
    model.set_stage(stage)

    start_step = 0
    previous: Optional[Checkpoint] = None
    if resume is not None:
        previous = load_checkpoint(resume)
        if previous.stage != stage:
            raise StageOrderError(f"cannot resume stage {stage} from a stage-{previous.stage} checkpoint")
        start_step = previous.step
    elif init_checkpoint is not None:
        previous = load_checkpoint(init_checkpoint)
        if previous.stage != stage - 1:
            raise StageOrderError(f"stage {stage} needs a stage-{stage - 1} checkpoint, got stage {previous.stage}")
    elif stage > 1 and not from_scratch:
        raise StageOrderError(f"stage {stage} needs a stage-{stage - 1} checkpoint (or from_scratch)")
    if previous is not None:
        check_compatible(previous, cfg)
        restore_model(model, previous)

    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    np_rng = np.random.default_rng([cfg.seed, stage])
    generators = _make_generators(np_rng)
    if resume is not None and previous is not None:
        if previous.optimizer is not None:
            optimizer.load_state_dict(previous.optimizer)
        if "torch" in previous.rng:
            torch.set_rng_state(previous.rng["torch"])
        for name, gen in generators.items():
            if name in previous.rng:
                gen.set_state(previous.rng[name])
        if "numpy" in previous.rng:
            np_rng.bit_generator.state = previous.rng["numpy"]
    else:
        torch.manual_seed(int(np_rng.integers(0, 2**62)))

    if resume is not None:
        _truncate_step_log(log_path, stage, start_step)
    mode = "a" if resume is not None and log_path.exists() else "w"
    losses: list[float] = []
    n_samples = len(dataset.samples)
    batch_size = min(cfg.train.batch_size, n_samples)
    model.train()
    step = start_step
    with log_path.open(mode, encoding="utf-8") as log_fh:
        steps = range(start_step, cfg.train.steps)
        for step in tqdm(steps, desc=f"stage {stage}", disable=not progress, initial=start_step, total=cfg.train.steps):
            indices = np_rng.choice(n_samples, size=batch_size, replace=False)
            turns = np_rng.integers(0, 4, size=batch_size) if cfg.train.rotation_augment else None
            batch = collate(dataset, indices, quarter_turns=turns)
            lr = cfg.train.lr * warmup_factor(step, cfg.train.warmup_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr

            output = model(
                batch.points,
                batch.tokens,
                batch.lengths,
                batch.valid,
                crop_generator=generators["crop"],
                erase_generator=generators["erase"],
                noise_generator=generators["noise"],
            )
            parts = stage_loss(output, batch, cfg)
            optimizer.zero_grad(set_to_none=True)
            parts.total.backward()
            if cfg.train.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
            optimizer.step()

            loss_value = float(parts.total.detach())
            losses.append(loss_value)
            record = {
                "stage": stage,
                "step": step,
                "loss": loss_value,
                "loss_init": float(parts.init.detach()),
                "loss_refine": float(parts.refine.detach()),
                "lr": lr,
                "config_hash": digest,
            }
            log_fh.write(json.dumps(record) + "\n")
            if cfg.train.log_every > 0 and step % cfg.train.log_every == 0:
                logger.info("stage %d step %d loss %.4f", stage, step, loss_value)
            every = cfg.train.checkpoint_every
            if every > 0 and (step + 1) % every == 0 and step + 1 < cfg.train.steps:
                log_fh.flush()
                save_checkpoint(
                    ckpt_path,
                    model,
                    cfg=cfg,
                    stage=stage,
                    step=step + 1,
                    vocab_size=vocab_size,
                    optimizer=optimizer,
                    generators=generators,
                    np_rng=np_rng,
                )
                logger.debug("stage %d: checkpoint at step %d", stage, step + 1)
        final_step = max(step + 1, start_step) if cfg.train.steps > start_step else start_step

    save_checkpoint(
        ckpt_path,
        model,
        cfg=cfg,
        stage=stage,
        step=final_step,
        vocab_size=vocab_size,
        optimizer=optimizer,
        generators=generators,
        np_rng=np_rng,
    )
    model.eval()
    return TrainResult(
        model=model,
        checkpoint_path=ckpt_path,
        log_path=log_path,
        losses=losses,
        stage=stage,
        step=final_step,
    )


def _truncate_step_log(path: Path, stage: int, start_step: int) -> None:
    """Drop this stage's records at or after ``start_step``; they are rerun on resume."""

    if not path.exists():
        return
    kept = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        if record.get("stage") == stage and int(record.get("step", -1)) >= start_step:
            continue
        kept.append(line)
    path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")


def read_step_log(path: str | Path) -> pd.DataFrame:
    """Step log as a table, one row per optimizer step."""

    p = Path(path)
    if not p.exists() or p.stat().st_size == 0:
        return pd.DataFrame(columns=["stage", "step", "loss", "loss_init", "loss_refine", "lr", "config_hash"])
    return pd.read_json(p, lines=True, dtype={"config_hash": str})


def load_trained_model(cfg: RunConfig, checkpoint_path: str | Path) -> tuple[GroundingModel, Checkpoint]:
    checkpoint = load_checkpoint(checkpoint_path)
    check_compatible(checkpoint, cfg)
    model = model_from_config(cfg, vocab_size=int(checkpoint.meta["vocab_size"]))
    restore_model(model, checkpoint)
    model.set_stage(checkpoint.stage)
    model.eval()
    return model, checkpoint


# --------------------------------------------------------------------------
# CLI


def add_ablation_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--ablate-cqg", action="store_true", help="Bypass contextual query generation")
    parser.add_argument("--ablate-ae", action="store_true", help="Drop the explicit spatial bias")
    parser.add_argument("--ablate-ai", action="store_true", help="Drop the implicit spatial bias")
    parser.add_argument("--ablate-af", action="store_true", help="Drop the focused-region mask")


def apply_ablation_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    return ablated(cfg, cqg=args.ablate_cqg, ae=args.ablate_ae, ai=args.ablate_ai, af=args.ablate_af)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="musubi-train", description="Run one training stage.")
    add_config_arguments(parser)
    parser.add_argument("--stage", type=int, choices=STAGES, required=True)
    parser.add_argument("--data", default=None, help="Directory holding train.musubi (default: --out)")
    parser.add_argument("--ckpt-in", default=None, help="Checkpoint of the previous stage")
    parser.add_argument("--ckpt-out", default=None, help="Output checkpoint (default: OUT/stage<N>.ckpt)")
    parser.add_argument("--resume", default=None, help="Continue a checkpoint of the same stage")
    parser.add_argument("--from-scratch", action="store_true", help="Allow stage 2/3 without a checkpoint")
    parser.add_argument("--progress", action="store_true", help="Show a progress bar")
    add_ablation_arguments(parser)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    from .runlog import configure_logging, run_step, sha256_file, write_manifest

    args = _build_parser().parse_args(argv)
    configure_logging(args.verbose)

    def body() -> int:
        cfg = apply_ablation_flags(config_from_args(args), args)
        out_dir = Path(cfg.out)
        data_dir = Path(args.data) if args.data else out_dir
        dataset = load_dataset(data_dir / "train.musubi")
        result = train_stage(
            cfg,
            dataset,
            stage=args.stage,
            out_dir=out_dir,
            init_checkpoint=args.ckpt_in,
            resume=args.resume,
            from_scratch=args.from_scratch,
            ckpt_out=args.ckpt_out,
            progress=args.progress,
        )
        from .plotting import plot_loss_curve

        loss_plot = out_dir / f"train_loss_stage{args.stage}.png"
        plot_loss_curve(read_step_log(result.log_path), loss_plot, columns=("loss", "loss_init", "loss_refine"))
        write_manifest(
            out_dir / "train_manifest.json",
            {
                "status": "ok",
                "stage": args.stage,
                "seed": cfg.seed,
                "steps": result.step,
                "final_loss": result.losses[-1] if result.losses else None,
                "config_hash": cfg.config_hash(),
                "config": cfg.to_dict(),
                "ablation": asdict(cfg.ablation),
                "artifacts": {
                    "checkpoint": {"path": str(result.checkpoint_path), "sha256": sha256_file(result.checkpoint_path)},
                    "step_log": str(result.log_path),
                    "loss_plot": str(loss_plot),
                    "dataset": str(data_dir / "train.musubi"),
                },
            },
        )
        return 0

    return run_step(body)


if __name__ == "__main__":
    raise SystemExit(main())
