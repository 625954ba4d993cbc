"""Acc@mIoU evaluation with unique/multiple and easy/hard splits, the
paragraph-length sweep, and the beam-search dense baseline."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from .config import RunConfig, add_config_arguments, config_from_args
from .geometry import iou3d
from .model import GroundingModel
from .training import (
    Batch,
    add_ablation_arguments,
    apply_ablation_flags,
    collate,
    load_trained_model,
)
from .world import (
    RELATIONS,
    GroundingDataset,
    build_paragraphs,
    difficulty_tags,
    load_dataset,
    split_tags,
)

logger = logging.getLogger(__name__)

SPLITS = ("overall", "unique", "multiple", "easy", "hard")
BASELINES = ("none", "beam-search")
_BOX_FIELDS = ("cx", "cy", "cz", "sx", "sy", "sz")
_SWEEP_CODE = 2


def acc_at_iou(ious: Sequence[float] | np.ndarray, m: float) -> float:
    """Fraction of IoU values strictly greater than ``m``."""

    values = np.asarray(ious, dtype=float)
    if values.size == 0:
        raise ValueError("acc_at_iou needs at least one prediction")
    return float(np.count_nonzero(values > m)) / values.size


def box_ious(preds: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Row-wise IoU of aligned ``(n, 6)`` box arrays."""

    preds = np.asarray(preds, dtype=float).reshape(-1, 6)
    gts = np.asarray(gts, dtype=float).reshape(-1, 6)
    if preds.shape != gts.shape:
        raise ValueError(f"predictions {preds.shape} and ground truth {gts.shape} are not aligned")
    if len(preds) == 0:
        return np.zeros(0)
    return iou3d(torch.as_tensor(preds), torch.as_tensor(gts)).numpy()


# --------------------------------------------------------------------------
# beam search


@dataclass(frozen=True)
class BeamResult:
    choices: tuple[int, ...]
    boxes: np.ndarray
    spread: float
    score: float


def center_spread(centers: np.ndarray) -> float:
    """Trace of the population covariance of ``(n, 3)`` centers."""

    return float(np.var(np.asarray(centers, dtype=float), axis=0).sum())


def _rank_key(choices: tuple[int, ...], boxes: np.ndarray, scores: np.ndarray) -> tuple:
    return (center_spread(boxes[:, :3]), -float(scores.sum()), choices)


def beam_search_baseline(
    candidates: Sequence[Sequence[tuple[np.ndarray, float]]],
    beam: int,
) -> BeamResult:
    """Pick one candidate box per sentence so the chosen centers are most concentrated.

    Sentences are visited in order; after each one the ``beam`` partial
    assignments with the smallest center spread survive. Ties go to the larger
    score sum, then to the lexicographically smaller candidate indices.
    """

    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    if len(candidates) == 0:
        raise ValueError("beam search needs candidates for at least one sentence")
    boxes_per = []
    scores_per = []
    for k, options in enumerate(candidates):
        if len(options) == 0:
            raise ValueError(f"sentence {k} has no candidates")
        boxes_per.append(np.stack([np.asarray(box, dtype=float) for box, _ in options]))
        scores_per.append(np.asarray([float(score) for _, score in options]))

    beams: list[tuple[int, ...]] = [()]
    for k in range(len(candidates)):
        expanded = []
        for partial in beams:
            for option in range(len(boxes_per[k])):
                choices = partial + (option,)
                boxes, scores = _gather(choices, boxes_per, scores_per)
                expanded.append((_rank_key(choices, boxes, scores), choices))
        expanded.sort(key=lambda item: item[0])
        beams = [choices for _, choices in expanded[:beam]]

    best = beams[0]
    boxes, scores = _gather(best, boxes_per, scores_per)
    return BeamResult(choices=best, boxes=boxes, spread=center_spread(boxes[:, :3]), score=float(scores.sum()))


def exhaustive_assignment(candidates: Sequence[Sequence[tuple[np.ndarray, float]]]) -> BeamResult:
    """Brute-force minimum over every assignment, ranked like :func:`beam_search_baseline`."""

    boxes_per = [np.stack([np.asarray(b, dtype=float) for b, _ in options]) for options in candidates]
    scores_per = [np.asarray([float(s) for _, s in options]) for options in candidates]
    best_key, best = None, None
    for choices in itertools.product(*(range(len(b)) for b in boxes_per)):
        boxes, scores = _gather(choices, boxes_per, scores_per)
        key = _rank_key(tuple(choices), boxes, scores)
        if best_key is None or key < best_key:
            best_key, best = key, tuple(choices)
    boxes, scores = _gather(best, boxes_per, scores_per)
    return BeamResult(choices=best, boxes=boxes, spread=center_spread(boxes[:, :3]), score=float(scores.sum()))


def _gather(
    choices: Sequence[int],
    boxes_per: Sequence[np.ndarray],
    scores_per: Sequence[np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    boxes = np.stack([boxes_per[k][c] for k, c in enumerate(choices)])
    scores = np.asarray([scores_per[k][c] for k, c in enumerate(choices)])
    return boxes, scores


def slot_candidates(
    slot_boxes: torch.Tensor,
    slot_features: torch.Tensor,
    length: int,
    width: int,
) -> list[tuple[np.ndarray, float]]:
    """Top-``width`` boxes of one sentence's slots, scored by cosine similarity
    to the sentence slot (which scores exactly 1)."""

    n = length + 1
    feats = slot_features[:n].detach()
    scores = F.cosine_similarity(feats, feats[:1].expand_as(feats), dim=-1).double()
    scores[0] = 1.0
    order = sorted(range(n), key=lambda j: (-float(scores[j]), j))[:width]
    boxes = slot_boxes[:n].detach().double().numpy()
    return [(boxes[j], float(scores[j])) for j in order]


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    """Accuracies for one paragraph length; ``None`` marks an empty split."""

    k: int
    method: str
    thresholds: tuple[float, ...]
    counts: dict[str, int]
    hits: dict[str, dict[float, int]]
    seed: int
    config_hash: str
    num_paragraphs: int
    fallback_sentences: int = 0

    def accuracy(self, split: str, threshold: float) -> Optional[float]:
        count = self.counts[split]
        if count == 0:
            return None
        return self.hits[split][threshold] / count

    def to_lines(self) -> list[str]:
        lines = [
            f"k = {self.k}",
            f"method = {self.method}",
            f"seed = {self.seed}",
            f"config_hash = {self.config_hash}",
            f"paragraphs = {self.num_paragraphs}",
            f"fallback_sentences = {self.fallback_sentences}",
        ]
        for split in SPLITS:
            lines.append(f"count.{split} = {self.counts[split]}")
        for split in SPLITS:
            for m in self.thresholds:
                value = self.accuracy(split, m)
                text = "nan" if value is None else f"{value:.6f}"
                lines.append(f"acc@{m:g}.{split} = {text}")
        return lines

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "method": self.method,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "paragraphs": self.num_paragraphs,
            "fallback_sentences": self.fallback_sentences,
            "thresholds": list(self.thresholds),
            "counts": dict(self.counts),
            "accuracy": {
                split: {f"{m:g}": self.accuracy(split, m) for m in self.thresholds} for split in SPLITS
            },
        }


@dataclass
class EvalResult:
    reports: list[EvalReport]
    predictions: pd.DataFrame

    def sweep_table(self) -> pd.DataFrame:
        rows = []
        for report in self.reports:
            for split in SPLITS:
                for m in report.thresholds:
                    value = report.accuracy(split, m)
                    rows.append(
                        {
                            "k": report.k,
                            "split": split,
                            "threshold": m,
                            "accuracy": math.nan if value is None else value,
                        }
                    )
        return pd.DataFrame(rows, columns=["k", "split", "threshold", "accuracy"])


def format_reports(reports: Sequence[EvalReport]) -> str:
    sections = []
    for report in reports:
        sections.append("\n".join([f"[k={report.k}]", *report.to_lines()]))
    return "\n\n".join(sections) + "\n"


def paragraphs_for_k(dataset: GroundingDataset, k: int, *, paragraphs_per_scene: int) -> GroundingDataset:
    """Evaluation paragraphs of length ``k`` drawn from the dataset's scenes."""

    rng = np.random.default_rng(np.random.SeedSequence([dataset.seed, _SWEEP_CODE, k]))
    samples = build_paragraphs(
        dataset.scenes,
        k,
        rng,
        vocab=dataset.vocab,
        config=dataset.config,
        paragraphs_per_scene=paragraphs_per_scene,
    )
    return replace(dataset, samples=samples)


def sentence_candidates(
    model: GroundingModel,
    batch: Batch,
    width: int,
) -> list[list[list[tuple[np.ndarray, float]]]]:
    """Beam-search candidates per sample and sentence, each sentence grounded alone.

    The model runs at stage 1 (contextual queries bypassed, no global
    refinement) and is put back to its stage afterwards.
    """

    stage = model.stage
    model.set_stage(1)
    try:
        with torch.no_grad():
            output = model(batch.points, batch.tokens, batch.lengths, batch.valid)
    finally:
        model.set_stage(stage)
    result = []
    for row in range(batch.tokens.shape[0]):
        k = int(batch.valid[row].sum())
        result.append(
            [
                slot_candidates(
                    output.local.slot_boxes[row, s],
                    output.local.slot_features[row, s],
                    int(batch.lengths[row, s]),
                    width,
                )
                for s in range(k)
            ]
        )
    return result


def _predict(
    model: GroundingModel,
    dataset: GroundingDataset,
    cfg: RunConfig,
    *,
    baseline: str,
) -> list[np.ndarray]:
    """Per-sample ``(k, 6)`` predicted boxes for the valid sentences."""

    model.eval()
    predictions: list[np.ndarray] = []
    n = len(dataset.samples)
    for start in range(0, n, cfg.eval.batch_size):
        indices = list(range(start, min(start + cfg.eval.batch_size, n)))
        batch = collate(dataset, indices)
        if baseline == "beam-search":
            for candidates in sentence_candidates(model, batch, cfg.eval.beam_width):
                predictions.append(beam_search_baseline(candidates, cfg.eval.beam_size).boxes)
            continue
        with torch.no_grad():
            output = model(batch.points, batch.tokens, batch.lengths, batch.valid)
        for row, index in enumerate(indices):
            k = dataset.samples[index].k
            predictions.append(output.final_boxes[row, :k].double().numpy())
    return predictions


def evaluate(
    model: GroundingModel,
    dataset: GroundingDataset,
    cfg: RunConfig,
    *,
    k_list: Optional[Sequence[int]] = None,
    baseline: str = "none",
) -> EvalResult:
    """Accuracy reports for every paragraph length in ``k_list``.

    Paragraphs are rebuilt from the evaluation scenes for each ``k`` with a
    seed derived from the dataset seed, so repeated runs give identical
    reports.
    """

    if baseline not in BASELINES:
        raise ValueError(f"baseline must be one of {BASELINES}, got {baseline!r}")
    k_values = tuple(k_list) if k_list is not None else tuple(cfg.eval.k_list)
    if not k_values:
        raise ValueError("k_list is empty")
    method = "model" if baseline == "none" else baseline
    thresholds = tuple(float(m) for m in cfg.eval.thresholds)

    reports = []
    frames = []
    for k in k_values:
        ds = paragraphs_for_k(dataset, int(k), paragraphs_per_scene=cfg.eval.paragraphs_per_scene)
        if not ds.samples:
            raise ValueError(f"no evaluation paragraphs for k={k}")
        preds = _predict(model, ds, cfg, baseline=baseline)
        uniq = split_tags(ds)
        diff = difficulty_tags(ds)

        rows = []
        for j, sample in enumerate(ds.samples):
            scene = ds.scenes[sample.scene_index]
            targets = sample.targets[: sample.k]
            gts = scene.boxes[targets]
            ious = box_ious(preds[j], gts)
            for slot in range(sample.k):
                rows.append(
                    {
                        "k": int(k),
                        "sample": j,
                        "slot": slot,
                        "scene_id": scene.scene_id,
                        "target": int(targets[slot]),
                        "relation": RELATIONS[int(sample.relations[slot])],
                        "fallback": bool(sample.fallback[slot]),
                        "uniqueness": uniq[j][slot],
                        "difficulty": diff[j][slot],
                        "iou": float(ious[slot]),
                        **{f"pred_{n}": float(v) for n, v in zip(_BOX_FIELDS, preds[j][slot])},
                        **{f"gt_{n}": float(v) for n, v in zip(_BOX_FIELDS, gts[slot])},
                    }
                )
        table = pd.DataFrame(rows)
        frames.append(table)

        masks = {
            "overall": np.ones(len(table), dtype=bool),
            "unique": (table["uniqueness"] == "unique").to_numpy(),
            "multiple": (table["uniqueness"] == "multiple").to_numpy(),
            "easy": (table["difficulty"] == "easy").to_numpy(),
            "hard": (table["difficulty"] == "hard").to_numpy(),
        }
        ious_all = table["iou"].to_numpy()
        counts = {split: int(mask.sum()) for split, mask in masks.items()}
        hits = {
            split: {m: int(np.count_nonzero(ious_all[mask] > m)) for m in thresholds}
            for split, mask in masks.items()
        }
        report = EvalReport(
            k=int(k),
            method=method,
            thresholds=thresholds,
            counts=counts,
            hits=hits,
            seed=cfg.seed,
            config_hash=cfg.config_hash(),
            num_paragraphs=len(ds.samples),
            fallback_sentences=int(table["fallback"].sum()),
        )
        reports.append(report)
        logger.info(
            "k=%d %s: acc@%g overall %.4f over %d sentences",
            k,
            method,
            thresholds[0],
            report.accuracy("overall", thresholds[0]) or 0.0,
            counts["overall"],
        )
    return EvalResult(reports=reports, predictions=pd.concat(frames, ignore_index=True))


def write_eval_outputs(result: EvalResult, out_dir: str | Path) -> dict[str, Path]:
    from .plotting import plot_k_sweep

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "eval_report.txt",
        "report_json": out / "eval_report.json",
        "predictions": out / "predictions.csv",
        "k_sweep": out / "k_sweep.png",
    }
    paths["report"].write_text(format_reports(result.reports), encoding="utf-8")
    paths["report_json"].write_text(
        json.dumps({"reports": [r.to_dict() for r in result.reports]}, indent=2),
        encoding="utf-8",
    )
    result.predictions.to_csv(paths["predictions"], index=False, float_format="%.6f")
    plot_k_sweep(result.sweep_table(), paths["k_sweep"])
    return paths


# --------------------------------------------------------------------------
# CLI


def parse_k_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--k-sweep expects comma-separated integers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("--k-sweep is empty")
    return values


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="musubi-eval", description="Evaluate a checkpoint on the eval split.")
    add_config_arguments(parser)
    parser.add_argument("--ckpt", required=True, help="Checkpoint to evaluate")
    parser.add_argument("--data", default=None, help="Directory holding eval.musubi (default: --out)")
    parser.add_argument("--k-sweep", type=parse_k_list, default=None, help="Paragraph lengths, e.g. 2,4,8,12")
    parser.add_argument("--baseline", choices=BASELINES, default="none")
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
        dataset = load_dataset(data_dir / "eval.musubi")
        model, checkpoint = load_trained_model(cfg, args.ckpt)
        result = evaluate(model, dataset, cfg, k_list=args.k_sweep, baseline=args.baseline)
        paths = write_eval_outputs(result, out_dir)
        write_manifest(
            out_dir / "eval_manifest.json",
            {
                "status": "ok",
                "seed": cfg.seed,
                "config_hash": cfg.config_hash(),
                "config": cfg.to_dict(),
                "baseline": args.baseline,
                "k_list": [r.k for r in result.reports],
                "checkpoint": {"path": str(args.ckpt), "stage": checkpoint.stage, "step": checkpoint.step},
                "artifacts": {
                    name: {"path": str(p), "sha256": sha256_file(p)} for name, p in paths.items()
                },
            },
        )
        return 0

    return run_step(body)


if __name__ == "__main__":
    raise SystemExit(main())
