"""Pixel-level AUROC evaluation and report writing."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor
from .corpus import Sample, image_to_u8, write_pgm
from .encoder import Encoder
from .prompts import AnchorPair, PromptPair, TextEncoder, score_maps, upsample_scores

log = logging.getLogger(__name__)


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pixel_auroc(scores: np.ndarray, truth: np.ndarray) -> float:
    """Rank-based AUROC (Mann-Whitney normalization) over pooled pixels."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel()
    if scores.shape != truth.shape:
        raise ValueError(f"scores {scores.shape} and truth {truth.shape} differ in size")
    pos = truth > 0
    n_pos = int(pos.sum())
    n_neg = int(len(truth) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"AUROC needs both classes in the pixel pool (got {n_pos} positive, {n_neg} negative)"
        )
    ranks = average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    per_class: dict[str, float]
    mean_auroc: float
    config: dict
    map_files: list[str] = field(default_factory=list)
    skipped: int = 0
    wall_clock_sec: float = 0.0

    def to_dict(self) -> dict:
        return {
            "per_class": self.per_class,
            "mean_auroc": self.mean_auroc,
            "config": self.config,
            "map_files": self.map_files,
            "skipped": self.skipped,
            "wall_clock_sec": self.wall_clock_sec,
        }


def score_sample(encoder: Encoder, t_normal: np.ndarray, t_abnormal: np.ndarray,
                 temperature: float, sample: Sample) -> np.ndarray:
    """Pixel-resolution abnormality scores for one image."""
    fm = encoder.encode(sample.image)
    sc = score_maps(fm, Tensor(t_normal), Tensor(t_abnormal), temperature)
    return upsample_scores(sc.abnormal_map(), encoder.config.patch_size)


def evaluate_class(encoder: Encoder, text_encoder: TextEncoder, prompts: PromptPair,
                   temperature: float, test_samples: list[Sample],
                   dump_dir: Path | None = None) -> tuple[float, list[str], int]:
    """Pooled pixel AUROC over every test sample of one class."""
    t_n, t_a = text_encoder.encode_pair_detached(prompts)
    pooled_scores, pooled_truth = [], []
    map_files, skipped = [], 0
    for idx, sample in enumerate(test_samples):
        if sample.anomaly_mask is None:
            log.warning("sample %d of class %s has no anomaly mask; skipped",
                        idx, sample.class_name)
            skipped += 1
            continue
        pixel_scores = score_sample(encoder, t_n, t_a, temperature, sample)
        pooled_scores.append(pixel_scores.ravel())
        pooled_truth.append(sample.anomaly_mask.ravel())
        if dump_dir is not None:
            dump_dir.mkdir(parents=True, exist_ok=True)
            name = f"{sample.class_name}_{idx}_{sample.seed}.score.pgm"
            write_pgm(dump_dir / name, image_to_u8(pixel_scores))
            map_files.append(str(dump_dir / name))
    if not pooled_scores:
        raise ValueError(f"no scorable test samples for class {test_samples[0].class_name!r}")
    auroc = pixel_auroc(np.concatenate(pooled_scores), np.concatenate(pooled_truth))
    return auroc, map_files, skipped


def write_report(report: EvalReport, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "auroc"])
        for name in sorted(report.per_class):
            writer.writerow([name, f"{report.per_class[name]:.6f}"])
        writer.writerow(["mean", f"{report.mean_auroc:.6f}"])
    return path


def build_report(per_class: dict[str, float], config: dict,
                 map_files: list[str], skipped: int, started: float) -> EvalReport:
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return EvalReport(
        per_class={k: float(v) for k, v in per_class.items()},
        mean_auroc=mean,
        config=config,
        map_files=map_files,
        skipped=skipped,
        wall_clock_sec=time.time() - started,
    )
