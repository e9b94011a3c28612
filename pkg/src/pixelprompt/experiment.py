"""End-to-end runs: train prompts per class, evaluate, run ablation suites."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, default_test_per_kind
from .corpus import (
    ANOMALY_KINDS,
    CorpusSpec,
    Sample,
    TEXTURE_CLASSES,
    build_samples,
    derive_seed,
    gen_test,
)
from .encoder import Encoder
from .evaluate import EvalReport, build_report, evaluate_class
from .prompts import AnchorPair, PromptConfig, PromptPair, TextEncoder, save_checkpoint
from .trainer import PromptTuner, TrainState


log = logging.getLogger(__name__)


def make_encoder(cfg: RunConfig) -> Encoder:
    return Encoder(cfg.encoder)


def make_text_encoder(cfg: RunConfig) -> TextEncoder:
    return TextEncoder(cfg.prompt)


def train_samples_for(cfg: RunConfig, class_name: str) -> list[Sample]:
    from .corpus import gen_normal

    return [
        gen_normal(
            class_name,
            derive_seed(cfg.seed, "train", class_name, i),
            size=cfg.image_size,
        )
        for i in range(cfg.train.k_shot)
    ]


def test_samples_for(cfg: RunConfig, class_name: str) -> list[Sample]:
    samples = []
    for kind in ANOMALY_KINDS:
        for i in range(cfg.test_per_kind):
            seed = derive_seed(cfg.seed, "test", class_name, kind, i)
            samples.append(gen_test(class_name, seed, kind, size=cfg.image_size))
    return samples


def train_class(cfg: RunConfig, class_name: str,
                encoder: Encoder | None = None,
                text_encoder: TextEncoder | None = None,
                train_samples: list[Sample] | None = None) -> tuple[TrainState, Encoder, TextEncoder]:
    """Train one class's prompts from scratch under the given run config."""
    encoder = encoder or make_encoder(cfg)
    text_encoder = text_encoder or make_text_encoder(cfg)
    samples = train_samples if train_samples is not None else train_samples_for(cfg, class_name)
    prompts = PromptPair(cfg.prompt, class_name)
    tuner = PromptTuner(encoder, text_encoder, samples, cfg.train, prompts=prompts)
    state = tuner.run()
    return state, encoder, text_encoder


def run_class(cfg: RunConfig, class_name: str,
              encoder: Encoder | None = None,
              text_encoder: TextEncoder | None = None) -> float:
    """Train then evaluate one class; returns its pixel AUROC."""
    state, encoder, text_encoder = train_class(cfg, class_name, encoder, text_encoder)
    tests = test_samples_for(cfg, class_name)
    auroc, _, _ = evaluate_class(
        encoder, text_encoder, state.prompts, cfg.train.temperature, tests
    )
    return auroc


def train_all(cfg: RunConfig, out_dir: Path) -> dict[str, Path]:
    """Train every configured class and write one checkpoint per class."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder = make_encoder(cfg)
    text_encoder = make_text_encoder(cfg)
    paths: dict[str, Path] = {}
    for class_name in cfg.classes:
        state, _, _ = train_class(cfg, class_name, encoder, text_encoder)
        path = out_dir / f"{class_name}.ckpt"
        save_checkpoint(
            path,
            state.prompts,
            state.anchors,
            extra={"run_config": cfg.to_dict(), "class_name": class_name},
        )
        _write_history(out_dir / f"{class_name}.history.csv", state)
        paths[class_name] = path
        log.info("trained %s (%d steps)", class_name, state.step_count)
    return paths


def _write_history(path: Path, state: TrainState) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["round", "step", "loss_anomaly", "loss_div_normal", "loss_div_abnormal",
             "cos_normal", "cos_abnormal", "gated_normal", "gated_abnormal"]
        )
        for r in state.history:
            writer.writerow(
                [r.round_index, r.step, f"{r.loss_anomaly:.9g}",
                 f"{r.loss_div_normal:.9g}", f"{r.loss_div_abnormal:.9g}",
                 f"{r.cos_normal:.9g}", f"{r.cos_abnormal:.9g}",
                 int(r.gated_normal), int(r.gated_abnormal)]
            )


def evaluate_corpus(cfg: RunConfig, checkpoints: dict[str, "PromptPair | Path"],
                    test_sets: dict[str, list[Sample]],
                    out_dir: Path | None = None,
                    dump_maps: bool = False) -> EvalReport:
    """Evaluate per-class checkpoints against per-class test samples."""
    from .prompts import load_checkpoint

    started = time.time()
    encoder = make_encoder(cfg)
    text_encoder = make_text_encoder(cfg)
    per_class: dict[str, float] = {}
    map_files: list[str] = []
    skipped = 0
    for class_name in sorted(test_sets):
        ckpt = checkpoints.get(class_name)
        if ckpt is None:
            log.warning("no checkpoint for class %s; skipped", class_name)
            skipped += len(test_sets[class_name])
            continue
        if isinstance(ckpt, (str, Path)):
            prompts, _, header = load_checkpoint(ckpt)
        else:
            prompts = ckpt
        dump_dir = (Path(out_dir) / "maps") if (dump_maps and out_dir) else None
        auroc, files, skip = evaluate_class(
            encoder, text_encoder, prompts, cfg.train.temperature,
            test_sets[class_name], dump_dir=dump_dir,
        )
        per_class[class_name] = auroc
        map_files.extend(files)
        skipped += skip
    report = build_report(per_class, cfg.to_dict(), map_files, skipped, started)
    if out_dir is not None:
        from .evaluate import write_report

        write_report(report, Path(out_dir))
    return report


# ---------------------------------------------------------------------------
# Ablation suites

ABLATION_SUITES = ("lambda", "oagm", "attention")

# smaller class lists keep the shared-seed sweeps tractable; the oagm suite
# needs both object and texture classes for its two directional claims
ABLATION_CLASSES = {
    "lambda": ("disk", "square-striped", "texture-checker"),
    "oagm": ("disk", "square", "texture-stripes", "texture-checker"),
    "attention": ("disk", "square-striped", "texture-checker"),
}


def _arm_configs(suite: str, base: RunConfig) -> dict[str, RunConfig]:
    if suite == "lambda":
        return {
            f"lambda={lam:g}": replace(base, train=replace(base.train, guiding_level=lam))
            for lam in (0.0, 0.5, 1.0)
        }
    if suite == "oagm":
        return {
            "object-noise": replace(base, train=replace(base.train, region_mode="sub-region")),
            "frame-noise": replace(base, train=replace(base.train, region_mode="whole-image")),
        }
    if suite == "attention":
        return {
            variant: replace(base, encoder=replace(base.encoder, variant=variant))
            for variant in ("vv", "qk-local", "vv-local")
        }
    raise ValueError(f"unknown ablation suite {suite!r}; expected one of {ABLATION_SUITES}")


def run_ablation(suite: str, base: RunConfig, out_dir: Path | None = None,
                 classes: tuple[str, ...] | None = None) -> dict:
    """Shared-seed sweep over one ablated axis plus directional checks."""
    arms = _arm_configs(suite, base)
    classes = classes or ABLATION_CLASSES[suite]
    rows: list[tuple[str, int, str, float]] = []
    arm_scores: dict[str, list[float]] = {name: [] for name in arms}
    arm_class_scores: dict[str, dict[str, list[float]]] = {
        name: {c: [] for c in classes} for name in arms
    }
    for arm_name, arm_cfg in arms.items():
        for seed in base.seeds:
            cfg = arm_cfg.with_seed(seed)
            encoder = make_encoder(cfg)
            text_encoder = make_text_encoder(cfg)
            for class_name in classes:
                auroc = run_class(cfg, class_name, encoder, text_encoder)
                rows.append((arm_name, seed, class_name, auroc))
                arm_scores[arm_name].append(auroc)
                arm_class_scores[arm_name][class_name].append(auroc)

    means = {name: float(np.mean(scores)) for name, scores in arm_scores.items()}
    summary: dict = {"suite": suite, "means": means, "classes": list(classes),
                     "seeds": list(base.seeds)}

    def class_kind_mean(arm: str, kinds: tuple[str, ...]) -> float:
        pools = [
            v for c, vals in arm_class_scores[arm].items() if (c in kinds) == True
            for v in vals
        ]
        return float(np.mean(pools)) if pools else float("nan")

    if suite == "lambda":
        gap = means["lambda=1"] - means["lambda=0"]
        summary["gaps"] = {"lambda=1-minus-lambda=0": gap}
        summary["checks"] = {"guiding-helps": bool(gap >= 0.03)}
    elif suite == "oagm":
        object_classes = tuple(c for c in classes if c not in TEXTURE_CLASSES)
        texture_classes = tuple(c for c in classes if c in TEXTURE_CLASSES)

        def kind_mean(arm, kinds):
            pools = [v for c in kinds for v in arm_class_scores[arm][c]]
            return float(np.mean(pools)) if pools else float("nan")

        obj_gap = kind_mean("object-noise", object_classes) - kind_mean(
            "frame-noise", object_classes
        )
        tex_gap = kind_mean("object-noise", texture_classes) - kind_mean(
            "frame-noise", texture_classes
        )
        summary["gaps"] = {"object-classes": obj_gap, "texture-classes": tex_gap}
        summary["checks"] = {
            "object-noise-helps-objects": bool(obj_gap >= 0.02),
            "textures-indifferent": bool(abs(tex_gap) < 0.02),
        }
    else:  # attention
        gap_local = means["vv-local"] - means["qk-local"]
        gap_qk = means["qk-local"] - means["vv"]
        summary["gaps"] = {
            "vv-local-minus-qk-local": gap_local,
            "qk-local-minus-vv": gap_qk,
        }
        summary["checks"] = {
            "vv-local-over-qk-local": bool(gap_local >= -0.01),
            "qk-local-over-vv": bool(gap_qk >= -0.01),
        }
    summary["pass"] = all(summary["checks"].values())

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["arm", "seed", "class", "auroc"])
            for arm_name, seed, class_name, auroc in rows:
                writer.writerow([arm_name, seed, class_name, f"{auroc:.6f}"])
            for name, value in means.items():
                writer.writerow([f"mean:{name}", "-", "-", f"{value:.6f}"])
            for name, value in summary["gaps"].items():
                writer.writerow([f"gap:{name}", "-", "-", f"{value:.6f}"])
            for name, ok in summary["checks"].items():
                writer.writerow([f"check:{name}", "-", "-", "pass" if ok else "fail"])
        (out_dir / "ablation_summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True)
        )
    summary["rows"] = rows
    return summary
