"""Prompt tuning with anchor-guided gradient calibration.

Each step synthesizes an anomaly, scores it with the live prompts and with
the frozen anchor embeddings, and updates the prompts with the anomaly-loss
gradient. When that gradient points against the anchor-divergence gradient,
the conflicting component is removed (scaled by the guiding level). At the
end of each round the anchors are replaced by the current prompts.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import GradMap, Tensor, backward, clamp
from .corpus import Sample, derive_seed
from .encoder import Encoder, downsample_mask_any
from .prompts import (
    AnchorPair,
    PromptPair,
    ScoreMapPair,
    TextEncoder,
    score_maps,
)
from .synth import SynthSample, synthesize_anomaly

log = logging.getLogger(__name__)

LOSS_REGIONS = ("object-only", "all-pixels")


class NumericalError(Exception):
    """Training hit a non-finite value; carries the step seed for replay."""


@dataclass
class TrainConfig:
    guiding_level: float = 1.0
    learning_rate: float = 0.05
    steps_per_round: int = 100
    rounds: int = 5
    batch_size: int = 1
    sigma: float = 0.25
    k_shot: int = 1
    eps: float = 1e-6
    loss_region: str = "object-only"
    region_mode: str = "sub-region"
    temperature: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.guiding_level <= 1.0:
            raise ValueError(f"guiding_level must lie in [0, 1], got {self.guiding_level}")
        # learning_rate 0 is allowed as an explicit no-op probe
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0.0 < self.eps <= 0.01:
            raise ValueError(f"eps must lie in (0, 0.01], got {self.eps}")
        if self.loss_region not in LOSS_REGIONS:
            raise ValueError(
                f"unknown loss region {self.loss_region!r}; expected one of {LOSS_REGIONS}"
            )
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")

    def to_dict(self) -> dict:
        return {
            "guiding_level": self.guiding_level,
            "learning_rate": self.learning_rate,
            "steps_per_round": self.steps_per_round,
            "rounds": self.rounds,
            "batch_size": self.batch_size,
            "sigma": self.sigma,
            "k_shot": self.k_shot,
            "eps": self.eps,
            "loss_region": self.loss_region,
            "region_mode": self.region_mode,
            "temperature": self.temperature,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class StepRecord:
    round_index: int
    step: int
    loss_anomaly: float
    loss_div_normal: float
    loss_div_abnormal: float
    cos_normal: float
    cos_abnormal: float
    gated_normal: bool
    gated_abnormal: bool


@dataclass
class TrainState:
    prompts: PromptPair
    anchors: AnchorPair
    step_count: int = 0
    round_index: int = 0
    history: list[StepRecord] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Losses

def anomaly_losses(scores: ScoreMapPair, abnormal_cells: np.ndarray,
                   region_cells: np.ndarray, eps: float) -> tuple[Tensor, Tensor]:
    """Per-branch binary cross entropies over the region cells.

    abnormal_cells is the any-pixel-pooled abnormality mask at cell level; the
    normality mask is its exact complement so the two losses stay identical.
    """
    region = np.asarray(region_cells, dtype=np.float64).reshape(-1, 1)
    if region.sum() == 0:
        raise ValueError("empty loss region")
    m_a = np.asarray(abnormal_cells, dtype=np.float64).reshape(-1, 1)
    m_n = 1.0 - m_a

    s_n = clamp(scores.normal, eps, 1.0 - eps)
    s_a = clamp(scores.abnormal, eps, 1.0 - eps)
    loss_n = -(
        (Tensor(region * m_n) * T.log(s_n)).sum()
        + (Tensor(region * m_a) * T.log(1.0 - s_n)).sum()
    )
    loss_a = -(
        (Tensor(region * m_a) * T.log(s_a)).sum()
        + (Tensor(region * m_n) * T.log(1.0 - s_a)).sum()
    )
    return loss_n, loss_a


def _bernoulli_kl(p: np.ndarray, q: Tensor, eps: float) -> Tensor:
    p = np.clip(np.asarray(p, dtype=np.float64).reshape(-1, 1), eps, 1.0 - eps)
    qc = clamp(q, eps, 1.0 - eps)
    const = float((p * np.log(p) + (1.0 - p) * np.log(1.0 - p)).sum())
    cross = (Tensor(p) * T.log(qc)).sum() + (Tensor(1.0 - p) * T.log(1.0 - qc)).sum()
    return const - cross


def divergence_loss_normal(scores: ScoreMapPair, anchor_normal_map: np.ndarray,
                           eps: float) -> Tensor:
    """KL(anchor || live) on the normality channel, summed over all cells."""
    return _bernoulli_kl(anchor_normal_map, scores.normal, eps)


def divergence_loss_abnormal(scores: ScoreMapPair, anchor_abnormal_map: np.ndarray,
                             eps: float) -> Tensor:
    """KL(anchor || live) on the abnormality channel, summed over all cells."""
    return _bernoulli_kl(anchor_abnormal_map, scores.abnormal, eps)


def divergence_losses(scores: ScoreMapPair, anchor_scores: ScoreMapPair,
                      eps: float) -> tuple[Tensor, Tensor]:
    return (
        divergence_loss_normal(scores, anchor_scores.normal.data, eps),
        divergence_loss_abnormal(scores, anchor_scores.abnormal.data, eps),
    )


# ---------------------------------------------------------------------------
# Gradient calibration

def _flatten(grads: GradMap) -> np.ndarray:
    return grads.flat()


def grad_cosine(g_task: GradMap, g_guide: GradMap) -> float:
    a, d = _flatten(g_task), _flatten(g_guide)
    na, nd = np.linalg.norm(a), np.linalg.norm(d)
    if na == 0.0 or nd == 0.0:
        return 0.0
    return float(a @ d / (na * nd))


def calibrate_gradient(g_task: GradMap, g_guide: GradMap,
                       guiding_level: float) -> GradMap:
    """Remove the guide-conflicting component from the task gradient.

    When cos(task, guide) < 0, returns task - level * <task, guide_hat> *
    guide_hat, which leaves <calibrated, guide> = (1 - level) * <task, guide>.
    Otherwise the task gradient is returned untouched.
    """
    if not 0.0 <= guiding_level <= 1.0:
        raise ValueError(f"guiding_level must lie in [0, 1], got {guiding_level}")
    if set(g_task.keys()) != set(g_guide.keys()):
        raise ValueError("gradient maps cover different parameter sets")
    a, d = _flatten(g_task), _flatten(g_guide)
    if not (np.isfinite(a).all() and np.isfinite(d).all()):
        raise NumericalError("non-finite gradient passed to calibration")
    norm_d = np.linalg.norm(d)
    if norm_d == 0.0:
        return g_task
    norm_a = np.linalg.norm(a)
    if norm_a == 0.0 or a @ d >= 0.0:
        return g_task
    d_hat = d / norm_d
    calibrated = a - guiding_level * (a @ d_hat) * d_hat
    out, offset = {}, 0
    for key in sorted(g_task.keys()):
        g = g_task[key]
        n = g.data.size
        out[key] = Tensor(calibrated[offset : offset + n].reshape(g.data.shape))
        offset += n
    return GradMap(out)


# ---------------------------------------------------------------------------
# Anchors

ANCHOR_PASSES = 8


def initial_anchors(encoder: Encoder, train_samples: list[Sample],
                    config: TrainConfig) -> AnchorPair:
    """Data-grounded starting anchors.

    The normal anchor is the mean training-cell feature. The abnormal anchor
    is the least-variance unit direction of the pooled normal and
    noise-perturbed features: a direction the training data cannot explain,
    which makes the anchor score maps rank cells purely by their deviation
    from the normal prototype. Its sign is fixed toward the perturbed-cell
    mean so the construction is deterministic and noise-aligned.
    """
    patch = encoder.config.patch_size
    class_name = train_samples[0].class_name
    pooled = []
    normal_means = []
    for s in train_samples:
        flat = encoder.encode(s.image).flat()
        pooled.append(flat)
        normal_means.append(flat.mean(axis=0))
    normal_mean = np.mean(normal_means, axis=0)

    perturbed = []
    for i in range(ANCHOR_PASSES):
        seed = derive_seed(config.seed, "anchor-synth", class_name, i)
        synth = synthesize_anomaly(
            train_samples[i % len(train_samples)], config.sigma,
            region_mode=config.region_mode, seed=seed,
        )
        flat = encoder.encode(synth.image).flat()
        pooled.append(flat)
        cells = downsample_mask_any(synth.abnormal_mask, patch).reshape(-1) > 0
        perturbed.append(flat[cells])
    perturbed_mean = np.concatenate(perturbed, axis=0).mean(axis=0)

    stack = np.concatenate(pooled, axis=0)
    centered = stack - stack.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    abnormal = vt[-1]
    if abnormal @ (perturbed_mean - normal_mean) < 0:
        abnormal = -abnormal

    def unit(v):
        return v / max(float(np.linalg.norm(v)), 1e-30)

    return AnchorPair(
        normal=unit(normal_mean),
        abnormal=unit(abnormal),
        round_index=0,
        feature_mean=stack.mean(axis=0),
    )


def refresh_anchors(state: TrainState, text_encoder: TextEncoder) -> TrainState:
    """Install the current prompt embeddings as the new frozen anchors."""
    t_n, t_a = text_encoder.encode_pair_detached(state.prompts)
    state.anchors = AnchorPair(normal=t_n, abnormal=t_a,
                               round_index=state.anchors.round_index + 1)
    return state


WARM_START_SCALE = 30.0


def warm_start_prompts(prompts: PromptPair, text_encoder: TextEncoder,
                       anchors: AnchorPair, temperature: float = 10.0,
                       steps: int = 800, lr: float = 2.0) -> float:
    """Align the prompt embeddings with the anchors before tuning starts.

    Calibration can only veto updates that contradict the anchors; it never
    transports prompts toward them. A text encoder with real semantics would
    start meaningful prompts near its anchor prompts, so the stand-in earns
    the same starting point by fitting the anchors directly: a pooled-stream
    preimage of each anchor seeds the suffixes (at large magnitude the
    residual stream passes the inputs through almost linearly), and a
    gradient refinement absorbs the transformer's nonlinear offsets. The fit
    must be tight: the useful signal is a small slice of the embedding
    space, so even a one-in-a-thousand residual costs ranking quality.

    Returns the final alignment loss (2 - cos_n - cos_a).
    """
    w = text_encoder.out_proj.data
    length = prompts.config.prefix_len + 1 + prompts.config.normal_suffix_len
    others = (
        prompts.prefix.data.sum(axis=0)
        + prompts.class_token.data[0]
        + text_encoder.pos.data[:length].sum(axis=0)
    )
    for target, suffix in ((anchors.normal, prompts.normal_suffix),
                           (anchors.abnormal, prompts.abnormal_suffix)):
        if suffix.data.shape[0] == 0:
            continue
        pre = np.linalg.lstsq(w.T, target, rcond=None)[0]
        pooled = WARM_START_SCALE * pre / max(float(np.linalg.norm(pre)), 1e-30)
        n = suffix.data.shape[0]
        suffix.data = np.tile((length * pooled - others) / n, (n, 1))

    t_n_target = Tensor(anchors.normal)
    t_a_target = Tensor(anchors.abnormal)
    final = float("inf")
    velocity = {p.node_id: np.zeros_like(p.data) for p in prompts.parameters()}
    for i in range(steps):
        t_n, t_a = text_encoder.encode_pair(prompts)
        loss = 2.0 - (t_n * t_n_target).sum() - (t_a * t_a_target).sum()
        final = loss.item()
        grads = backward(loss)
        for p in prompts.parameters():
            g = grads.get(p)
            if g is not None:
                v = 0.9 * velocity[p.node_id] - lr * g.data
                velocity[p.node_id] = v
                p.data = p.data + v
    return final


# ---------------------------------------------------------------------------
# Training loop

class PromptTuner:
    """Single-class prompt tuning over a handful of normal samples."""

    def __init__(self, encoder: Encoder, text_encoder: TextEncoder,
                 train_samples: list[Sample], config: TrainConfig,
                 prompts: PromptPair | None = None,
                 anchors: AnchorPair | None = None):
        if not train_samples:
            raise ValueError("need at least one training sample")
        if any(s.label != 0 for s in train_samples):
            raise ValueError("training samples must all be normal (label 0)")
        self.encoder = encoder
        self.text_encoder = text_encoder
        self.samples = list(train_samples[: config.k_shot or len(train_samples)])
        self.config = config
        self.class_name = train_samples[0].class_name
        if prompts is None:
            raise ValueError("prompts must be provided")
        # guiding disabled means no meta influence at all: the run is plain
        # unguided prompt tuning from the seeded random initialization
        warm = anchors is None and config.guiding_level > 0.0
        self.state = TrainState(
            prompts=prompts,
            anchors=anchors if anchors is not None
            else initial_anchors(encoder, self.samples, config),
        )
        if warm:
            warm_start_prompts(prompts, text_encoder, self.state.anchors,
                               temperature=config.temperature)
        patch = encoder.config.patch_size
        self._object_cells = {
            id(s): downsample_mask_any(s.object_mask, patch) for s in self.samples
        }

    def _synth_for_step(self, round_index: int, step: int, index: int,
                        sample: Sample) -> tuple[SynthSample, int]:
        seed = derive_seed(
            self.config.seed, "synth", self.class_name, round_index, step, index
        )
        return (
            synthesize_anomaly(
                sample, self.config.sigma, region_mode=self.config.region_mode, seed=seed
            ),
            seed,
        )

    def _region_cells(self, sample: Sample) -> np.ndarray:
        if self.config.loss_region == "object-only":
            return self._object_cells[id(sample)]
        return np.ones_like(self._object_cells[id(sample)])

    def _batch(self, round_index: int, step: int):
        """Deterministic sample rotation; batch_size items per step."""
        n = len(self.samples)
        base = (round_index * self.config.steps_per_round + step) * self.config.batch_size
        return [self.samples[(base + i) % n] for i in range(self.config.batch_size)]

    def train_step(self, round_index: int, step: int) -> StepRecord:
        cfg = self.config
        batch = self._batch(round_index, step)
        prepared = []
        for i, sample in enumerate(batch):
            synth, seed = self._synth_for_step(round_index, step, i, sample)
            fm = self.encoder.encode(synth.image)
            features = Tensor(fm.flat())
            a_cells = downsample_mask_any(
                synth.abnormal_mask, self.encoder.config.patch_size
            )
            region = self._region_cells(sample)
            anchor_sc = score_maps(
                features,
                Tensor(self.state.anchors.normal),
                Tensor(self.state.anchors.abnormal),
                cfg.temperature,
            )
            prepared.append((features, a_cells, region, anchor_sc, seed))

        def live_scores():
            t_n, t_a = self.text_encoder.encode_pair(self.state.prompts)
            return [
                score_maps(features, t_n, t_a, cfg.temperature)
                for features, *_ in prepared
            ]

        # anomaly pass: with complement masks and softmax pairing the two
        # branch losses are one identical scalar, so a single backward
        # provides both branches' slices; equality is asserted every step
        loss_n_total, loss_a_total = None, None
        for sc, (features, a_cells, region, anchor_sc, seed) in zip(live_scores(), prepared):
            ln, la = anomaly_losses(sc, a_cells, region, cfg.eps)
            loss_n_total = ln if loss_n_total is None else loss_n_total + ln
            loss_a_total = la if loss_a_total is None else loss_a_total + la
        loss_ano_n = loss_n_total.item()
        loss_ano_a = loss_a_total.item()
        self._check_finite(loss_ano_n, prepared)
        if abs(loss_ano_n - loss_ano_a) > 1e-9 * max(1.0, abs(loss_ano_n)):
            raise NumericalError(
                f"branch anomaly losses diverged: {loss_ano_n} vs {loss_ano_a}"
            )
        g_ano = backward(loss_n_total)

        # divergence passes: one graph per channel
        div_n_total = None
        for sc, (features, a_cells, region, anchor_sc, seed) in zip(live_scores(), prepared):
            d = divergence_loss_normal(sc, anchor_sc.normal.data, cfg.eps)
            div_n_total = d if div_n_total is None else div_n_total + d
        loss_div_n = div_n_total.item()
        self._check_finite(loss_div_n, prepared)
        g_div_n = backward(div_n_total)

        div_a_total = None
        for sc, (features, a_cells, region, anchor_sc, seed) in zip(live_scores(), prepared):
            d = divergence_loss_abnormal(sc, anchor_sc.abnormal.data, cfg.eps)
            div_a_total = d if div_a_total is None else div_a_total + d
        loss_div_a = div_a_total.item()
        self._check_finite(loss_div_a, prepared)
        g_div_a = backward(div_a_total)

        prompts = self.state.prompts
        branch_n = prompts.normal_parameters()
        branch_a = prompts.abnormal_parameters()
        task_n, guide_n = g_ano.subset(branch_n), g_div_n.subset(branch_n)
        task_a, guide_a = g_ano.subset(branch_a), g_div_a.subset(branch_a)
        cos_n = grad_cosine(task_n, guide_n)
        cos_a = grad_cosine(task_a, guide_a)
        cal_n = calibrate_gradient(task_n, guide_n, cfg.guiding_level)
        cal_a = calibrate_gradient(task_a, guide_a, cfg.guiding_level)

        lr = cfg.learning_rate
        prompts.prefix.data = prompts.prefix.data - lr * (
            cal_n[prompts.prefix].data + cal_a[prompts.prefix].data
        )
        prompts.normal_suffix.data = (
            prompts.normal_suffix.data - lr * cal_n[prompts.normal_suffix].data
        )
        prompts.abnormal_suffix.data = (
            prompts.abnormal_suffix.data - lr * cal_a[prompts.abnormal_suffix].data
        )

        record = StepRecord(
            round_index=round_index,
            step=step,
            loss_anomaly=loss_ano_n,
            loss_div_normal=loss_div_n,
            loss_div_abnormal=loss_div_a,
            cos_normal=cos_n,
            cos_abnormal=cos_a,
            gated_normal=cos_n < 0.0,
            gated_abnormal=cos_a < 0.0,
        )
        self.state.history.append(record)
        self.state.step_count += 1
        return record

    def _check_finite(self, value: float, prepared) -> None:
        if not np.isfinite(value):
            seeds = [p[-1] for p in prepared]
            raise NumericalError(
                f"non-finite loss at class {self.class_name!r}; synthesis seeds {seeds}"
            )

    def train_round(self) -> None:
        r = self.state.round_index
        for step in range(self.config.steps_per_round):
            self.train_step(r, step)
        self.state.round_index += 1

    def run(self) -> TrainState:
        """Full schedule: rounds of tuning with anchor refreshes in between."""
        for r in range(self.config.rounds):
            self.train_round()
            if r < self.config.rounds - 1:
                refresh_anchors(self.state, self.text_encoder)
        return self.state
