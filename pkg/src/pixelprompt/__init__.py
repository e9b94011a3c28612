"""Learnable-prompt pixel-wise anomaly detection on a procedural toy corpus."""

from .tensor import GradMap, Tensor, backward, finite_diff_check
from .corpus import CorpusSpec, Sample, gen_normal, gen_test, read_corpus, write_corpus
from .synth import SynthSample, estimate_object_mask, synthesize_anomaly
from .encoder import Encoder, EncoderConfig, FeatureMap, build_locality_mask
from .prompts import (
    AnchorPair,
    PromptConfig,
    PromptPair,
    ScoreMapPair,
    TextEncoder,
    load_checkpoint,
    save_checkpoint,
    score_maps,
    upsample_scores,
)
from .trainer import (
    NumericalError,
    PromptTuner,
    TrainConfig,
    TrainState,
    anomaly_losses,
    calibrate_gradient,
    divergence_losses,
    refresh_anchors,
)
from .evaluate import EvalReport, pixel_auroc
from .config import ConfigError, RunConfig
from .experiment import run_ablation, run_class, train_class

__version__ = "0.1.0"
