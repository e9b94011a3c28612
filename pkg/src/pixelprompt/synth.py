"""Training-time anomaly synthesis: Gaussian noise confined to the object.

The perturbed region doubles as the abnormality mask; its complement is the
normality mask, so the two always tile the frame exactly.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .corpus import Sample

log = logging.getLogger(__name__)

REGION_MODES = ("sub-region", "full-object", "whole-image")
DEFAULT_FRACTION_RANGE = (0.05, 0.4)
# the bimodal split is considered collapsed when the two intensity groups sit
# closer than a few jitter widths apart (textures, constant frames)
MIN_BAND_SEPARATION = 0.09


@dataclass
class SynthSample:
    image: np.ndarray          # (H, W) float64, clamped to [0, 1]
    abnormal_mask: np.ndarray  # (H, W) uint8, the perturbed region
    normal_mask: np.ndarray    # (H, W) uint8, exact complement
    source_seed: int
    sigma: float


def _otsu_threshold(values: np.ndarray) -> float:
    """Maximize between-class variance over a 256-bin histogram."""
    hist, edges = np.histogram(values, bins=256, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    total_mean = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (total_mean - m0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(np.argmax(between))])


def _largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected component of a binary mask."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    best_label, best_size, current = 0, 0, 0
    for sr in range(h):
        for sc in range(w):
            if mask[sr, sc] == 0 or labels[sr, sc] != 0:
                continue
            current += 1
            queue = deque([(sr, sc)])
            labels[sr, sc] = current
            count = 0
            while queue:
                r, c = queue.popleft()
                count += 1
                for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] == 1 and labels[nr, nc] == 0:
                        labels[nr, nc] = current
                        queue.append((nr, nc))
            if count > best_size:
                best_size, best_label = count, current
    return (labels == best_label).astype(np.uint8)


def estimate_object_mask(image: np.ndarray, mode: str = "ground-truth",
                         stored_mask: np.ndarray | None = None) -> np.ndarray:
    """Object mask, either taken verbatim from the sample or estimated by a
    bimodal intensity split plus largest-connected-component selection."""
    if mode == "ground-truth":
        if stored_mask is None:
            raise ValueError("ground-truth mode needs the sample's stored object mask")
        return stored_mask.copy()
    if mode != "threshold":
        raise ValueError(f"unknown object-mask mode {mode!r}")

    values = image.ravel()
    if np.ptp(values) < 1e-12:
        log.warning("constant image; object mask falls back to all-ones")
        return np.ones_like(image, dtype=np.uint8)
    t = _otsu_threshold(values)
    above = image > t
    if not above.any() or above.all():
        log.warning("degenerate intensity split; object mask falls back to all-ones")
        return np.ones_like(image, dtype=np.uint8)
    separation = float(image[above].mean() - image[~above].mean())
    if separation <= MIN_BAND_SEPARATION:
        log.warning(
            "intensity split collapsed (separation %.3f); object mask falls back to all-ones",
            separation,
        )
        return np.ones_like(image, dtype=np.uint8)
    return _largest_component(above.astype(np.uint8))


def _grow_region(support: np.ndarray, target: int, rng: np.random.Generator) -> np.ndarray:
    """Connected region of ~target pixels grown inside the support mask."""
    h, w = support.shape
    idx = np.argwhere(support == 1)
    start = tuple(idx[rng.integers(0, len(idx))])
    region = np.zeros((h, w), dtype=np.uint8)
    region[start] = 1
    frontier = [start]
    count = 1
    while count < target and frontier:
        pick = int(rng.integers(0, len(frontier)))
        frontier[pick], frontier[-1] = frontier[-1], frontier[pick]
        r, c = frontier.pop()
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w and support[nr, nc] == 1 and region[nr, nc] == 0:
                region[nr, nc] = 1
                frontier.append((nr, nc))
                count += 1
                if count >= target:
                    break
    return region


def synthesize_anomaly(sample: Sample, sigma: float, region_mode: str = "sub-region",
                       seed: int = 0,
                       fraction_range: tuple[float, float] = DEFAULT_FRACTION_RANGE,
                       ) -> SynthSample:
    """Perturb a seeded region of the sample with Gaussian noise.

    region_mode 'full-object' perturbs every object pixel, 'sub-region' one
    connected patch inside the object, 'whole-image' one connected patch
    anywhere in the frame (the no-object-attention baseline).
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if region_mode not in REGION_MODES:
        raise ValueError(f"unknown region mode {region_mode!r}; expected one of {REGION_MODES}")
    obj = sample.object_mask
    if obj.sum() == 0:
        raise ValueError("empty object mask")

    rng = np.random.default_rng(seed)
    if region_mode == "full-object":
        region = obj.copy()
    else:
        support = obj if region_mode == "sub-region" else np.ones_like(obj)
        fraction = rng.uniform(*fraction_range)
        target = max(1, int(round(fraction * int(support.sum()))))
        region = _grow_region(support, target, rng)

    image = sample.image.copy()
    where = region == 1
    noise = rng.normal(0.0, sigma, size=int(where.sum()))
    image[where] = np.clip(image[where] + noise, 0.0, 1.0)
    return SynthSample(
        image=image,
        abnormal_mask=region,
        normal_mask=(1 - region).astype(np.uint8),
        source_seed=int(seed),
        sigma=float(sigma),
    )
