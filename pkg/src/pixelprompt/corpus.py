"""Procedural toy corpus: seeded normal images, defected test images, PGM io.

Object classes place a bright shape on a dark background; texture classes
fill the whole frame (their object mask is all ones). Test defects use
mechanisms unrelated to the Gaussian noise used for training synthesis:
constant-shift scratches and blobs, and background-filled holes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GENERATOR_VERSION = "toy-corpus-v1"

CLASS_CATALOGUE = (
    "disk",
    "square",
    "ring",
    "disk-striped",
    "square-striped",
    "ring-striped",
    "texture-stripes",
    "texture-checker",
)
TEXTURE_CLASSES = ("texture-stripes", "texture-checker")
DEFAULT_CLASSES = (
    "disk",
    "square",
    "ring",
    "disk-striped",
    "square-striped",
    "texture-stripes",
    "texture-checker",
)
ANOMALY_KINDS = ("scratch", "blob", "hole", "none")

BACKGROUND_BAND = (0.15, 0.30)
OBJECT_BAND = (0.60, 0.85)
JITTER = 0.03
# base intensities are keyed to the class with only a small per-seed drift,
# so a 1-shot training image is representative of its class
LEVEL_DRIFT = 0.02
# fine pixel-level surface grain (period-2 checker): object material carries
# more grain than the backdrop, defect fills carry none. Both sit above the
# jitter floor or the material signature would drown
OBJECT_GRAIN = 0.06
BACKGROUND_GRAIN = 0.045
# object stripes keep a visible contrast, texture variation stays inside the
# jitter scale so a bimodal intensity split has nothing to latch onto
OBJECT_STRIPE_CONTRAST = 0.06
TEXTURE_CONTRAST = 0.025
# fixed base geometry (parts are registered in frame); seeds jitter position
# by whole pixels and scale by a fraction of a pixel
DISK_RADIUS = 0.29          # fraction of image size
SQUARE_SIDE_CELLS = 4       # side length in 4px cells; squares sit on the cell grid
RING_OUTER = 0.35
RING_INNER = 0.1625
SCALE_DRIFT = 0.005
DEFECT_SHIFT_RANGE = (0.30, 0.45)


class CorpusError(Exception):
    pass


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a mixed tag tuple (no salted python hash)."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


@dataclass
class Sample:
    image: np.ndarray        # (H, W) float64 in [0, 1]
    object_mask: np.ndarray  # (H, W) uint8 {0, 1}
    anomaly_mask: np.ndarray | None  # (H, W) uint8, all-zero for normal samples
    label: int
    class_name: str
    seed: int

    @property
    def shape(self):
        return self.image.shape


@dataclass
class ManifestEntry:
    path: str
    class_name: str
    split: str
    label: int
    seed: int
    kind: str = "none"


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    image_size: int
    version: str = GENERATOR_VERSION


@dataclass
class CorpusSpec:
    classes: tuple[str, ...] = DEFAULT_CLASSES
    k_shot: int = 1
    test_per_kind: dict[str, int] = field(
        default_factory=lambda: {"scratch": 3, "blob": 3, "hole": 3, "none": 3}
    )
    image_size: int = 32
    master_seed: int = 0


def _check_class(class_name: str) -> None:
    if class_name not in CLASS_CATALOGUE:
        raise CorpusError(
            f"unknown class {class_name!r}; catalogue: {', '.join(CLASS_CATALOGUE)}"
        )


def _grid(size: int):
    return np.meshgrid(np.arange(size), np.arange(size), indexing="ij")


def _class_base(class_name: str, band: tuple[float, float], tag: str) -> float:
    lo, hi = band
    base_rng = np.random.default_rng(derive_seed("class-level", class_name, tag))
    return float(base_rng.uniform(lo + LEVEL_DRIFT, hi - LEVEL_DRIFT))


def _class_level(class_name: str, band: tuple[float, float], tag: str,
                 rng: np.random.Generator) -> float:
    """Class-keyed base intensity inside the band, drifted slightly per seed."""
    return _class_base(class_name, band, tag) + float(rng.uniform(-LEVEL_DRIFT, LEVEL_DRIFT))


def _object_geometry(class_name: str, rng: np.random.Generator, size: int):
    """Binary object mask plus a flat/striped intensity pattern for it.

    Like the intensity levels, the base geometry is keyed to the class (the
    toy categories are registered objects); seeds move and scale it slightly.
    """
    base_shape = class_name.replace("-striped", "")
    striped = class_name.endswith("-striped")
    rr, cc = _grid(size)
    if base_shape == "square":
        # squares sit on the 4px cell grid like a registered part on a
        # fixture; seeds shift them by whole cells
        side = 4 * SQUARE_SIDE_CELLS
        r0 = 4 * ((size - side) // 8 + int(rng.integers(-1, 2)))
        c0 = 4 * ((size - side) // 8 + int(rng.integers(-1, 2)))
        mask = (rr >= r0) & (rr < r0 + side) & (cc >= c0) & (cc < c0 + side)
    else:
        # integer centers: the pixelized circular boundary then comes from a
        # small family, so training boundary cells stay representative
        cy = size // 2 + int(rng.integers(-1, 2))
        cx = size // 2 + int(rng.integers(-1, 2))
        scale_drift = rng.uniform(-SCALE_DRIFT, SCALE_DRIFT)
        if base_shape == "disk":
            r = (DISK_RADIUS + scale_drift) * size
            mask = ((rr - cy) ** 2 + (cc - cx) ** 2) <= r * r
        elif base_shape == "ring":
            outer = (RING_OUTER + scale_drift) * size
            inner = (RING_INNER + scale_drift) * size
            d2 = (rr - cy) ** 2 + (cc - cx) ** 2
            mask = (d2 <= outer * outer) & (d2 >= inner * inner)
        else:
            raise CorpusError(f"unknown object shape {base_shape!r}")

    if striped:
        band = (OBJECT_BAND[0] + OBJECT_STRIPE_CONTRAST, OBJECT_BAND[1] - OBJECT_STRIPE_CONTRAST)
        level = _class_level(class_name, band, "object", rng)
        orient_rng = np.random.default_rng(derive_seed("class-orient", class_name))
        coord = rr if orient_rng.integers(0, 2) == 0 else cc
        pattern = level + OBJECT_STRIPE_CONTRAST * np.where((coord // 4) % 2 == 0, 1.0, -1.0)
    else:
        level = _class_level(class_name, OBJECT_BAND, "object", rng)
        pattern = np.full((size, size), level)
    return mask.astype(np.uint8), pattern


def _texture_pattern(class_name: str, rng: np.random.Generator, size: int) -> np.ndarray:
    rr, cc = _grid(size)
    band = (OBJECT_BAND[0] + 0.08, OBJECT_BAND[1] - 0.08)
    level = _class_level(class_name, band, "texture", rng)
    if class_name == "texture-stripes":
        orient_rng = np.random.default_rng(derive_seed("class-orient", class_name))
        coord = rr if orient_rng.integers(0, 2) == 0 else cc
        sign = np.where((coord // 4) % 2 == 0, 1.0, -1.0)
    else:  # texture-checker
        sign = np.where(((rr // 4) + (cc // 4)) % 2 == 0, 1.0, -1.0)
    return level + TEXTURE_CONTRAST * sign


def _grain(size: int) -> np.ndarray:
    rr, cc = _grid(size)
    return np.where((rr + cc) % 2 == 0, 1.0, -1.0)


def gen_normal(class_name: str, seed: int, size: int = 32) -> Sample:
    """Deterministic normal sample for (class_name, seed)."""
    _check_class(class_name)
    rng = np.random.default_rng(derive_seed("normal", class_name, seed, size))
    grain = _grain(size)
    if class_name in TEXTURE_CLASSES:
        mask = np.ones((size, size), dtype=np.uint8)
        image = _texture_pattern(class_name, rng, size) + OBJECT_GRAIN * grain
    else:
        mask, pattern = _object_geometry(class_name, rng, size)
        background = _class_level(class_name, BACKGROUND_BAND, "background", rng)
        image = np.where(
            mask == 1,
            pattern + OBJECT_GRAIN * grain,
            background + BACKGROUND_GRAIN * grain,
        )
    image = image + rng.uniform(-JITTER, JITTER, size=(size, size))
    image = np.clip(image, 0.0, 1.0)
    return Sample(
        image=image,
        object_mask=mask,
        anomaly_mask=np.zeros((size, size), dtype=np.uint8),
        label=0,
        class_name=class_name,
        seed=int(seed),
    )


def _bresenham(r0: int, c0: int, r1: int, c1: int):
    """Integer line coordinates from (r0, c0) to (r1, c1)."""
    points = []
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dr - dc
    r, c = r0, c0
    while True:
        points.append((r, c))
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dc:
            err -= dc
            r += sr
        if e2 < dr:
            err += dr
            c += sc
    return points


def _erode(mask: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighborhood lies inside the mask."""
    m = mask.astype(bool)
    interior = m.copy()
    interior[1:, :] &= m[:-1, :]
    interior[:-1, :] &= m[1:, :]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    return interior.astype(np.uint8)


def _ellipse_footprint(rng: np.random.Generator, inside: np.ndarray, axis_range,
                       center_support: np.ndarray | None = None) -> np.ndarray:
    size = inside.shape[0]
    centers = center_support if center_support is not None else inside
    idx = np.argwhere(centers == 1)
    cy, cx = idx[rng.integers(0, len(idx))]
    a = rng.uniform(*axis_range)
    b = rng.uniform(*axis_range)
    theta = rng.uniform(0.0, np.pi)
    rr, cc = _grid(size)
    dy, dx = rr - cy, cc - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    raw = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return (raw & (inside == 1)).astype(np.uint8)


def gen_test(class_name: str, seed: int, anomaly_kind: str, size: int = 32) -> Sample:
    """Test sample: a normal image plus one defect, with its exact footprint."""
    _check_class(class_name)
    if anomaly_kind not in ANOMALY_KINDS:
        raise CorpusError(
            f"unknown anomaly kind {anomaly_kind!r}; expected one of {', '.join(ANOMALY_KINDS)}"
        )
    base = gen_normal(class_name, seed, size=size)
    if anomaly_kind == "none":
        return base

    obj = base.object_mask
    image = base.image.copy()
    for attempt in range(8):
        rng = np.random.default_rng(
            derive_seed("defect", class_name, seed, anomaly_kind, size, attempt)
        )
        if anomaly_kind == "scratch":
            idx = np.argwhere(obj == 1)
            p0 = idx[rng.integers(0, len(idx))]
            p1 = idx[rng.integers(0, len(idx))]
            if np.hypot(*(p0 - p1)) < size / 4:
                continue
            footprint = np.zeros_like(obj)
            for r, c in _bresenham(p0[0], p0[1], p1[0], p1[1]):
                if obj[r, c] == 1:
                    footprint[r, c] = 1
        elif anomaly_kind == "blob":
            footprint = _ellipse_footprint(rng, obj, (2.5, 5.5))
        else:
            # holes are drilled from the part interior, away from the silhouette
            interior = _erode(obj)
            support = interior if interior.sum() > 0 else obj
            footprint = _ellipse_footprint(rng, obj, (2.0, 4.0), center_support=support)
        if footprint.sum() == 0:
            continue

        where = footprint == 1
        if anomaly_kind == "hole":
            # background-band fill, but at the band edge farthest from this
            # class's own backdrop so the hole reads as a different material
            bg = _class_base(class_name, BACKGROUND_BAND, "background")
            fill = BACKGROUND_BAND[1] if bg < sum(BACKGROUND_BAND) / 2 else BACKGROUND_BAND[0]
            image[where] = fill + rng.uniform(-JITTER, JITTER, size=int(where.sum()))
        else:
            # defects scrape off the surface grain and expose bright
            # substrate; dark marks are covered by the hole kind
            shift = rng.uniform(*DEFECT_SHIFT_RANGE)
            grain_field = OBJECT_GRAIN * _grain(size)
            image[where] = image[where] - grain_field[where] + shift
        image = np.clip(image, 0.0, 1.0)
        return Sample(
            image=image,
            object_mask=obj,
            anomaly_mask=footprint,
            label=1,
            class_name=class_name,
            seed=int(seed),
        )
    raise CorpusError(
        f"degenerate defect geometry for {class_name!r} kind {anomaly_kind!r} seed {seed}"
    )


# ---------------------------------------------------------------------------
# PGM io (binary P5, maxval 255)

def write_pgm(path, array_u8: np.ndarray) -> None:
    arr = np.asarray(array_u8, dtype=np.uint8)
    if arr.ndim != 2:
        raise CorpusError(f"write_pgm: expected 2-d array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"missing file: {path}")
    raw = path.read_bytes()
    try:
        if not raw.startswith(b"P5"):
            raise ValueError("not a P5 header")
        # header = three whitespace-separated tokens after the magic,
        # with '#' comments allowed between them
        pos, tokens = 2, []
        while len(tokens) < 3:
            while pos < len(raw) and raw[pos : pos + 1].isspace():
                pos += 1
            if raw[pos : pos + 1] == b"#":
                while pos < len(raw) and raw[pos] != 0x0A:
                    pos += 1
                continue
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            tokens.append(int(raw[start:pos]))
        pos += 1  # single whitespace byte after maxval
        w, h, maxval = tokens
        if maxval != 255:
            raise ValueError(f"unsupported maxval {maxval}")
        data = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8)
        if data.size != w * h:
            raise ValueError("truncated pixel data")
        return data.reshape(h, w).copy()
    except (ValueError, IndexError) as e:
        raise CorpusError(f"corrupt PGM file {path}: {e}")


def image_to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def u8_to_image(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 255.0


def mask_to_u8(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask) > 0).astype(np.uint8) * 255


def u8_to_mask(arr: np.ndarray) -> np.ndarray:
    return (arr > 127).astype(np.uint8)


# ---------------------------------------------------------------------------
# Corpus directories

def _mask_paths(image_path: Path):
    stem = image_path.name[: -len(".pgm")]
    return (
        image_path.with_name(stem + ".objmask.pgm"),
        image_path.with_name(stem + ".anomask.pgm"),
    )


def build_samples(spec: CorpusSpec):
    """All samples for a spec, in manifest order. Train split is normal-only."""
    samples: list[Sample] = []
    entries: list[ManifestEntry] = []
    for class_name in spec.classes:
        for i in range(spec.k_shot):
            seed = derive_seed(spec.master_seed, "train", class_name, i)
            s = gen_normal(class_name, seed, size=spec.image_size)
            samples.append(s)
            entries.append(
                ManifestEntry(
                    path=f"train/{class_name}_{seed}.pgm",
                    class_name=class_name,
                    split="train",
                    label=0,
                    seed=seed,
                )
            )
        for kind in ANOMALY_KINDS:
            for i in range(spec.test_per_kind.get(kind, 0)):
                seed = derive_seed(spec.master_seed, "test", class_name, kind, i)
                s = gen_test(class_name, seed, kind, size=spec.image_size)
                samples.append(s)
                entries.append(
                    ManifestEntry(
                        path=f"test/{class_name}_{kind}_{seed}.pgm",
                        class_name=class_name,
                        split="test",
                        label=s.label,
                        seed=seed,
                        kind=kind,
                    )
                )
    return CorpusManifest(entries=entries, image_size=spec.image_size), samples


def write_corpus(directory, spec: CorpusSpec) -> CorpusManifest:
    directory = Path(directory)
    (directory / "train").mkdir(parents=True, exist_ok=True)
    (directory / "test").mkdir(parents=True, exist_ok=True)
    manifest, samples = build_samples(spec)
    for entry, sample in zip(manifest.entries, samples):
        img_path = directory / entry.path
        obj_path, ano_path = _mask_paths(img_path)
        write_pgm(img_path, image_to_u8(sample.image))
        write_pgm(obj_path, mask_to_u8(sample.object_mask))
        write_pgm(ano_path, mask_to_u8(sample.anomaly_mask))
    payload = {
        "version": manifest.version,
        "image_size": manifest.image_size,
        "entries": [vars(e) for e in manifest.entries],
    }
    (directory / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    return manifest


def read_corpus(directory):
    """Read back a corpus directory. Returns (manifest, samples) in manifest order."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CorpusError(f"missing file: {manifest_path}")
    try:
        payload = json.loads(manifest_path.read_text())
        entries = [ManifestEntry(**e) for e in payload["entries"]]
        image_size = int(payload["image_size"])
        version = payload["version"]
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusError(f"corrupt manifest {manifest_path}: {e}")

    samples = []
    for entry in entries:
        img_path = directory / entry.path
        obj_path, ano_path = _mask_paths(img_path)
        image = u8_to_image(read_pgm(img_path))
        if image.shape != (image_size, image_size):
            raise CorpusError(
                f"{img_path}: size {image.shape} does not match manifest {image_size}"
            )
        samples.append(
            Sample(
                image=image,
                object_mask=u8_to_mask(read_pgm(obj_path)),
                anomaly_mask=u8_to_mask(read_pgm(ano_path)),
                label=entry.label,
                class_name=entry.class_name,
                seed=entry.seed,
            )
        )
    return CorpusManifest(entries=entries, image_size=image_size, version=version), samples
