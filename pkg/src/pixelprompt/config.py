"""Run configuration: defaults, key = value config files, CLI overrides."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .corpus import ANOMALY_KINDS, CLASS_CATALOGUE, DEFAULT_CLASSES
from .encoder import EncoderConfig
from .prompts import PromptConfig
from .trainer import TrainConfig


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    classes: tuple[str, ...] = DEFAULT_CLASSES
    image_size: int = 32
    test_per_kind: int = 3
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)  # ablation arms share these
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        from .corpus import derive_seed

        return replace(
            self,
            seed=seed,
            train=replace(self.train, seed=seed),
            prompt=replace(self.prompt, init_seed=seed),
            encoder=replace(self.encoder, init_seed=derive_seed(seed, "encoder")),
        )

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "image_size": self.image_size,
            "test_per_kind": self.test_per_kind,
            "seed": self.seed,
            "seeds": list(self.seeds),
            "train": self.train.to_dict(),
            "encoder": self.encoder.to_dict(),
            "prompt": self.prompt.to_dict(),
        }


def _parse_classes(text: str) -> tuple[str, ...]:
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    unknown = [n for n in names if n not in CLASS_CATALOGUE]
    if unknown:
        raise ConfigError(
            f"unknown classes {unknown}; catalogue: {', '.join(CLASS_CATALOGUE)}"
        )
    if not names:
        raise ConfigError("class list is empty")
    return names


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t.strip()) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"seeds must be comma-separated integers, got {text!r}")


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# kebab-case key -> (section, attribute, parser)
CONFIG_KEYS = {
    "classes": ("run", "classes", _parse_classes),
    "image-size": ("run", "image_size", int),
    "test-per-kind": ("run", "test_per_kind", int),
    "seed": ("run", "seed", int),
    "seeds": ("run", "seeds", _parse_seeds),
    "guiding-level": ("train", "guiding_level", float),
    "learning-rate": ("train", "learning_rate", float),
    "steps-per-round": ("train", "steps_per_round", int),
    "rounds": ("train", "rounds", int),
    "batch-size": ("train", "batch_size", int),
    "sigma": ("train", "sigma", float),
    "k-shot": ("train", "k_shot", int),
    "eps": ("train", "eps", float),
    "loss-region": ("train", "loss_region", str),
    "region-mode": ("train", "region_mode", str),
    "temperature": ("train", "temperature", float),
    "patch-size": ("encoder", "patch_size", int),
    "embed-dim": ("encoder", "embed_dim", int),
    "layers": ("encoder", "layers", int),
    "heads": ("encoder", "heads", int),
    "neighbor-radius": ("encoder", "neighbor_radius", float),
    "variant": ("encoder", "variant", str),
    "encoder-seed": ("encoder", "init_seed", int),
    "fusion-depth": ("encoder", "fusion_depth", int),
    "prefix-len": ("prompt", "prefix_len", int),
    "normal-suffix-len": ("prompt", "normal_suffix_len", int),
    "abnormal-suffix-len": ("prompt", "abnormal_suffix_len", int),
    "text-dim": ("prompt", "text_dim", int),
    "prompt-init-std": ("prompt", "init_std", float),
    "text-seed": ("prompt", "text_seed", int),
}


def parse_config_file(path) -> dict[str, str]:
    """key = value lines, '#' comments. Returns raw string values."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(
                f"{path}:{lineno}: unknown key {key!r}; valid keys: "
                + ", ".join(sorted(CONFIG_KEYS))
            )
        values[key] = value
    return values


def apply_overrides(base: RunConfig, raw: dict[str, str]) -> RunConfig:
    """Apply kebab-case overrides (from a config file or CLI flags)."""
    sections = {
        "run": dict(
            classes=base.classes,
            image_size=base.image_size,
            test_per_kind=base.test_per_kind,
            seed=base.seed,
            seeds=base.seeds,
        ),
        "train": base.train.to_dict(),
        "encoder": base.encoder.to_dict(),
        "prompt": base.prompt.to_dict(),
    }
    for key, raw_value in raw.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(
                f"unknown key {key!r}; valid keys: " + ", ".join(sorted(CONFIG_KEYS))
            )
        section, attr, parser = CONFIG_KEYS[key]
        try:
            sections[section][attr] = parser(raw_value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key!r}: {raw_value!r} ({e})")
    try:
        return RunConfig(
            classes=tuple(sections["run"]["classes"]),
            image_size=sections["run"]["image_size"],
            test_per_kind=sections["run"]["test_per_kind"],
            seed=sections["run"]["seed"],
            seeds=tuple(sections["run"]["seeds"]),
            train=TrainConfig.from_dict(sections["train"]),
            encoder=EncoderConfig.from_dict(sections["encoder"]),
            prompt=PromptConfig.from_dict(sections["prompt"]),
        )
    except ValueError as e:
        raise ConfigError(str(e))


def default_test_per_kind(count: int) -> dict[str, int]:
    return {kind: count for kind in ANOMALY_KINDS}
