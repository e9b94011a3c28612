"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, dump-synth. Exit codes: 0 ok,
2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import CONFIG_KEYS, ConfigError, RunConfig, apply_overrides, parse_config_file
from .corpus import (
    CorpusError,
    CorpusSpec,
    mask_to_u8,
    image_to_u8,
    read_corpus,
    write_corpus,
    write_pgm,
)
from .experiment import ABLATION_SUITES, evaluate_corpus, run_ablation, train_all
from .trainer import NumericalError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="key = value config file")
    parser.add_argument("--out", type=str, default=None, help="output directory")
    for key, (_, _, parser_fn) in sorted(CONFIG_KEYS.items()):
        flag = f"--{key}"
        if flag in ("--seed",):
            parser.add_argument("--seed", type=str, default=None)
        else:
            parser.add_argument(flag, type=str, default=None, dest=f"key_{key.replace('-', '_')}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixelprompt")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="write a toy corpus directory")
    _add_common(p_gen)

    p_train = sub.add_parser("train", help="tune prompts per class")
    _add_common(p_train)
    p_train.add_argument("--corpus", type=str, required=False, help="corpus directory")
    p_train.add_argument("--class", dest="class_name", type=str, default=None,
                         help="restrict to one class")

    p_eval = sub.add_parser("eval", help="pixel AUROC over the corpus test split")
    _add_common(p_eval)
    p_eval.add_argument("--corpus", type=str, required=False)
    p_eval.add_argument("--checkpoints", type=str, required=False,
                        help="directory holding <class>.ckpt files")
    p_eval.add_argument("--dump-maps", action="store_true",
                        help="write per-sample score maps as PGM")

    p_abl = sub.add_parser("ablate", help="shared-seed ablation sweep")
    p_abl.add_argument("suite", choices=ABLATION_SUITES)
    _add_common(p_abl)

    p_dump = sub.add_parser("dump-synth", help="write synthesized samples for inspection")
    _add_common(p_dump)
    p_dump.add_argument("--class", dest="class_name", type=str, default="disk")
    p_dump.add_argument("--count", type=int, default=4)

    return parser


def _config_from_args(args) -> RunConfig:
    raw: dict[str, str] = {}
    if args.config:
        raw.update(parse_config_file(args.config))
    for key in CONFIG_KEYS:
        if key == "seed":
            if getattr(args, "seed", None) is not None:
                raw["seed"] = args.seed
            continue
        value = getattr(args, f"key_{key.replace('-', '_')}", None)
        if value is not None:
            raw[key] = value
    return apply_overrides(RunConfig(), raw)


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError("--out directory is required")
    return Path(args.out)


def _cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    out = _require_out(args)
    spec = CorpusSpec(
        classes=cfg.classes,
        k_shot=cfg.train.k_shot,
        test_per_kind={k: cfg.test_per_kind for k in ("scratch", "blob", "hole", "none")},
        image_size=cfg.image_size,
        master_seed=cfg.seed,
    )
    manifest = write_corpus(out, spec)
    print(f"wrote {len(manifest.entries)} samples to {out}")
    return EXIT_OK


def _split_corpus(samples, entries):
    train: dict[str, list] = {}
    test: dict[str, list] = {}
    for entry, sample in zip(entries, samples):
        bucket = train if entry.split == "train" else test
        bucket.setdefault(entry.class_name, []).append(sample)
    return train, test


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = _require_out(args)
    if not args.corpus:
        raise ConfigError("--corpus directory is required")
    manifest, samples = read_corpus(args.corpus)
    train_split, _ = _split_corpus(samples, manifest.entries)
    classes = [args.class_name] if args.class_name else sorted(train_split)
    missing = [c for c in classes if c not in train_split]
    if missing:
        raise ConfigError(f"classes {missing} have no training samples in {args.corpus}")

    from .experiment import make_encoder, make_text_encoder, train_class
    from .prompts import save_checkpoint

    encoder = make_encoder(cfg)
    text_encoder = make_text_encoder(cfg)
    out.mkdir(parents=True, exist_ok=True)
    for class_name in classes:
        state, _, _ = train_class(
            cfg, class_name, encoder, text_encoder,
            train_samples=train_split[class_name],
        )
        path = out / f"{class_name}.ckpt"
        save_checkpoint(path, state.prompts, state.anchors,
                        extra={"run_config": cfg.to_dict()})
        print(f"trained {class_name}: {state.step_count} steps -> {path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    out = _require_out(args)
    if not args.corpus:
        raise ConfigError("--corpus directory is required")
    if not args.checkpoints:
        raise ConfigError("--checkpoints directory is required")
    ckpt_dir = Path(args.checkpoints)
    if not ckpt_dir.is_dir():
        raise ConfigError(f"checkpoint directory not found: {ckpt_dir}")
    manifest, samples = read_corpus(args.corpus)
    _, test_split = _split_corpus(samples, manifest.entries)
    checkpoints = {p.stem: p for p in sorted(ckpt_dir.glob("*.ckpt"))}
    report = evaluate_corpus(cfg, checkpoints, test_split, out_dir=out,
                             dump_maps=args.dump_maps)
    print(f"mean pixel AUROC {report.mean_auroc:.4f} over {len(report.per_class)} classes")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    out = _require_out(args)
    summary = run_ablation(args.suite, cfg, out_dir=out)
    for name, ok in summary["checks"].items():
        print(f"{name}: {'pass' if ok else 'fail'}")
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


def _cmd_dump_synth(args) -> int:
    cfg = _config_from_args(args)
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)

    from .corpus import gen_normal, derive_seed
    from .synth import synthesize_anomaly

    for i in range(args.count):
        seed = derive_seed(cfg.seed, "dump", args.class_name, i)
        sample = gen_normal(args.class_name, seed, size=cfg.image_size)
        synth = synthesize_anomaly(
            sample, cfg.train.sigma, region_mode=cfg.train.region_mode,
            seed=derive_seed(seed, "synth"),
        )
        stem = f"{args.class_name}_{i}"
        write_pgm(out / f"{stem}.pgm", image_to_u8(synth.image))
        write_pgm(out / f"{stem}.abmask.pgm", mask_to_u8(synth.abnormal_mask))
        write_pgm(out / f"{stem}.normask.pgm", mask_to_u8(synth.normal_mask))
    print(f"wrote {args.count} synthesized samples to {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "dump-synth": _cmd_dump_synth,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CorpusError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
