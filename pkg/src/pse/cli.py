"""Command-line driver.

Subcommands: manifest, premix, pretrain, finetune, evaluate, report, run.
Exit codes: 0 ok, 2 config error, 3 data error, 4 training divergence,
1 anything unexpected.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from pse.audio import ClipTooShortError, ZeroEnergyError, read_wav
from pse.config import ConfigError, load_config
from pse.corpus import (
    KNOWN_TAGS,
    TAG_SPEECH,
    ManifestEntry,
    ManifestError,
    PartitionError,
    make_manifest,
    save_manifest,
)
from pse.models import CheckpointError
from pse.training import DivergenceError

log = logging.getLogger("pse")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

_DATA_ERRORS = (
    ManifestError,
    PartitionError,
    CheckpointError,
    ClipTooShortError,
    ZeroEnergyError,
    FileNotFoundError,
)


def _scan_tree(root: Path, min_duration_sec: float) -> list[ManifestEntry]:
    """Walk the corpus layout: speech/<speaker>/*.wav plus one directory
    per noise role (noise_train, noise_eval, noise_premix)."""
    entries = []
    skipped = 0
    for tag in KNOWN_TAGS:
        tag_dir = root / tag
        if not tag_dir.is_dir():
            continue
        for wav in sorted(tag_dir.rglob("*.wav")):
            clip = read_wav(wav)
            if clip.duration_sec < min_duration_sec:
                skipped += 1
                continue
            speaker = wav.parent.name if tag == TAG_SPEECH else ""
            entries.append(
                ManifestEntry(str(wav), speaker, clip.duration_sec, clip.sample_rate, tag)
            )
    if skipped:
        warnings.warn(f"excluded {skipped} file(s) shorter than {min_duration_sec}s")
    return entries


def cmd_manifest(args) -> int:
    if args.synthetic is not None:
        from pse.synthetic import generate_synthetic_corpus

        manifest, path = generate_synthetic_corpus(
            args.synthetic,
            n_test_speakers=args.test_speakers,
            n_background_speakers=args.background_speakers,
            utterances_per_speaker=args.utterances,
            utterance_sec=args.utterance_sec,
            seed=args.seed,
        )
        print(f"wrote {len(manifest)} entries to {path}")
        return EXIT_OK
    root = Path(args.scan).resolve()
    if not root.is_dir():
        raise ManifestError(f"not a directory: {root}")
    entries = _scan_tree(root, args.min_duration_sec)
    if not entries:
        warnings.warn(f"{root}: no usable WAV files found; writing an empty manifest")
    manifest = make_manifest(entries)
    out = Path(args.output) if args.output else root / "manifest.jsonl"
    save_manifest(manifest, out)
    print(f"wrote {len(manifest)} entries to {out}")
    return EXIT_OK


def _load_config_with_overrides(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if args.scheme is not None:
        cfg.scheme = args.scheme
    if args.architecture is not None:
        cfg.architecture = args.architecture
    if args.premix_snr_db is not None:
        cfg.premix_snr_db = args.premix_snr_db
    cfg.validate()
    return cfg


def _run_until(args, until: str) -> int:
    from pse.experiment import run_experiment

    cfg = _load_config_with_overrides(args)
    out = run_experiment(cfg, until=until)
    print(f"completed through stage {until!r}: {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from pse.experiment import merge_reports

    out = merge_reports(args.runs, args.output)
    print(f"merged {len(args.runs)} run(s) into {out}")
    return EXIT_OK


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment YAML")
    p.add_argument("--seed", type=int, default=None, help="override the global seed")
    p.add_argument("--output-dir", default=None, help="override the output directory")
    p.add_argument("--scheme", default=None, help="override the initialization scheme")
    p.add_argument("--architecture", default=None, help="override the model architecture")
    p.add_argument("--premix-snr-db", type=float, default=None, help="override the premixture SNR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pse",
        description="Personalized speech enhancement: pretrain, finetune, evaluate.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("manifest", help="scan a corpus tree or generate the synthetic corpus")
    p.add_argument("--scan", help="corpus root with speech/ and noise_* subdirectories")
    p.add_argument("--synthetic", help="generate the synthetic corpus into this directory")
    p.add_argument("--output", help="manifest path (default: <root>/manifest.jsonl)")
    p.add_argument("--min-duration-sec", type=float, default=1.0)
    p.add_argument("--test-speakers", type=int, default=3)
    p.add_argument("--background-speakers", type=int, default=5)
    p.add_argument("--utterances", type=int, default=24)
    p.add_argument("--utterance-sec", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_manifest)

    for name, until, help_text in (
        ("premix", "premix", "freeze the premixture sets"),
        ("pretrain", "pretrain", "run pretraining (and its upstream stages)"),
        ("finetune", "finetune", "run finetuning (and its upstream stages)"),
        ("evaluate", "evaluate", "run evaluation (and its upstream stages)"),
        ("run", "report", "run the full pipeline end to end"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_config_args(p)
        p.set_defaults(func=lambda args, _u=until: _run_until(args, _u))

    p = sub.add_parser("report", help="merge completed runs into one grid")
    p.add_argument("--runs", nargs="+", required=True, help="completed run directories")
    p.add_argument("--output", required=True, help="directory for the merged report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "command", None) == "manifest" and bool(args.scan) == (args.synthetic is not None):
        print("manifest: pass exactly one of --scan or --synthetic", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
