"""Staged experiment pipeline: partition -> premix -> pretrain ->
finetune (per budget) -> evaluate -> report.

Every stage writes its artifacts plus a stage.json carrying a content
hash of everything the stage depends on (config fields, seeds, upstream
stage keys). Re-running skips stages whose hash matches and whose
outputs exist, so an interrupted run resumes from its last completed
stage, and one expensive pretraining is shared across all finetune
budgets. All randomness derives from the single config seed, making a
repeated run bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from pse.config import ExperimentConfig
from pse.corpus import (
    AudioStore,
    SpeakerPartition,
    build_premixture,
    load_manifest,
    load_premixture_set,
    partition_speakers,
    save_premixture_set,
    select_finetune_subset,
)
from pse.evaluation import SpeakerReport, aggregate_grid, emit_report, evaluate_speaker
from pse.models import build_architecture, checkpoint_from_model, load_checkpoint, save_checkpoint, Provenance
from pse.training import finetune, pretrain_cm, pretrain_multispeaker, pretrain_pseudose

log = logging.getLogger("pse")

STAGES = ("partition", "premix", "pretrain", "finetune", "evaluate", "report")


def subseed(*parts) -> int:
    """Stable 63-bit seed derived from the given labels."""
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1


def _stage_key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def _stage_done(stage_dir: Path, key: str) -> bool:
    meta_path = stage_dir / "stage.json"
    if not meta_path.exists():
        return False
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except json.JSONDecodeError:
        return False
    if meta.get("key") != key:
        return False
    return all((stage_dir / name).exists() for name in meta.get("outputs", []))


def _stage_mark(stage_dir: Path, key: str, outputs) -> None:
    with open(stage_dir / "stage.json", "w") as f:
        json.dump({"key": key, "outputs": list(outputs)}, f, indent=2, sort_keys=True)


def _budget_tag(budget: float) -> str:
    return f"ft{budget:g}s"


def run_experiment(cfg: ExperimentConfig, until: str = "report") -> Path:
    """Execute the pipeline up to (and including) the given stage.

    Returns the output directory. Stage errors raise with their partial
    outputs left in place for resumption.
    """
    if until not in STAGES:
        raise ValueError(f"unknown stage {until!r}; choose from {STAGES}")
    cfg.validate()
    torch.set_num_threads(cfg.num_threads)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.resolved.yaml")

    manifest_bytes = Path(cfg.manifest).read_bytes()
    manifest_hash = hashlib.sha256(manifest_bytes).hexdigest()
    manifest = load_manifest(cfg.manifest)
    store = AudioStore()
    train_dict = asdict(cfg.train)

    seeds = {
        "partition": subseed(cfg.seed, "partition"),
        "init": subseed(cfg.seed, "init", cfg.architecture),
        "pretrain": subseed(cfg.seed, "pretrain", cfg.scheme),
    }
    with open(out / "seeds.json", "w") as f:
        json.dump({"global": cfg.seed, **seeds}, f, indent=2, sort_keys=True)

    # ---- partition ---------------------------------------------------
    pool_budget = max(cfg.ft_budgets_sec)
    partition_dir = out / "partition"
    partition_dir.mkdir(exist_ok=True)
    partition_key = _stage_key(
        {
            "stage": "partition",
            "manifest": manifest_hash,
            "test_speakers": sorted(cfg.test_speakers),
            "pool_budget": pool_budget,
            "seed": seeds["partition"],
        }
    )
    if _stage_done(partition_dir, partition_key):
        log.info("partition: up to date, skipping")
        with open(partition_dir / "partition.json") as f:
            partition = SpeakerPartition.from_json(json.load(f))
    else:
        log.info("partition: splitting %d test speakers", len(cfg.test_speakers))
        partition = partition_speakers(manifest, cfg.test_speakers, pool_budget, seeds["partition"])
        with open(partition_dir / "partition.json", "w") as f:
            json.dump(partition.to_json(), f, indent=2, sort_keys=True)
        _stage_mark(partition_dir, partition_key, ["partition.json"])
    if until == "partition":
        return out

    # ---- premix (self-supervised schemes only) -----------------------
    needs_premix = cfg.scheme in ("pseudose", "cm")
    premix_sets = {}
    premix_keys = {}
    if needs_premix:
        for speaker in partition.test_speakers:
            stage_dir = out / "premix" / speaker
            stage_dir.mkdir(parents=True, exist_ok=True)
            key = _stage_key(
                {
                    "stage": "premix",
                    "upstream": partition_key,
                    "speaker": speaker,
                    "premix_snr_db": cfg.premix_snr_db,
                    "seed": subseed(cfg.seed, "premix", speaker),
                }
            )
            premix_keys[speaker] = key
            if not _stage_done(stage_dir, key):
                log.info("premix: freezing %s at %g dB", speaker, cfg.premix_snr_db)
                pset = build_premixture(
                    partition.test_clean[speaker],
                    partition.noise_premix,
                    cfg.premix_snr_db,
                    subseed(cfg.seed, "premix", speaker),
                    store,
                    speaker_id=speaker,
                    allowed_snrs_db=cfg.allowed_premix_snrs_db,
                )
                save_premixture_set(pset, stage_dir)
                outputs = ["index.json"] + [f"premix_{i:04d}.wav" for i in range(len(pset.items))]
                _stage_mark(stage_dir, key, outputs)
            else:
                log.info("premix: %s up to date, skipping", speaker)
            # always train on the persisted (float32) premixtures so fresh
            # and resumed runs see identical audio
            premix_sets[speaker] = load_premixture_set(stage_dir / "index.json")
    if until == "premix":
        return out

    # ---- pretrain -----------------------------------------------------
    def _pretrain_one(stage_dir: Path, key: str, speaker: str | None):
        stage_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = stage_dir / "checkpoint.ckpt"
        if _stage_done(stage_dir, key):
            log.info("pretrain: %s up to date, skipping", stage_dir.name)
            return ckpt_path
        model = build_architecture(cfg.architecture, seeds["init"])
        tcfg = cfg.train.train_config(
            cfg.scheme if cfg.scheme != "random-init" else "multispeaker",
            subseed(cfg.seed, "pretrain", cfg.scheme, speaker or "shared"),
            cfg.train.pretrain_steps,
        )
        if cfg.scheme == "multispeaker":
            log.info("pretrain: multispeaker on %d utterances", len(partition.background))
            ckpt, trace = pretrain_multispeaker(
                model, partition.background, partition.noise_train, tcfg, store
            )
        elif cfg.scheme == "pseudose":
            log.info("pretrain: pseudose for %s", speaker)
            ckpt, trace = pretrain_pseudose(
                model, premix_sets[speaker], partition.noise_train, tcfg, store
            )
        elif cfg.scheme == "cm":
            log.info("pretrain: contrastive mixtures for %s", speaker)
            ckpt, trace = pretrain_cm(
                model, premix_sets[speaker], partition.noise_train, tcfg, store
            )
        else:  # random-init: freeze the seeded initial weights
            log.info("pretrain: random-init weights only")
            ckpt = checkpoint_from_model(
                model, Provenance("random-init", cfg.seed, 0, premix_snr_db=None)
            )
            trace = None
        save_checkpoint(ckpt, ckpt_path)
        outputs = ["checkpoint.ckpt"]
        if trace is not None:
            trace.to_jsonl(stage_dir / "trace.jsonl")
            outputs.append("trace.jsonl")
        _stage_mark(stage_dir, key, outputs)
        return ckpt_path

    pretrain_paths = {}
    if cfg.scheme in ("multispeaker", "random-init"):
        key = _stage_key(
            {
                "stage": "pretrain",
                "upstream": partition_key,
                "scheme": cfg.scheme,
                "architecture": cfg.architecture,
                "train": train_dict,
                "init_seed": seeds["init"],
                "seed": subseed(cfg.seed, "pretrain", cfg.scheme, "shared"),
            }
        )
        shared = _pretrain_one(out / "pretrain" / "shared", key, None)
        for speaker in partition.test_speakers:
            pretrain_paths[speaker] = shared
    else:
        for speaker in partition.test_speakers:
            key = _stage_key(
                {
                    "stage": "pretrain",
                    "upstream": premix_keys[speaker],
                    "scheme": cfg.scheme,
                    "architecture": cfg.architecture,
                    "train": train_dict,
                    "init_seed": seeds["init"],
                    "seed": subseed(cfg.seed, "pretrain", cfg.scheme, speaker),
                }
            )
            pretrain_paths[speaker] = _pretrain_one(out / "pretrain" / speaker, key, speaker)
    if until == "pretrain":
        return out

    # ---- finetune ------------------------------------------------------
    finetune_paths = {}
    finetune_keys = {}
    for speaker in partition.test_speakers:
        base = load_checkpoint(pretrain_paths[speaker])
        base_hash = hashlib.sha256(pretrain_paths[speaker].read_bytes()).hexdigest()
        for budget in cfg.ft_budgets_sec:
            stage_dir = out / "finetune" / speaker / _budget_tag(budget)
            stage_dir.mkdir(parents=True, exist_ok=True)
            key = _stage_key(
                {
                    "stage": "finetune",
                    "upstream": base_hash,
                    "speaker": speaker,
                    "budget": budget,
                    "train": train_dict,
                    "seed": subseed(cfg.seed, "finetune", speaker, budget),
                    "subset_seed": subseed(cfg.seed, "ftselect", speaker),
                }
            )
            finetune_keys[(speaker, budget)] = key
            ckpt_path = stage_dir / "checkpoint.ckpt"
            finetune_paths[(speaker, budget)] = ckpt_path
            if _stage_done(stage_dir, key):
                log.info("finetune: %s %s up to date, skipping", speaker, _budget_tag(budget))
                continue
            subset = select_finetune_subset(
                partition.finetune[speaker], budget, subseed(cfg.seed, "ftselect", speaker)
            )
            tcfg = cfg.train.train_config(
                base.provenance.scheme,
                subseed(cfg.seed, "finetune", speaker, budget),
                cfg.train.finetune_steps,
                ft_budget_sec=budget,
            )
            log.info("finetune: %s with %g s (%d utterances)", speaker, budget, len(subset))
            ckpt, trace = finetune(base, subset, partition.noise_train, tcfg, store)
            save_checkpoint(ckpt, ckpt_path)
            trace.to_jsonl(stage_dir / "trace.jsonl")
            _stage_mark(stage_dir, key, ["checkpoint.ckpt", "trace.jsonl"])
    if until == "finetune":
        return out

    # ---- evaluate -------------------------------------------------------
    speaker_reports = []
    for speaker in partition.test_speakers:
        for budget in cfg.ft_budgets_sec:
            stage_dir = out / "eval" / speaker / _budget_tag(budget)
            stage_dir.mkdir(parents=True, exist_ok=True)
            key = _stage_key(
                {
                    "stage": "evaluate",
                    "upstream": finetune_keys[(speaker, budget)],
                    "protocol": cfg.eval.to_dict(),
                }
            )
            report_path = stage_dir / "report.json"
            if _stage_done(stage_dir, key):
                log.info("evaluate: %s %s up to date, skipping", speaker, _budget_tag(budget))
                with open(report_path) as f:
                    speaker_reports.append(SpeakerReport(**json.load(f)))
                continue
            ckpt = load_checkpoint(finetune_paths[(speaker, budget)])
            log.info("evaluate: %s %s on %d mixtures", speaker, _budget_tag(budget), cfg.eval.n_mixtures)
            report = evaluate_speaker(
                ckpt, speaker, partition.test_clean[speaker], partition.noise_eval,
                cfg.eval, store, train_seed=cfg.seed,
            )
            with open(report_path, "w") as f:
                json.dump(asdict(report), f, indent=2, sort_keys=True)
            _stage_mark(stage_dir, key, ["report.json"])
            speaker_reports.append(report)
    if until == "evaluate":
        return out

    # ---- report ----------------------------------------------------------
    report_dir = out / "report"
    report_dir.mkdir(exist_ok=True)
    grid = aggregate_grid(speaker_reports)
    paths = emit_report(grid, report_dir)
    _stage_mark(report_dir, _stage_key({"stage": "report", "upstream": sorted(finetune_keys.values())}),
                [p.name for p in paths.values()])
    log.info("report: wrote %s", report_dir / "results.json")
    return out


def merge_reports(run_dirs, out_dir) -> Path:
    """Pool per-speaker reports from several completed runs into one grid."""
    reports = []
    for run in run_dirs:
        results = Path(run) / "report" / "results.json"
        if not results.exists():
            raise FileNotFoundError(f"{run}: no report/results.json (run not completed?)")
        with open(results) as f:
            grid = json.load(f)
        for cell in grid["cells"]:
            for raw in cell["speakers"]:
                reports.append(SpeakerReport(**raw))
    merged = aggregate_grid(reports)
    emit_report(merged, out_dir)
    return Path(out_dir)
