"""Per-speaker SI-SDR-improvement evaluation and report emission.

Each speaker is scored on a frozen set of unseen mixtures (held-back
clean speech x evaluation noises, SNR uniform in [-5, 5] dB) so that
every scheme and architecture sees identical audio. Per-speaker stats
aggregate into a grid keyed by (architecture, scheme, premixture SNR,
finetune budget); the grid renders as JSON, CSV, aligned text, and
finetuning-curve plots.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from pse.corpus import AccessLog, AudioStore, sample_supervised_batch
from pse.metrics import si_sdr_improvement
from pse.models import ModelCheckpoint, architecture_name

DEFAULT_EVAL_MIXTURES = 100


@dataclass(frozen=True)
class EvalProtocol:
    n_mixtures: int = DEFAULT_EVAL_MIXTURES
    snr_range_db: tuple[float, float] = (-5.0, 5.0)
    clip_sec: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "n_mixtures": self.n_mixtures,
            "snr_range_db": list(self.snr_range_db),
            "clip_sec": self.clip_sec,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(raw: dict) -> "EvalProtocol":
        return EvalProtocol(
            n_mixtures=int(raw["n_mixtures"]),
            snr_range_db=tuple(raw["snr_range_db"]),
            clip_sec=float(raw["clip_sec"]),
            seed=int(raw["seed"]),
        )


@dataclass(frozen=True)
class SpeakerReport:
    """SI-SDRi stats of one model on one speaker's frozen eval mixtures."""

    speaker_id: str
    architecture: str
    scheme: str
    premix_snr_db: float | None
    ft_budget_sec: float
    mean_sisdri_db: float
    std_sisdri_db: float
    n_mixtures: int
    protocol: dict
    train_seed: int | None = None

    def grid_key(self):
        return (self.architecture, self.scheme, self.premix_snr_db, self.ft_budget_sec)


def _speaker_stream(protocol: EvalProtocol, speaker_id: str) -> np.random.Generator:
    digest = hashlib.sha256(speaker_id.encode()).digest()
    return np.random.default_rng(
        np.random.SeedSequence([protocol.seed, int.from_bytes(digest[:8], "little")])
    )


def build_eval_mixtures(clean_entries, noise_entries, protocol: EvalProtocol, speaker_id: str, store: AudioStore, log: AccessLog | None = None):
    """Frozen per (speaker, protocol seed): identical audio for every
    model compared on this speaker."""
    if not noise_entries:
        raise ValueError("evaluation noise set is empty")
    rng = _speaker_stream(protocol, speaker_id)
    return sample_supervised_batch(
        clean_entries, noise_entries, protocol.n_mixtures, protocol.snr_range_db,
        protocol.clip_sec, rng, store, log,
    )


def _enhanced(model, clip):
    out = model.enhance(clip)
    return out[0] if isinstance(out, tuple) else out


def evaluate_speaker(
    model_or_checkpoint,
    speaker_id: str,
    clean_entries,
    noise_entries,
    protocol: EvalProtocol,
    store: AudioStore,
    architecture: str | None = None,
    scheme: str | None = None,
    premix_snr_db: float | None = None,
    ft_budget_sec: float | None = None,
    train_seed: int | None = None,
) -> SpeakerReport:
    """Score one model on one speaker's unseen mixtures.

    Evaluation is the sanctioned reader of held-back clean audio. Grid
    keys default to the checkpoint's provenance when a ModelCheckpoint is
    given.
    """
    if isinstance(model_or_checkpoint, ModelCheckpoint):
        ckpt = model_or_checkpoint
        model = ckpt.build_model()
        architecture = architecture or architecture_name(model)
        scheme = scheme or ckpt.provenance.scheme
        premix_snr_db = ckpt.provenance.premix_snr_db if premix_snr_db is None else premix_snr_db
        if ft_budget_sec is None:
            ft_budget_sec = ckpt.provenance.ft_budget_sec or 0.0
        if train_seed is None:
            train_seed = ckpt.provenance.seed
    else:
        model = model_or_checkpoint
    mixtures = build_eval_mixtures(clean_entries, noise_entries, protocol, speaker_id, store)
    scores = np.array(
        [si_sdr_improvement(s, x, _enhanced(model, x)) for x, s in mixtures], dtype=np.float64
    )
    return SpeakerReport(
        speaker_id=speaker_id,
        architecture=architecture or "unknown",
        scheme=scheme or "unknown",
        premix_snr_db=premix_snr_db,
        ft_budget_sec=float(ft_budget_sec or 0.0),
        mean_sisdri_db=float(scores.mean()),
        std_sisdri_db=float(scores.std()),
        n_mixtures=len(scores),
        protocol=protocol.to_dict(),
        train_seed=train_seed,
    )


@dataclass(frozen=True)
class GridCell:
    architecture: str
    scheme: str
    premix_snr_db: float | None
    ft_budget_sec: float
    mean_sisdri_db: float
    std_sisdri_db: float
    speakers: tuple[SpeakerReport, ...]


@dataclass(frozen=True)
class EvalReport:
    protocol: dict
    cells: tuple[GridCell, ...]

    def cell(self, architecture: str, scheme: str, premix_snr_db, ft_budget_sec) -> GridCell:
        for c in self.cells:
            if (c.architecture, c.scheme, c.premix_snr_db, c.ft_budget_sec) == (
                architecture, scheme, premix_snr_db, float(ft_budget_sec),
            ):
                return c
        raise KeyError((architecture, scheme, premix_snr_db, ft_budget_sec))

    def speaker_reports(self) -> list[SpeakerReport]:
        return [r for c in self.cells for r in c.speakers]

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "cells": [
                {
                    "architecture": c.architecture,
                    "scheme": c.scheme,
                    "premix_snr_db": c.premix_snr_db,
                    "ft_budget_sec": c.ft_budget_sec,
                    "mean_sisdri_db": c.mean_sisdri_db,
                    "std_sisdri_db": c.std_sisdri_db,
                    "speakers": [asdict(r) for r in c.speakers],
                }
                for c in self.cells
            ],
        }

    @staticmethod
    def from_json(raw: dict) -> "EvalReport":
        cells = []
        for c in raw["cells"]:
            speakers = tuple(SpeakerReport(**r) for r in c["speakers"])
            cells.append(
                GridCell(
                    c["architecture"], c["scheme"], c["premix_snr_db"], c["ft_budget_sec"],
                    c["mean_sisdri_db"], c["std_sisdri_db"], speakers,
                )
            )
        return EvalReport(raw["protocol"], tuple(cells))


def _cell_sort_key(key):
    architecture, scheme, premix, budget = key
    return (architecture, scheme, premix is not None, premix or 0.0, budget)


def aggregate_grid(reports) -> EvalReport:
    """Group per-speaker reports by grid key; cell mean/std are over the
    member reports (speakers, or speaker x seed when runs are merged)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no speaker reports to aggregate")
    protocol = reports[0].protocol
    for r in reports:
        if r.protocol != protocol:
            raise ValueError(
                f"inconsistent evaluation protocols: {r.protocol} vs {protocol}"
            )
    groups: dict[tuple, list[SpeakerReport]] = {}
    for r in reports:
        groups.setdefault(r.grid_key(), []).append(r)
    cells = []
    for key in sorted(groups, key=_cell_sort_key):
        members = sorted(groups[key], key=lambda r: (r.speaker_id, r.train_seed or 0))
        means = np.array([r.mean_sisdri_db for r in members], dtype=np.float64)
        cells.append(
            GridCell(
                architecture=key[0],
                scheme=key[1],
                premix_snr_db=key[2],
                ft_budget_sec=key[3],
                mean_sisdri_db=float(means.mean()),
                std_sisdri_db=float(means.std()),
                speakers=tuple(members),
            )
        )
    return EvalReport(protocol, tuple(cells))


def format_cell(mean_db: float, std_db: float) -> str:
    """Table convention: mean to 2 decimals, std in parentheses to 3."""
    return f"{mean_db:.2f} ({std_db:.3f})"


def _row_label(scheme: str, premix_snr_db) -> str:
    premix = "n/a" if premix_snr_db is None else f"{premix_snr_db:g}"
    return f"{scheme} @ {premix} dB premix" if premix != "n/a" else scheme


def _grid_layout(report: EvalReport):
    budgets = sorted({c.ft_budget_sec for c in report.cells})
    architectures = sorted({c.architecture for c in report.cells})
    rows_by_arch = {}
    for arch in architectures:
        rows = sorted(
            {(c.scheme, c.premix_snr_db) for c in report.cells if c.architecture == arch},
            key=lambda sp: (sp[0], sp[1] is not None, sp[1] or 0.0),
        )
        rows_by_arch[arch] = rows
    return architectures, rows_by_arch, budgets


def emit_report(report: EvalReport, out_dir, make_plots: bool = True) -> dict[str, Path]:
    """Write results.json, table.csv, table.txt, and per-architecture
    finetuning-curve plots. Returns the emitted paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    json_path = out_dir / "results.json"
    with open(json_path, "w") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    paths["json"] = json_path

    architectures, rows_by_arch, budgets = _grid_layout(report)

    def lookup(arch, scheme, premix, budget):
        try:
            c = report.cell(arch, scheme, premix, budget)
        except KeyError:
            return ""
        return format_cell(c.mean_sisdri_db, c.std_sisdri_db)

    csv_path = out_dir / "table.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["architecture", "scheme", "premix_snr_db"] + [f"{b:g}s" for b in budgets])
        for arch in architectures:
            for scheme, premix in rows_by_arch[arch]:
                premix_str = "n/a" if premix is None else f"{premix:g}"
                writer.writerow(
                    [arch, scheme, premix_str] + [lookup(arch, scheme, premix, b) for b in budgets]
                )
    paths["csv"] = csv_path

    txt_path = out_dir / "table.txt"
    with open(txt_path, "w") as f:
        col = 16
        for arch in architectures:
            f.write(f"== {arch} : mean SI-SDRi in dB, std in parentheses ==\n")
            header = "row".ljust(28) + "".join(f"{b:g}s".rjust(col) for b in budgets)
            f.write(header + "\n")
            for scheme, premix in rows_by_arch[arch]:
                label = _row_label(scheme, premix)
                cellstr = "".join(lookup(arch, scheme, premix, b).rjust(col) for b in budgets)
                f.write(label.ljust(28) + cellstr + "\n")
            f.write("\n")
    paths["txt"] = txt_path

    if make_plots:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for arch in architectures:
            fig, ax = plt.subplots(figsize=(6, 4))
            xs = np.arange(len(budgets))
            for scheme, premix in rows_by_arch[arch]:
                ys, errs, keep = [], [], []
                for i, b in enumerate(budgets):
                    try:
                        c = report.cell(arch, scheme, premix, b)
                    except KeyError:
                        continue
                    keep.append(i)
                    ys.append(c.mean_sisdri_db)
                    errs.append(c.std_sisdri_db)
                if not keep:
                    continue
                ax.errorbar(xs[keep], ys, yerr=errs, marker="o", capsize=3, label=_row_label(scheme, premix))
            ax.set_xticks(xs)
            ax.set_xticklabels([f"{b:g}s" for b in budgets])
            ax.set_xlabel("clean speech used for finetuning")
            ax.set_ylabel("mean SI-SDR improvement (dB)")
            ax.set_title(arch)
            ax.grid(True, alpha=0.3)
            ax.legend(fontsize=8)
            fig.tight_layout()
            plot_path = out_dir / f"curves_{arch}.png"
            fig.savefig(plot_path, dpi=120)
            plt.close(fig)
            paths[f"plot_{arch}"] = plot_path

    return paths
