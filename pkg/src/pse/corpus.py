"""Corpus manifests, speaker partitioning, premixtures, and batch sampling.

A manifest (JSON Lines) declares every audio file with its speaker and
role tag. Partitioning splits speech into a many-speaker background pool
and, per test speaker, a few-shot clean finetune subset plus a held-back
clean evaluation set. The held-back clean audio is only ever read in two
sanctioned places: `build_premixture` (which freezes its noisy stand-in)
and the evaluator. Self-supervised training consumes premixtures only,
and every sampler records the audio ids it touches so tests can audit
that wall.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from pse.audio import AudioClip, ClipTooShortError, mix_at_snr, random_clip, read_wav, write_wav

TAG_SPEECH = "speech"
TAG_NOISE_TRAIN = "noise_train"
TAG_NOISE_EVAL = "noise_eval"
TAG_NOISE_PREMIX = "noise_premix"
KNOWN_TAGS = (TAG_SPEECH, TAG_NOISE_TRAIN, TAG_NOISE_EVAL, TAG_NOISE_PREMIX)

# Per-speaker duration ceilings for the clean pools.
MAX_FINETUNE_BUDGET_SEC = 180.0
MAX_EVAL_POOL_SEC = 1320.0

DEFAULT_PREMIX_SNRS_DB = (5.0, 10.0)

_BUDGET_EPS = 1e-9


class ManifestError(ValueError):
    """A corpus manifest is missing, malformed, or inconsistent."""


class PartitionError(ValueError):
    """A speaker lacks the material required by the requested split."""


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    speaker_id: str
    duration_sec: float
    sample_rate: int
    corpus_tag: str

    @property
    def audio_id(self) -> str:
        return self.path


@dataclass(frozen=True)
class CorpusManifest:
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def with_tag(self, tag: str) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.corpus_tag == tag)

    def speakers(self) -> tuple[str, ...]:
        return tuple(sorted({e.speaker_id for e in self.entries if e.corpus_tag == TAG_SPEECH}))


def _validate_entries(entries) -> list[str]:
    problems = []
    seen_paths = set()
    rates = {}
    for i, e in enumerate(entries):
        where = f"entry {i} ({e.path!r})"
        if not e.path:
            problems.append(f"entry {i}: empty path")
        elif e.path in seen_paths:
            problems.append(f"{where}: duplicate path")
        seen_paths.add(e.path)
        if e.duration_sec <= 0:
            problems.append(f"{where}: duration_sec must be positive, got {e.duration_sec}")
        if e.sample_rate <= 0:
            problems.append(f"{where}: sample_rate must be positive, got {e.sample_rate}")
        if e.corpus_tag not in KNOWN_TAGS:
            problems.append(f"{where}: unknown corpus_tag {e.corpus_tag!r}, expected one of {KNOWN_TAGS}")
        rates.setdefault(e.sample_rate, e.path)
    if len(rates) > 1:
        problems.append(f"mixed sample rates across entries: {sorted(rates)}")
    return problems


def make_manifest(entries) -> CorpusManifest:
    """Validate entries into a manifest; raises with every problem listed."""
    entries = tuple(entries)
    problems = _validate_entries(entries)
    if problems:
        raise ManifestError("invalid manifest:\n  " + "\n  ".join(problems))
    return CorpusManifest(entries)


def save_manifest(manifest: CorpusManifest, path) -> None:
    """Write one JSON object per line with the ManifestEntry fields."""
    with open(path, "w") as f:
        for e in manifest.entries:
            f.write(json.dumps(asdict(e), sort_keys=True) + "\n")


def load_manifest(path) -> CorpusManifest:
    """Load and validate a JSON Lines manifest.

    Relative entry paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    problems = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                entry = ManifestEntry(
                    path=str(raw["path"]),
                    speaker_id=str(raw["speaker_id"]),
                    duration_sec=float(raw["duration_sec"]),
                    sample_rate=int(raw["sample_rate"]),
                    corpus_tag=str(raw["corpus_tag"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
            if entry.path and not Path(entry.path).is_absolute():
                entry = ManifestEntry(
                    str(path.parent / entry.path), entry.speaker_id, entry.duration_sec,
                    entry.sample_rate, entry.corpus_tag,
                )
            entries.append(entry)
    problems.extend(_validate_entries(entries))
    if problems:
        raise ManifestError(f"invalid manifest {path}:\n  " + "\n  ".join(problems))
    return CorpusManifest(tuple(entries))


class AudioStore:
    """Reads manifest audio with an in-memory cache keyed by path."""

    def __init__(self):
        self._cache: dict[str, AudioClip] = {}

    def get(self, entry: ManifestEntry) -> AudioClip:
        clip = self._cache.get(entry.path)
        if clip is None:
            clip = read_wav(entry.path)
            if clip.sample_rate != entry.sample_rate:
                raise ManifestError(
                    f"{entry.path}: file sample rate {clip.sample_rate} contradicts "
                    f"manifest ({entry.sample_rate})"
                )
            self._cache[entry.path] = clip
        return clip


class AccessLog:
    """Ordered record of every audio id touched by a sampler."""

    def __init__(self):
        self.ids: list[str] = []

    def add(self, audio_id: str) -> None:
        self.ids.append(audio_id)

    def unique(self) -> set[str]:
        return set(self.ids)


@dataclass(frozen=True)
class SpeakerPartition:
    """Role assignment of a manifest for one experiment.

    `background` holds the many-speaker pretraining pool; per test speaker,
    `finetune` is the few-shot clean subset under the seconds budget and
    `test_clean` the held-back clean evaluation pool (off limits to
    training). Noise roles come straight from the manifest tags.
    """

    background: tuple[ManifestEntry, ...]
    finetune: dict[str, tuple[ManifestEntry, ...]]
    test_clean: dict[str, tuple[ManifestEntry, ...]]
    noise_train: tuple[ManifestEntry, ...]
    noise_eval: tuple[ManifestEntry, ...]
    noise_premix: tuple[ManifestEntry, ...]
    ft_budget_sec: float
    seed: int

    @property
    def test_speakers(self) -> tuple[str, ...]:
        return tuple(sorted(self.test_clean))

    def to_json(self) -> dict:
        return {
            "ft_budget_sec": self.ft_budget_sec,
            "seed": self.seed,
            "background": [asdict(e) for e in self.background],
            "finetune": {k: [asdict(e) for e in v] for k, v in sorted(self.finetune.items())},
            "test_clean": {k: [asdict(e) for e in v] for k, v in sorted(self.test_clean.items())},
            "noise_train": [asdict(e) for e in self.noise_train],
            "noise_eval": [asdict(e) for e in self.noise_eval],
            "noise_premix": [asdict(e) for e in self.noise_premix],
        }

    @staticmethod
    def from_json(raw: dict) -> "SpeakerPartition":
        entries = lambda lst: tuple(ManifestEntry(**d) for d in lst)
        return SpeakerPartition(
            background=entries(raw["background"]),
            finetune={k: entries(v) for k, v in raw["finetune"].items()},
            test_clean={k: entries(v) for k, v in raw["test_clean"].items()},
            noise_train=entries(raw["noise_train"]),
            noise_eval=entries(raw["noise_eval"]),
            noise_premix=entries(raw["noise_premix"]),
            ft_budget_sec=raw["ft_budget_sec"],
            seed=raw["seed"],
        )


def total_duration(entries) -> float:
    return float(sum(e.duration_sec for e in entries))


def greedy_duration_subset(entries, budget_sec: float, rng: np.random.Generator):
    """Shuffle, then pack whole utterances while they fit the remaining
    seconds budget. Any skipped utterance would overshoot the final total."""
    chosen: list[ManifestEntry] = []
    rest: list[ManifestEntry] = []
    remaining = budget_sec
    for idx in rng.permutation(len(entries)):
        utt = entries[int(idx)]
        if utt.duration_sec <= remaining + _BUDGET_EPS:
            chosen.append(utt)
            remaining -= utt.duration_sec
        else:
            rest.append(utt)
    return chosen, rest


def select_finetune_subset(pool_entries, budget_sec: float, seed: int) -> tuple[ManifestEntry, ...]:
    """Pick the few-shot subset for one budget out of a fixed finetune pool.

    Keeping the pool fixed while the budget varies means the held-back
    evaluation material never changes across budgets."""
    if budget_sec == 0:
        return ()
    if not pool_entries:
        raise PartitionError("finetune pool is empty but the budget is positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    chosen, _ = greedy_duration_subset(list(pool_entries), budget_sec, rng)
    if not chosen:
        raise PartitionError(f"no whole utterance fits the {budget_sec:g}s finetune budget")
    return tuple(chosen)


def partition_speakers(
    manifest: CorpusManifest,
    test_speaker_ids,
    ft_budget_sec: float,
    seed: int,
) -> SpeakerPartition:
    """Deterministically split speech into background and per-speaker sets.

    Per test speaker, utterances are shuffled by a per-speaker stream and
    greedily packed whole into the finetune subset while they fit the
    seconds budget; everything else becomes the clean evaluation pool
    (capped at 1320 s). A budget of 0 yields an empty finetune subset.
    """
    if ft_budget_sec < 0:
        raise ValueError("ft_budget_sec must be non-negative")
    if ft_budget_sec > MAX_FINETUNE_BUDGET_SEC:
        raise ValueError(f"ft_budget_sec above the {MAX_FINETUNE_BUDGET_SEC:.0f}s finetune pool ceiling")
    test_speaker_ids = sorted(set(test_speaker_ids))
    speech = manifest.with_tag(TAG_SPEECH)
    by_speaker: dict[str, list[ManifestEntry]] = {}
    for e in speech:
        by_speaker.setdefault(e.speaker_id, []).append(e)
    missing = [s for s in test_speaker_ids if s not in by_speaker]
    if missing:
        raise PartitionError(f"test speakers absent from manifest: {missing}")

    background = tuple(e for e in speech if e.speaker_id not in test_speaker_ids)
    finetune: dict[str, tuple[ManifestEntry, ...]] = {}
    test_clean: dict[str, tuple[ManifestEntry, ...]] = {}
    seeds = np.random.SeedSequence(seed).spawn(len(test_speaker_ids))
    for speaker, child in zip(test_speaker_ids, seeds):
        utts = by_speaker[speaker]
        total = total_duration(utts)
        if total <= ft_budget_sec:
            raise PartitionError(
                f"speaker {speaker!r} has only {total:.1f}s of speech; cannot cover the "
                f"{ft_budget_sec:.1f}s finetune budget and still hold out evaluation material"
            )
        rng = np.random.default_rng(child)
        chosen, rest = greedy_duration_subset(utts, ft_budget_sec, rng)
        if ft_budget_sec > 0 and not chosen:
            raise PartitionError(
                f"speaker {speaker!r}: no whole utterance fits the {ft_budget_sec:.1f}s budget"
            )
        held: list[ManifestEntry] = []
        held_sec = 0.0
        for utt in rest:
            if held_sec + utt.duration_sec >= MAX_EVAL_POOL_SEC:
                break
            held.append(utt)
            held_sec += utt.duration_sec
        if not held:
            raise PartitionError(f"speaker {speaker!r}: nothing left for evaluation after the budget")
        finetune[speaker] = tuple(chosen)
        test_clean[speaker] = tuple(held)

    return SpeakerPartition(
        background=background,
        finetune=finetune,
        test_clean=test_clean,
        noise_train=manifest.with_tag(TAG_NOISE_TRAIN),
        noise_eval=manifest.with_tag(TAG_NOISE_EVAL),
        noise_premix=manifest.with_tag(TAG_NOISE_PREMIX),
        ft_budget_sec=float(ft_budget_sec),
        seed=int(seed),
    )


@dataclass(frozen=True)
class PremixtureItem:
    """One frozen noisy stand-in for a held-back clean utterance.

    Only the premixed audio is exposed; the clean source is referenced by
    id so downstream consumers cannot read it through this type.
    """

    clean_ref_id: str
    premix_noise_id: str
    premix_snr_db: float
    premixed: AudioClip

    @property
    def audio_id(self) -> str:
        return f"premix:{self.clean_ref_id}"


@dataclass(frozen=True)
class PremixtureSet:
    speaker_id: str
    premix_snr_db: float
    items: tuple[PremixtureItem, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))


def noise_segment(
    noise_entries,
    num_samples: int,
    rng: np.random.Generator,
    store: AudioStore,
    log: AccessLog | None = None,
) -> tuple[AudioClip, str]:
    """Draw one noise entry and a random offset segment of `num_samples`.

    The returned id names the realization (path@offset), so two draws from
    the same file at different offsets count as distinct noises.
    """
    if not noise_entries:
        raise ValueError("no noise entries to sample from")
    entry = noise_entries[int(rng.integers(len(noise_entries)))]
    source = store.get(entry)
    if num_samples > len(source):
        raise ClipTooShortError(
            f"noise file {entry.path} ({len(source)} samples) is shorter than the "
            f"requested {num_samples}-sample segment"
        )
    offset = int(rng.integers(0, len(source) - num_samples + 1))
    if log is not None:
        log.add(entry.audio_id)
    seg = AudioClip(source.samples[offset : offset + num_samples], source.sample_rate)
    return seg, f"{entry.path}@{offset}"


def build_premixture(
    test_clean_entries,
    noise_premix_entries,
    premix_snr_db: float,
    seed: int,
    store: AudioStore,
    speaker_id: str = "",
    allowed_snrs_db=DEFAULT_PREMIX_SNRS_DB,
    snr_jitter_db: float = 0.0,
) -> PremixtureSet:
    """Freeze one premixed clip per held-back clean utterance.

    This is one of the two sanctioned readers of held-back clean audio.
    Noise segments are drawn with replacement from the premix-noise pool.
    ``premix_snr_db = inf`` disables premixing (premixed == clean), a
    debugging sentinel exempt from the allowed-SNR check.
    """
    if not math.isinf(premix_snr_db) and allowed_snrs_db is not None and premix_snr_db not in allowed_snrs_db:
        raise ValueError(
            f"premix SNR {premix_snr_db} dB not in the configured set {tuple(allowed_snrs_db)}"
        )
    if not math.isinf(premix_snr_db) and not noise_premix_entries:
        raise ValueError("premix-noise pool is empty")
    if not test_clean_entries:
        raise ValueError("no clean utterances to premix")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    items = []
    for entry in test_clean_entries:
        clean = store.get(entry)
        if math.isinf(premix_snr_db):
            items.append(PremixtureItem(entry.audio_id, "none", premix_snr_db, clean))
            continue
        noise, noise_id = noise_segment(noise_premix_entries, len(clean), rng, store)
        snr = premix_snr_db
        if snr_jitter_db != 0.0:
            snr += rng.uniform(-snr_jitter_db, snr_jitter_db)
        premixed, _ = mix_at_snr(clean, noise, snr)
        items.append(PremixtureItem(entry.audio_id, noise_id, float(snr), premixed))
    return PremixtureSet(speaker_id, float(premix_snr_db), tuple(items))


def save_premixture_set(pset: PremixtureSet, out_dir) -> Path:
    """Persist premixed audio as float32 WAVs plus a JSON index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"speaker_id": pset.speaker_id, "premix_snr_db": pset.premix_snr_db, "items": []}
    for i, item in enumerate(pset.items):
        name = f"premix_{i:04d}.wav"
        write_wav(out_dir / name, item.premixed, dtype="float32")
        index["items"].append(
            {
                "clean_ref_id": item.clean_ref_id,
                "premix_noise_id": item.premix_noise_id,
                "premix_snr_db": item.premix_snr_db,
                "wav": name,
            }
        )
    index_path = out_dir / "index.json"
    with open(index_path, "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    return index_path


def load_premixture_set(index_path) -> PremixtureSet:
    index_path = Path(index_path)
    with open(index_path) as f:
        index = json.load(f)
    items = []
    for raw in index["items"]:
        clip = read_wav(index_path.parent / raw["wav"])
        items.append(
            PremixtureItem(raw["clean_ref_id"], raw["premix_noise_id"], raw["premix_snr_db"], clip)
        )
    return PremixtureSet(index["speaker_id"], index["premix_snr_db"], tuple(items))


def require_min_duration(entries, clip_sec: float) -> None:
    """Reject sets containing files shorter than one training clip."""
    short = [e.path for e in entries if e.duration_sec < clip_sec]
    if short:
        raise ClipTooShortError(
            f"{len(short)} file(s) shorter than {clip_sec}s; exclude them when building "
            f"the manifest: {short[:5]}"
        )


def sample_supervised_batch(
    speech_entries,
    noise_entries,
    batch_size: int,
    snr_range_db: tuple[float, float],
    clip_sec: float,
    rng: np.random.Generator,
    store: AudioStore,
    log: AccessLog | None = None,
) -> list[tuple[AudioClip, AudioClip]]:
    """Draw (mixture, clean target) pairs: random 1 s clips of speech and
    training noise mixed at an SNR uniform in `snr_range_db`."""
    if not speech_entries or not noise_entries:
        raise ValueError("speech and noise sets must be nonempty")
    lo, hi = snr_range_db
    batch = []
    for _ in range(batch_size):
        entry = speech_entries[int(rng.integers(len(speech_entries)))]
        s = random_clip(store.get(entry), clip_sec, rng)
        if log is not None:
            log.add(entry.audio_id)
        n, _ = noise_segment(noise_entries, len(s), rng, store, log)
        x, _ = mix_at_snr(s, n, float(rng.uniform(lo, hi)))
        batch.append((x, s))
    return batch


def sample_pseudose_batch(
    premixture_set: PremixtureSet,
    noise_entries,
    batch_size: int,
    snr_range_db: tuple[float, float],
    clip_sec: float,
    rng: np.random.Generator,
    store: AudioStore,
    log: AccessLog | None = None,
) -> list[tuple[AudioClip, AudioClip]]:
    """Draw (noise-injected input, premixed target) pairs.

    Targets are segments of the frozen premixed audio; the hidden clean
    sources are never touched. Draw order matches
    `sample_supervised_batch` so that, with premixing disabled, both
    samplers produce identical batches under the same RNG state.
    """
    if not premixture_set.items or not noise_entries:
        raise ValueError("premixture set and noise set must be nonempty")
    lo, hi = snr_range_db
    batch = []
    for _ in range(batch_size):
        item = premixture_set.items[int(rng.integers(len(premixture_set.items)))]
        s_tilde = random_clip(item.premixed, clip_sec, rng)
        if log is not None:
            log.add(item.audio_id)
        n, _ = noise_segment(noise_entries, len(s_tilde), rng, store, log)
        x_tilde, _ = mix_at_snr(s_tilde, n, float(rng.uniform(lo, hi)))
        batch.append((x_tilde, s_tilde))
    return batch
