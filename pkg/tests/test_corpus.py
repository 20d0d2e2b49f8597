import json
import math

import numpy as np
import pytest
from scipy.stats import kstest

from pse.audio import AudioClip, ClipTooShortError, write_wav
from pse.corpus import (
    TAG_NOISE_EVAL,
    TAG_NOISE_PREMIX,
    TAG_NOISE_TRAIN,
    TAG_SPEECH,
    AccessLog,
    AudioStore,
    ManifestEntry,
    ManifestError,
    PartitionError,
    build_premixture,
    load_manifest,
    load_premixture_set,
    make_manifest,
    noise_segment,
    partition_speakers,
    sample_pseudose_batch,
    sample_supervised_batch,
    save_manifest,
    save_premixture_set,
    select_finetune_subset,
    total_duration,
)


def entry(path="a.wav", speaker="spk00", dur=1.5, sr=16000, tag=TAG_SPEECH):
    return ManifestEntry(path, speaker, dur, sr, tag)


class TestManifest:
    def test_empty_manifest_valid(self):
        assert len(make_manifest([])) == 0

    def test_nonpositive_duration_names_entry(self):
        with pytest.raises(ManifestError, match="bad.wav"):
            make_manifest([entry("ok.wav"), entry("bad.wav", dur=0.0)])

    def test_duplicate_paths_rejected(self):
        with pytest.raises(ManifestError, match="duplicate"):
            make_manifest([entry("a.wav"), entry("a.wav", speaker="spk01")])

    def test_mixed_sample_rates_rejected(self):
        with pytest.raises(ManifestError, match="mixed sample rates"):
            make_manifest([entry("a.wav"), entry("b.wav", sr=8000)])

    def test_unknown_tag_rejected(self):
        with pytest.raises(ManifestError, match="corpus_tag"):
            make_manifest([entry(tag="mystery")])

    def test_all_problems_reported_at_once(self):
        with pytest.raises(ManifestError) as err:
            make_manifest([entry("a.wav", dur=-1), entry("a.wav", sr=-3)])
        message = str(err.value)
        assert "duration_sec" in message and "sample_rate" in message and "duplicate" in message

    def test_round_trip(self, tmp_path):
        entries = [entry(f"/abs/u{i}.wav", f"spk{i % 3:02d}", 1.0 + i) for i in range(10)]
        manifest = make_manifest(entries)
        path = tmp_path / "m.jsonl"
        save_manifest(manifest, path)
        assert load_manifest(path) == manifest

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope.jsonl")

    def test_bad_schema_names_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"path": "a.wav"}\n')
        with pytest.raises(ManifestError, match="line 1"):
            load_manifest(path)

    def test_relative_paths_resolved_against_manifest_dir(self, tmp_path):
        path = tmp_path / "m.jsonl"
        save_manifest(make_manifest([entry("sub/u.wav")]), path)
        # rewrite with a relative path
        raw = json.loads(path.read_text())
        raw["path"] = "sub/u.wav"
        path.write_text(json.dumps(raw) + "\n")
        loaded = load_manifest(path)
        assert loaded.entries[0].path == str(tmp_path / "sub" / "u.wav")


class TestPartition:
    def test_deterministic(self, tiny_corpus):
        m = tiny_corpus["manifest"]
        a = partition_speakers(m, ["spk00", "spk01"], 3.0, seed=5)
        b = partition_speakers(m, ["spk00", "spk01"], 3.0, seed=5)
        assert a == b
        c = partition_speakers(m, ["spk00", "spk01"], 3.0, seed=6)
        assert a.finetune != c.finetune

    def test_background_excludes_test_speakers(self, tiny_corpus):
        p = tiny_corpus["partition"]
        assert {e.speaker_id for e in p.background}.isdisjoint(set(p.test_speakers))

    def test_budget_respected_and_tight(self, tiny_corpus):
        p = tiny_corpus["partition"]
        for speaker in p.test_speakers:
            used = total_duration(p.finetune[speaker])
            assert used <= 3.0 + 1e-9
            # adding any held-back utterance would overshoot the budget
            for utt in p.test_clean[speaker]:
                assert used + utt.duration_sec > 3.0 + 1e-9

    def test_zero_budget_empty_finetune(self, tiny_corpus):
        p = partition_speakers(tiny_corpus["manifest"], ["spk00"], 0.0, seed=1)
        assert p.finetune["spk00"] == ()
        assert len(p.test_clean["spk00"]) == 10

    def test_budget_exceeding_material_rejected(self, tiny_corpus):
        with pytest.raises(PartitionError, match="spk00"):
            partition_speakers(tiny_corpus["manifest"], ["spk00"], 60.0, seed=1)

    def test_missing_speaker_rejected(self, tiny_corpus):
        with pytest.raises(PartitionError, match="spk99"):
            partition_speakers(tiny_corpus["manifest"], ["spk99"], 3.0, seed=1)

    def test_disjoint_noise_roles(self, tiny_corpus):
        p = tiny_corpus["partition"]
        train = {e.path for e in p.noise_train}
        ev = {e.path for e in p.noise_eval}
        pm = {e.path for e in p.noise_premix}
        assert not (train & ev) and not (train & pm) and not (ev & pm)

    def test_json_round_trip(self, tiny_corpus):
        p = tiny_corpus["partition"]
        rebuilt = type(p).from_json(json.loads(json.dumps(p.to_json())))
        assert rebuilt == p

    def test_finetune_subset_selection(self, tiny_corpus):
        pool = tiny_corpus["partition"].finetune["spk00"]
        subset = select_finetune_subset(pool, 3.0, seed=11)
        assert 0 < total_duration(subset) <= 3.0 + 1e-9
        assert select_finetune_subset(pool, 0.0, seed=11) == ()
        assert select_finetune_subset(pool, 3.0, seed=11) == subset


class TestPremixture:
    def test_exact_snr_per_item(self, tiny_corpus):
        p = tiny_corpus["partition"]
        store = tiny_corpus["store"]
        pset = build_premixture(p.test_clean["spk00"], p.noise_premix, 10.0, seed=3, store=store)
        assert pset.premix_snr_db == 10.0
        for item, clean_entry in zip(pset.items, p.test_clean["spk00"]):
            clean = store.get(clean_entry)
            residual = item.premixed.samples - clean.samples
            measured = 20 * np.log10(clean.rms() / np.sqrt(np.mean(residual**2)))
            assert abs(measured - 10.0) < 1e-6
            assert item.clean_ref_id == clean_entry.path
            assert item.audio_id.startswith("premix:")

    def test_deterministic(self, tiny_corpus):
        p = tiny_corpus["partition"]
        a = build_premixture(p.test_clean["spk00"], p.noise_premix, 5.0, seed=3, store=tiny_corpus["store"])
        b = build_premixture(p.test_clean["spk00"], p.noise_premix, 5.0, seed=3, store=tiny_corpus["store"])
        for x, y in zip(a.items, b.items):
            np.testing.assert_array_equal(x.premixed.samples, y.premixed.samples)
            assert x.premix_noise_id == y.premix_noise_id

    def test_disabled_sentinel_passes_clean_through(self, tiny_corpus):
        p = tiny_corpus["partition"]
        store = tiny_corpus["store"]
        pset = build_premixture(p.test_clean["spk00"], p.noise_premix, math.inf, seed=3, store=store)
        for item, clean_entry in zip(pset.items, p.test_clean["spk00"]):
            np.testing.assert_array_equal(item.premixed.samples, store.get(clean_entry).samples)

    def test_snr_outside_configured_set_rejected(self, tiny_corpus):
        p = tiny_corpus["partition"]
        with pytest.raises(ValueError, match="configured set"):
            build_premixture(p.test_clean["spk00"], p.noise_premix, 7.0, seed=3, store=tiny_corpus["store"])

    def test_empty_noise_pool_rejected(self, tiny_corpus):
        p = tiny_corpus["partition"]
        with pytest.raises(ValueError, match="empty"):
            build_premixture(p.test_clean["spk00"], [], 10.0, seed=3, store=tiny_corpus["store"])

    def test_save_load_round_trip(self, tiny_corpus, tmp_path):
        p = tiny_corpus["partition"]
        store = tiny_corpus["store"]
        pset = build_premixture(p.test_clean["spk01"], p.noise_premix, 10.0, seed=3,
                                store=store, speaker_id="spk01")
        index = save_premixture_set(pset, tmp_path / "pm")
        loaded = load_premixture_set(index)
        assert loaded.speaker_id == "spk01" and loaded.premix_snr_db == 10.0
        assert [i.clean_ref_id for i in loaded.items] == [i.clean_ref_id for i in pset.items]
        for a, b in zip(loaded.items, pset.items):
            # float32 on disk
            np.testing.assert_allclose(a.premixed.samples, b.premixed.samples, atol=1e-7, rtol=0)


class TestSamplers:
    def test_supervised_reproducible_and_linear(self, tiny_corpus):
        p = tiny_corpus["partition"]
        store = tiny_corpus["store"]
        kwargs = dict(batch_size=4, snr_range_db=(0.0, 0.0), clip_sec=1.0, store=store)
        a = sample_supervised_batch(p.background, p.noise_train, rng=np.random.default_rng(8), **kwargs)
        b = sample_supervised_batch(p.background, p.noise_train, rng=np.random.default_rng(8), **kwargs)
        for (xa, sa), (xb, sb) in zip(a, b):
            np.testing.assert_array_equal(xa.samples, xb.samples)
            np.testing.assert_array_equal(sa.samples, sb.samples)
        for x, s in a:
            noise = x.samples - s.samples  # mixing linearity: residual is the scaled noise
            measured = 20 * np.log10(s.rms() / np.sqrt(np.mean(noise**2)))
            assert abs(measured - 0.0) < 1e-6

    def test_snr_distribution_uniform(self, tiny_corpus):
        p = tiny_corpus["partition"]
        store = tiny_corpus["store"]
        rng = np.random.default_rng(21)
        batch = sample_supervised_batch(
            p.background, p.noise_train, 10_000, (-5.0, 5.0), 0.25, rng, store
        )
        snrs = []
        for x, s in batch:
            noise = x.samples - s.samples
            snrs.append(20 * np.log10(s.rms() / np.sqrt(np.mean(noise**2))))
        stat = kstest(np.array(snrs), "uniform", args=(-5.0, 10.0))
        assert stat.pvalue > 0.01

    def test_pseudose_targets_bit_identical_to_premixture(self, tiny_corpus):
        p = tiny_corpus["partition"]
        store = tiny_corpus["store"]
        pset = build_premixture(p.test_clean["spk00"], p.noise_premix, 10.0, seed=3, store=store)
        log = AccessLog()
        batch = sample_pseudose_batch(pset, p.noise_train, 8, (-5, 5), 1.0, np.random.default_rng(4), store, log)
        stored = {item.audio_id: item.premixed.samples for item in pset.items}
        for x, s_tilde in batch:
            hits = [
                sid for sid, samples in stored.items()
                if any(np.array_equal(samples[o : o + len(s_tilde)], s_tilde.samples)
                       for o in range(len(samples) - len(s_tilde) + 1))
            ]
            assert hits, "target is not a verbatim segment of any premixture item"
        # only premixture ids and noise paths in the log, never clean paths
        clean_paths = {e.path for e in p.test_clean["spk00"]}
        assert not (log.unique() & clean_paths)
        assert any(i.startswith("premix:") for i in log.unique())

    def test_disabled_premixing_matches_supervised_batches(self, tiny_corpus):
        p = tiny_corpus["partition"]
        store = tiny_corpus["store"]
        entries = p.test_clean["spk00"]
        pset = build_premixture(entries, p.noise_premix, math.inf, seed=3, store=store)
        sup = sample_supervised_batch(entries, p.noise_train, 6, (-5, 5), 1.0,
                                      np.random.default_rng(7), store)
        pse = sample_pseudose_batch(pset, p.noise_train, 6, (-5, 5), 1.0,
                                    np.random.default_rng(7), store)
        for (xs, ss), (xp, sp) in zip(sup, pse):
            np.testing.assert_array_equal(xs.samples, xp.samples)
            np.testing.assert_array_equal(ss.samples, sp.samples)

    def test_noise_segment_ids_carry_offsets(self, tiny_corpus):
        p = tiny_corpus["partition"]
        seg, seg_id = noise_segment(p.noise_train, 1000, np.random.default_rng(0), tiny_corpus["store"])
        path, _, offset = seg_id.rpartition("@")
        assert path in {e.path for e in p.noise_train}
        assert 0 <= int(offset)
        assert len(seg) == 1000

    def test_short_source_rejected(self, tmp_path, rng):
        wav = tmp_path / "short.wav"
        write_wav(wav, AudioClip(rng.standard_normal(800) * 0.1), dtype="float32")
        e = ManifestEntry(str(wav), "", 0.05, 16000, TAG_NOISE_TRAIN)
        with pytest.raises(ClipTooShortError):
            noise_segment([e], 16000, np.random.default_rng(0), AudioStore())
