import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthospot.dataset import (AudioClip, CorpusIndex, IndexEntry, QuadrupletSampler, build_split,
                               make_synthetic, pad_or_truncate, read_manifest, read_wav, sample_quadruplet,
                               sample_quadruplet_2scenario, scan_gscd, write_manifest, write_wav)
from orthospot.errors import DatasetError, NoEligibleSample


# --- GSCD scanning ------------------------------------------------------------

def test_scan_counts_fixture(gscd_root):
    index = scan_gscd(gscd_root)
    summary = index.summary()
    assert summary == {"utterances": 57, "words": 3, "speakers": 5, "skipped": 0}
    assert index.words == ["happy", "no", "yes"]


def test_scan_one_folder_of_three(tmp_path):
    (tmp_path / "yes").mkdir()
    for i in range(3):
        write_wav(tmp_path / "yes" / f"spk_nohash_{i}.wav", np.zeros(100))
    s = scan_gscd(tmp_path).summary()
    assert (s["utterances"], s["words"]) == (3, 1)


def test_scan_empty_directory(tmp_path):
    assert scan_gscd(tmp_path).summary() == {"utterances": 0, "words": 0, "speakers": 0, "skipped": 0}


def test_scan_missing_root(tmp_path):
    with pytest.raises(DatasetError):
        scan_gscd(tmp_path / "nope")


def test_scan_skips_unreadable_and_counts(gscd_root):
    (gscd_root / "yes" / "ffff_nohash_0.wav").write_bytes(b"not a wav")
    with wave.open(str(gscd_root / "no" / "ffff_nohash_1.wav"), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(8000)
        wf.writeframes(b"\0\0" * 10)
    (gscd_root / "no" / "nounderscore.wav").write_bytes(b"")
    index = scan_gscd(gscd_root)
    assert index.summary()["utterances"] == 57
    assert index.skipped == 3


def test_read_wav_checks_format(tmp_path):
    path = tmp_path / "stereo.wav"
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(2)
        wf.setsampwidth(2)
        wf.setframerate(16000)
        wf.writeframes(b"\0\0\0\0")
    with pytest.raises(DatasetError):
        read_wav(path)


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(-0.9, 0.9, 500)
    write_wav(tmp_path / "a.wav", x)
    np.testing.assert_allclose(read_wav(tmp_path / "a.wav"), x, atol=1 / 32768)


def test_pad_or_truncate():
    assert pad_or_truncate(np.ones(10), 16).tolist() == [1.0] * 10 + [0.0] * 6
    assert pad_or_truncate(np.arange(20.0), 16).tolist() == list(range(16))


def test_lazy_clip_reads_and_pads(gscd_root):
    entry = scan_gscd(gscd_root).entries[0]
    clip = AudioClip(0, 0, 0, entry.path)
    assert clip.samples.shape == (16000,)


# --- splits -------------------------------------------------------------------

def test_build_split_filters_partitions_and_excludes(gscd_root):
    index = scan_gscd(gscd_root)
    split = build_split(index, seed=0, partition=(2, 1, 1))
    train, val, test = split.speaker_partition
    assert not (train & val) and not (train & test) and not (val & test)
    dropped = split.speaker_vocab.index("eeee5555")
    assert dropped not in train | val | test
    happy = split.keyword_vocab.index("happy")
    assert all(c.keyword_id != happy for c in split.train)
    held_out = [c for c in split.validation + split.test if c.keyword_id == happy]
    assert held_out  # held-out words stay in evaluation
    for name, group in zip(("train", "validation", "test"), split.speaker_partition):
        assert {c.speaker_id for c in split.subset(name)} <= group


def test_build_split_threshold_is_inclusive(gscd_root):
    index = scan_gscd(gscd_root)
    split = build_split(index, seed=0, partition=(2, 1, 1))
    kept = set().union(*split.speaker_partition)
    assert split.speaker_vocab.index("bbbb2222") in kept  # exactly 11 utterances


def test_build_split_seeded(gscd_root):
    index = scan_gscd(gscd_root)
    a = build_split(index, seed=5, partition=(2, 1, 1))
    b = build_split(index, seed=5, partition=(2, 1, 1))
    assert a.speaker_partition == b.speaker_partition
    partitions = {build_split(index, seed=s, partition=(2, 1, 1)).speaker_partition for s in range(10)}
    assert len(partitions) > 1


def test_build_split_too_few_speakers(gscd_root):
    with pytest.raises(DatasetError, match="only 4 speakers"):
        build_split(scan_gscd(gscd_root), seed=0, partition=(3, 1, 1))


def test_build_split_ten_speaker_fixture():
    entries = tuple(IndexEntry(f"s{s}/{i}.wav", f"w{i % 3}", f"s{s}") for s in range(10) for i in range(11))
    split = build_split(CorpusIndex(entries), seed=3, partition=(6, 2, 2))
    sizes = [len(g) for g in split.speaker_partition]
    assert sizes == [6, 2, 2]
    a, b, c = split.speaker_partition
    assert not (a & b or a & c or b & c)


# --- synthetic corpus -----------------------------------------------------------

def test_synthetic_counts_and_disjointness(small_split):
    total = len(small_split.train) + len(small_split.validation) + len(small_split.test)
    assert total == 4 * 10 * 2
    assert [len(g) for g in small_split.speaker_partition] == [6, 2, 2]
    a, b, c = small_split.speaker_partition
    assert not (a & b or a & c or b & c)
    for clip in small_split.train:
        assert clip.samples.shape == (16000,)
        assert np.abs(clip.samples).max() <= 1.0


def test_synthetic_full_size_count():
    split = make_synthetic(8, 20, 1, seed=0)
    assert len(split.train) + len(split.validation) + len(split.test) == 160
    assert [len(g) for g in split.speaker_partition] == [12, 4, 4]


def test_synthetic_is_deterministic():
    a = make_synthetic(2, 4, 2, seed=7)
    b = make_synthetic(2, 4, 2, seed=7)
    for x, y in zip(a.train + a.test, b.train + b.test):
        assert np.array_equal(x.samples, y.samples)
    c = make_synthetic(2, 4, 2, seed=8)
    assert not np.array_equal(a.train[0].samples, c.train[0].samples)


def test_synthetic_same_keyword_other_speaker_differs(small_split):
    clips = small_split.train
    x = clips[0]
    y = next(c for c in clips if c.keyword_id == x.keyword_id and c.speaker_id != x.speaker_id)
    assert not np.allclose(x.samples, y.samples)


def test_synthetic_too_small():
    with pytest.raises(DatasetError):
        make_synthetic(1, 10, 2, seed=0)
    with pytest.raises(DatasetError):
        make_synthetic(3, 3, 2, seed=0)


def test_manifest_round_trip(tmp_path, small_split):
    write_manifest(small_split, tmp_path / "m.tsv")
    rows = read_manifest(tmp_path / "m.tsv")
    assert len(rows) == 80
    assert {r[3] for r in rows} == {"train", "validation", "test"}
    first = small_split.train[0]
    assert rows[0] == (first.source_path, small_split.keyword_vocab[first.keyword_id],
                       small_split.speaker_vocab[first.speaker_id], "train")


# --- quadruplets ----------------------------------------------------------------

def _check_quadruplet(q):
    a = q.anchor
    assert q.s1.keyword_id == a.keyword_id and q.s1.speaker_id == a.speaker_id
    assert q.s2.keyword_id == a.keyword_id and q.s2.speaker_id != a.speaker_id
    assert q.s3.keyword_id != a.keyword_id and q.s3.speaker_id == a.speaker_id
    assert q.s4.keyword_id != a.keyword_id and q.s4.speaker_id != a.speaker_id
    assert all(c is not a for c in (q.s1, q.s2, q.s3, q.s4))


def test_quadruplet_predicates_over_1000_draws(small_split):
    rng = np.random.default_rng(0)
    clips = small_split.train
    for i in range(1000):
        _check_quadruplet(sample_quadruplet(small_split, clips[i % len(clips)], rng))


def test_two_scenario_predicates_over_1000_draws(small_split):
    rng = np.random.default_rng(1)
    clips = small_split.train
    for i in range(1000):
        a = clips[i % len(clips)]
        s1, s4 = sample_quadruplet_2scenario(small_split, a, rng)
        assert s1 is not a and (s1.keyword_id, s1.speaker_id) == (a.keyword_id, a.speaker_id)
        assert s4.keyword_id != a.keyword_id and s4.speaker_id != a.speaker_id


def _clips(spec):
    return [AudioClip(i, k, s, f"c{i}", data=np.zeros(1)) for i, (k, s) in enumerate(spec)]


def test_singleton_speaker_has_no_scenario_partner():
    clips = _clips([(0, 0), (0, 0), (1, 0), (1, 0), (0, 1), (1, 1), (1, 1), (0, 2), (0, 2)])
    sampler = QuadrupletSampler(clips)
    rng = np.random.default_rng(0)
    lonely = 4  # the only (kw 0, spk 1) clip: no scenario-1 partner
    assert not sampler.eligible(lonely)
    with pytest.raises(NoEligibleSample):
        sampler.sample(clips[lonely], rng)
    # speaker 2 never says keyword 1: no scenario-3 partner
    assert not sampler.eligible(7)
    assert sampler.eligible(7, (1, 2, 4))
    _check_quadruplet(sampler.sample(clips[0], rng))


def test_impossible_corpus_is_fatal():
    with pytest.raises(DatasetError):
        QuadrupletSampler(_clips([(0, 0), (1, 0), (0, 0)]))


def test_anchor_outside_pool(small_split):
    with pytest.raises(ValueError):
        sample_quadruplet(small_split, small_split.test[0], np.random.default_rng(0))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=4, max_size=40),
       st.integers(0, 2**32 - 1))
def test_sampler_property(spec, seed):
    if len({k for k, _ in spec}) < 2 or len({s for _, s in spec}) < 2:
        return
    clips = _clips(spec)
    sampler = QuadrupletSampler(clips)
    rng = np.random.default_rng(seed)
    for pos, clip in enumerate(clips):
        if sampler.eligible(pos):
            _check_quadruplet(sampler.sample(clip, rng))
        else:
            with pytest.raises(NoEligibleSample):
                sampler.sample(clip, rng)
