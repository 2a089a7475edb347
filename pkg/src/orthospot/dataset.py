"""Corpora, speaker-disjoint splits and quadruplet sampling.

Two sources feed the same :class:`CorpusSplit`:

* Google Speech Commands v2 on disk (``<root>/<word>/<speakerhash>_nohash_<n>.wav``),
  scanned by :func:`scan_gscd` and partitioned by :func:`build_split`.
* A procedurally generated corpus (:func:`make_synthetic`) where the keyword
  fixes a formant trajectory and the speaker fixes pitch and timbre, so both
  factors can be learned at desk scale.
"""

from __future__ import annotations

import logging
import os
import wave
import weakref
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import qmc

from .errors import DatasetError, NoEligibleSample

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CLIP_SAMPLES = SAMPLE_RATE
HELD_OUT_WORDS = ("happy", "marvin", "sheila")
PAPER_PARTITION = (1959, 159, 159)
MIN_UTTERANCES = 11
SPLIT_NAMES = ("train", "validation", "test")


def read_wav(path) -> np.ndarray:
    """Read a 16-bit mono 16 kHz PCM file as floats in [-1, 1)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise DatasetError(f"{path}: need 16-bit mono PCM, got {wf.getnchannels()} ch x {8 * wf.getsampwidth()} bit")
        if wf.getframerate() != SAMPLE_RATE:
            raise DatasetError(f"{path}: need {SAMPLE_RATE} Hz, got {wf.getframerate()} Hz")
        raw = wf.readframes(wf.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def pad_or_truncate(samples: np.ndarray, length: int = CLIP_SAMPLES) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] >= length:
        return samples[:length]
    return np.concatenate([samples, np.zeros(length - samples.shape[0])])


@dataclass(frozen=True, eq=False)
class AudioClip:
    """One 1 s utterance. Samples are held in memory or read lazily from ``source_path``."""

    clip_id: int
    keyword_id: int
    speaker_id: int
    source_path: str
    sample_rate: int = SAMPLE_RATE
    data: np.ndarray | None = field(default=None, repr=False)

    @property
    def samples(self) -> np.ndarray:
        if self.data is not None:
            return self.data
        return pad_or_truncate(read_wav(self.source_path))


@dataclass(frozen=True)
class IndexEntry:
    path: str
    keyword: str
    speaker: str


@dataclass(frozen=True)
class CorpusIndex:
    entries: tuple[IndexEntry, ...]
    skipped: int = 0

    @property
    def words(self) -> list[str]:
        return sorted({e.keyword for e in self.entries})

    @property
    def speakers(self) -> list[str]:
        return sorted({e.speaker for e in self.entries})

    def summary(self) -> dict:
        return {"utterances": len(self.entries), "words": len(self.words),
                "speakers": len(self.speakers), "skipped": self.skipped}


@dataclass(frozen=True, eq=False)
class CorpusSplit:
    train: tuple[AudioClip, ...]
    validation: tuple[AudioClip, ...]
    test: tuple[AudioClip, ...]
    keyword_vocab: tuple[str, ...]
    speaker_vocab: tuple[str, ...]
    speaker_partition: tuple[frozenset, frozenset, frozenset]

    def subset(self, name: str) -> tuple[AudioClip, ...]:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLIT_NAMES}")
        return getattr(self, name)

    def train_keyword_classes(self) -> list[int]:
        return sorted({c.keyword_id for c in self.train})

    def train_speaker_classes(self) -> list[int]:
        return sorted({c.speaker_id for c in self.train})

    def summary(self) -> dict:
        out = {}
        for name, speakers in zip(SPLIT_NAMES, self.speaker_partition):
            out[name] = {"utterances": len(self.subset(name)), "speakers": len(speakers)}
        return out


def _check_wav(path: Path) -> bool:
    try:
        with wave.open(str(path), "rb") as wf:
            return wf.getnchannels() == 1 and wf.getsampwidth() == 2 and wf.getframerate() == SAMPLE_RATE
    except (wave.Error, EOFError, OSError):
        return False


def scan_gscd(root_dir, validate: bool = True, workers: int | None = None) -> CorpusIndex:
    """Index every ``<word>/<speaker>_nohash_<n>.wav`` under ``root_dir``.

    Folders starting with ``_`` (background noise) are ignored. Files whose
    name has no speaker token, or that fail the WAV header check when
    ``validate`` is set, are skipped and counted.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist or is not a directory")
    candidates = []
    skipped = 0
    for word_dir in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("_")):
        for wav in sorted(word_dir.glob("*.wav")):
            speaker, sep, _ = wav.name.partition("_")
            if not sep or not speaker:
                skipped += 1
                continue
            candidates.append(IndexEntry(str(wav), word_dir.name, speaker))
    if validate and candidates:
        with ThreadPoolExecutor(max_workers=workers or min(8, os.cpu_count() or 1)) as pool:
            ok = list(pool.map(_check_wav, (Path(e.path) for e in candidates)))
        bad = ok.count(False)
        if bad:
            log.warning("skipped %d unreadable or non-16k-mono WAV files", bad)
        skipped += bad
        candidates = [e for e, good in zip(candidates, ok) if good]
    index = CorpusIndex(tuple(candidates), skipped)
    log.info("scanned %s: %d utterances, %d words, %d speakers", root, len(index.entries),
             len(index.words), len(index.speakers))
    return index


def proportional_partition(n_speakers: int, fractions: Sequence[float] = (0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    """Speaker counts for a small corpus; validation and test get at least one speaker each."""
    n_val = max(1, int(round(n_speakers * fractions[1])))
    n_test = max(1, int(round(n_speakers * fractions[2])))
    n_train = n_speakers - n_val - n_test
    if n_train < 2:
        raise DatasetError(f"{n_speakers} speakers cannot form a disjoint split with at least 2 training speakers")
    return n_train, n_val, n_test


def build_split(index: CorpusIndex, seed: int, partition: Sequence[int] = PAPER_PARTITION,
                min_utterances: int = MIN_UTTERANCES,
                excluded_words: Iterable[str] = HELD_OUT_WORDS) -> CorpusSplit:
    """Speaker-disjoint train/validation/test split of an index.

    Speakers with fewer than ``min_utterances`` utterances are dropped, the
    remaining ones are shuffled with ``seed`` and cut into ``partition``
    sized groups, and ``excluded_words`` are removed from training only.
    """
    counts = Counter(e.speaker for e in index.entries)
    eligible = sorted(s for s, n in counts.items() if n >= min_utterances)
    need = int(sum(partition))
    if len(eligible) < need:
        raise DatasetError(
            f"only {len(eligible)} speakers have >= {min_utterances} utterances "
            f"({len(counts)} speakers total); partition {tuple(partition)} needs {need}")
    order = np.random.default_rng(seed).permutation(len(eligible))
    shuffled = [eligible[i] for i in order]
    bounds = np.cumsum([0, *partition])
    groups = [frozenset(shuffled[bounds[i]:bounds[i + 1]]) for i in range(3)]
    if len(eligible) > need:
        log.info("%d eligible speakers left out of the partition", len(eligible) - need)

    keyword_vocab = tuple(index.words)
    speaker_vocab = tuple(index.speakers)
    kw_id = {w: i for i, w in enumerate(keyword_vocab)}
    spk_id = {s: i for i, s in enumerate(speaker_vocab)}
    excluded = set(excluded_words)
    subsets = ([], [], [])
    for clip_id, entry in enumerate(index.entries):
        for which, group in enumerate(groups):
            if entry.speaker in group:
                if which == 0 and entry.keyword in excluded:
                    break
                subsets[which].append(AudioClip(clip_id, kw_id[entry.keyword], spk_id[entry.speaker], entry.path))
                break
    partition_ids = tuple(frozenset(spk_id[s] for s in g) for g in groups)
    return CorpusSplit(tuple(subsets[0]), tuple(subsets[1]), tuple(subsets[2]),
                       keyword_vocab, speaker_vocab, partition_ids)


# --- synthetic corpus -------------------------------------------------------

_N_SEGMENTS = 3
_ENVELOPE_STEP = 16


@dataclass(frozen=True)
class _KeywordShape:
    formants: np.ndarray   # (segments, 2) F1/F2 targets in Hz
    durations: np.ndarray  # (segments,) relative lengths
    energy: np.ndarray     # (segments,) relative loudness
    pitch_slope: float


@dataclass(frozen=True)
class _Voice:
    f0: float
    tract_scale: float
    tilt: float
    bandwidth: float
    extra_resonance: float


def _keyword_shape(seed: int, k: int) -> _KeywordShape:
    rng = np.random.default_rng([seed, 1, k])
    f1 = rng.uniform(300.0, 900.0, _N_SEGMENTS)
    f2 = rng.uniform(900.0, 2600.0, _N_SEGMENTS)
    return _KeywordShape(np.stack([f1, f2], axis=1), rng.uniform(0.6, 1.4, _N_SEGMENTS),
                         rng.uniform(0.5, 1.0, _N_SEGMENTS), float(rng.uniform(-0.25, 0.25)))


_VOICE_RANGES = np.array([
    (100.0, 220.0),    # f0, Hz
    (0.93, 1.07),      # formant scale
    (0.7, 1.4),        # harmonic roll-off exponent
    (70.0, 140.0),     # formant bandwidth, Hz
    (3000.0, 4000.0),  # speaker resonance, Hz
])


def _voices(seed: int, n_speakers: int) -> list[_Voice]:
    # a scrambled Halton sequence spreads speakers evenly over timbre space,
    # so no two voices end up near-identical by chance
    unit = qmc.Halton(d=len(_VOICE_RANGES), scramble=True, seed=np.random.default_rng([seed, 2])).random(n_speakers)
    values = _VOICE_RANGES[:, 0] + unit * (_VOICE_RANGES[:, 1] - _VOICE_RANGES[:, 0])
    return [_Voice(*map(float, row)) for row in values]


def synthesize(shape: _KeywordShape, voice: _Voice, rng: np.random.Generator) -> np.ndarray:
    """Render one 1 s utterance: harmonic source shaped by moving formants."""
    onset = rng.uniform(0.05, 0.3)
    length = rng.uniform(0.5, 0.65)
    start = int(onset * SAMPLE_RATE)
    n = min(int(length * SAMPLE_RATE), CLIP_SAMPLES - start)
    t = np.arange(n) / SAMPLE_RATE

    # segment centres along the voiced span
    bounds = np.concatenate([[0.0], np.cumsum(shape.durations)])
    bounds = bounds / bounds[-1] * (n / SAMPLE_RATE)
    centres = 0.5 * (bounds[:-1] + bounds[1:])
    jitter = rng.uniform(0.97, 1.03, shape.formants.shape)
    formants = shape.formants * jitter * voice.tract_scale * rng.uniform(0.97, 1.03)
    coarse = t[::_ENVELOPE_STEP]
    f_tracks = np.stack([np.interp(coarse, centres, formants[:, j]) for j in range(2)])
    energy = np.interp(coarse, centres, shape.energy)

    f0_base = voice.f0 * rng.uniform(0.94, 1.06)
    f0 = f0_base * (1.0 + shape.pitch_slope * (t / t[-1] - 0.5))
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    f0_coarse = f0[::_ENVELOPE_STEP]

    n_harm = int(7800.0 // f0.min())
    m = np.arange(1, n_harm + 1)[:, None]
    freqs = m * f0_coarse[None, :]
    resonance = sum(np.exp(-0.5 * ((freqs - f_tracks[j]) / voice.bandwidth) ** 2) for j in range(2))
    resonance = resonance + 0.4 * np.exp(-0.5 * ((freqs - voice.extra_resonance) / (2 * voice.bandwidth)) ** 2)
    amps = (m ** -voice.tilt) * (0.05 + resonance) * energy[None, :]
    amps = np.where(freqs < 7800.0, amps, 0.0).astype(np.float32)
    # amplitudes are held constant over each envelope step
    n_blocks = amps.shape[1]
    padded = np.zeros(n_blocks * _ENVELOPE_STEP, dtype=np.float32)
    padded[:n] = phase
    carriers = np.sin(m.astype(np.float32)[:, :, None] * padded.reshape(n_blocks, _ENVELOPE_STEP)[None])
    voiced = np.einsum("mb,mbk->bk", amps, carriers).reshape(-1)[:n].astype(np.float64)

    ramp = min(320, n // 4)
    env = np.ones(n)
    env[:ramp] = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, ramp))
    env[-ramp:] = env[:ramp][::-1]
    voiced *= env
    voiced *= rng.uniform(0.2, 0.8) / np.max(np.abs(voiced))

    out = rng.normal(0.0, 2e-3, CLIP_SAMPLES)
    out[start:start + n] += voiced
    return np.clip(np.round(out * 32768.0), -32768, 32767) / 32768.0


def make_synthetic(n_keywords: int, n_speakers: int, clips_per_pair: int, seed: int,
                   fractions: Sequence[float] = (0.6, 0.2, 0.2)) -> CorpusSplit:
    """Generate ``n_keywords * n_speakers * clips_per_pair`` clips and split them by speaker."""
    if n_keywords < 2 or n_speakers < 4 or clips_per_pair < 1:
        raise DatasetError(
            f"synthetic corpus needs >= 2 keywords, >= 4 speakers and >= 1 clip per pair; "
            f"got {n_keywords}, {n_speakers}, {clips_per_pair}")
    partition = proportional_partition(n_speakers, fractions)
    shapes = [_keyword_shape(seed, k) for k in range(n_keywords)]
    voices = _voices(seed, n_speakers)
    keyword_vocab = tuple(f"kw{k}" for k in range(n_keywords))
    speaker_vocab = tuple(f"spk{s:03d}" for s in range(n_speakers))

    order = np.random.default_rng([seed, 3]).permutation(n_speakers)
    bounds = np.cumsum([0, *partition])
    groups = [frozenset(int(s) for s in order[bounds[i]:bounds[i + 1]]) for i in range(3)]
    subsets = ([], [], [])
    clip_id = 0
    for s in range(n_speakers):
        which = next(i for i, g in enumerate(groups) if s in g)
        for k in range(n_keywords):
            for c in range(clips_per_pair):
                rng = np.random.default_rng([seed, 4, k, s, c])
                samples = synthesize(shapes[k], voices[s], rng)
                samples.setflags(write=False)
                path = f"synthetic://{keyword_vocab[k]}/{speaker_vocab[s]}/{c}"
                subsets[which].append(AudioClip(clip_id, k, s, path, data=samples))
                clip_id += 1
    return CorpusSplit(tuple(subsets[0]), tuple(subsets[1]), tuple(subsets[2]),
                       keyword_vocab, speaker_vocab, tuple(groups))


def write_manifest(split: CorpusSplit, path) -> None:
    """``path<TAB>keyword<TAB>speaker<TAB>split`` per clip, train first."""
    with open(path, "w", encoding="utf-8") as fh:
        for name in SPLIT_NAMES:
            for clip in split.subset(name):
                fh.write(f"{clip.source_path}\t{split.keyword_vocab[clip.keyword_id]}\t"
                         f"{split.speaker_vocab[clip.speaker_id]}\t{name}\n")


def read_manifest(path) -> list[tuple[str, str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(tuple(line.rstrip("\n").split("\t")))
    return rows


# --- quadruplet sampling ----------------------------------------------------

@dataclass(frozen=True)
class Quadruplet:
    anchor: AudioClip
    s1: AudioClip  # same keyword, same speaker
    s2: AudioClip  # same keyword, other speaker
    s3: AudioClip  # other keyword, same speaker
    s4: AudioClip  # other keyword, other speaker


class QuadrupletSampler:
    """Draws scenario-matched partners for anchors from a pool of clips.

    Positions returned by :meth:`sample_positions` index into ``clips``.
    """

    def __init__(self, clips: Sequence[AudioClip]):
        self.clips = tuple(clips)
        kw = np.array([c.keyword_id for c in self.clips], dtype=np.int64)
        spk = np.array([c.speaker_id for c in self.clips], dtype=np.int64)
        if len(set(spk.tolist())) < 2 or len(set(kw.tolist())) < 2:
            raise DatasetError(
                f"quadruplet sampling needs at least 2 speakers and 2 keywords in the pool; "
                f"got {len(set(spk.tolist()))} speakers and {len(set(kw.tolist()))} keywords")
        self.keyword = kw
        self.speaker = spk
        self._position = {c.clip_id: i for i, c in enumerate(self.clips)}
        groups = defaultdict(list)
        for i, key in enumerate(zip(kw.tolist(), spk.tolist())):
            groups[key].append(i)
        self._pair = {k: np.array(v) for k, v in groups.items()}
        self._candidates: dict[tuple[int, int], tuple[np.ndarray, ...]] = {}

    def position(self, clip: AudioClip) -> int:
        try:
            return self._position[clip.clip_id]
        except KeyError:
            raise ValueError(f"clip {clip.clip_id} is not in the sampling pool") from None

    def _scenario_pools(self, k: int, s: int) -> tuple[np.ndarray, ...]:
        key = (k, s)
        pools = self._candidates.get(key)
        if pools is None:
            same_k = self.keyword == k
            same_s = self.speaker == s
            pools = (self._pair[key],
                     np.flatnonzero(same_k & ~same_s),
                     np.flatnonzero(~same_k & same_s),
                     np.flatnonzero(~same_k & ~same_s))
            self._candidates[key] = pools
        return pools

    def eligible(self, pos: int, scenarios: Sequence[int] = (1, 2, 3, 4)) -> bool:
        pools = self._scenario_pools(int(self.keyword[pos]), int(self.speaker[pos]))
        sizes = {1: pools[0].size - 1, 2: pools[1].size, 3: pools[2].size, 4: pools[3].size}
        return all(sizes[s] > 0 for s in scenarios)

    def sample_positions(self, pos: int, rng: np.random.Generator,
                         scenarios: Sequence[int] = (1, 2, 3, 4)) -> tuple[int, ...]:
        pools = self._scenario_pools(int(self.keyword[pos]), int(self.speaker[pos]))
        out = []
        for s in scenarios:
            pool = pools[s - 1]
            if s == 1:
                if pool.size < 2:
                    raise NoEligibleSample(f"anchor {self.clips[pos].clip_id}: no scenario-1 partner")
                j = int(rng.integers(pool.size - 1))
                # skip over the anchor itself
                j += int(pool[j] >= pos)
                out.append(int(pool[j]))
            else:
                if pool.size == 0:
                    raise NoEligibleSample(f"anchor {self.clips[pos].clip_id}: no scenario-{s} partner")
                out.append(int(pool[rng.integers(pool.size)]))
        return tuple(out)

    def sample(self, anchor: AudioClip, rng: np.random.Generator) -> Quadruplet:
        pos = self.position(anchor)
        p = self.sample_positions(pos, rng)
        return Quadruplet(anchor, *(self.clips[i] for i in p))

    def sample_two(self, anchor: AudioClip, rng: np.random.Generator) -> tuple[AudioClip, AudioClip]:
        pos = self.position(anchor)
        p1, p4 = self.sample_positions(pos, rng, (1, 4))
        return self.clips[p1], self.clips[p4]


_samplers: "weakref.WeakKeyDictionary[CorpusSplit, QuadrupletSampler]" = weakref.WeakKeyDictionary()


def train_sampler(split: CorpusSplit) -> QuadrupletSampler:
    sampler = _samplers.get(split)
    if sampler is None:
        sampler = _samplers[split] = QuadrupletSampler(split.train)
    return sampler


def sample_quadruplet(split: CorpusSplit, anchor: AudioClip, rng: np.random.Generator) -> Quadruplet:
    """Four training-set partners of ``anchor``, one per scenario.

    Raises :class:`NoEligibleSample` when some scenario has no candidate.
    """
    return train_sampler(split).sample(anchor, rng)


def sample_quadruplet_2scenario(split: CorpusSplit, anchor: AudioClip,
                                rng: np.random.Generator) -> tuple[AudioClip, AudioClip]:
    return train_sampler(split).sample_two(anchor, rng)
