"""Google Speech Commands v2 indexing, speaker splits and few-shot sessions.

GSC filenames look like ``<word>/<speaker>_nohash_<n>.wav``. The dataset is
never downloaded by this package: extract the v2 archive yourself and point
:func:`index_gsc` at the resulting directory.
"""
from __future__ import annotations

import hashlib
import logging
import os
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

GSC10 = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
GSC35 = (
    "backward", "bed", "bird", "cat", "dog", "down", "eight", "five", "follow", "forward",
    "four", "go", "happy", "house", "learn", "left", "marvin", "nine", "no", "off",
    "on", "one", "right", "seven", "sheila", "six", "stop", "three", "tree", "two",
    "up", "visual", "wow", "yes", "zero",
)
NOHASH = "_nohash_"


@dataclass(frozen=True)
class Vocabulary:
    name: str
    words: tuple

    def __len__(self):
        return len(self.words)

    def index(self, word):
        return self.words.index(word)

    def __contains__(self, word):
        return word in self.words


VOCABULARIES = {"GSC10": Vocabulary("GSC10", GSC10), "GSC35": Vocabulary("GSC35", GSC35)}


def get_vocabulary(name) -> Vocabulary:
    try:
        return VOCABULARIES[name.upper()]
    except KeyError:
        raise ValueError(f"unknown vocabulary {name!r}; choose from {sorted(VOCABULARIES)}") from None


@dataclass(frozen=True, order=True)
class UtteranceRecord:
    """One utterance. ``path`` is relative to the dataset root."""

    path: str
    speaker: str
    word: str

    def __post_init__(self):
        if not self.speaker:
            raise ValueError(f"empty speaker id for {self.path}")


@dataclass
class GscIndex:
    root: Path
    records: list
    skipped: int = 0

    @property
    def census(self):
        """speaker -> Counter(word -> utterance count)."""
        counts = defaultdict(Counter)
        for r in self.records:
            counts[r.speaker][r.word] += 1
        return dict(counts)

    @property
    def speakers(self):
        return sorted({r.speaker for r in self.records})

    def abspath(self, record):
        return self.root / record.path

    def for_vocabulary(self, vocabulary):
        return [r for r in self.records if r.word in vocabulary]


def parse_speaker(filename):
    """``'0a7c2a8d_nohash_0.wav'`` -> ``'0a7c2a8d'``; None if malformed."""
    stem = os.path.basename(filename)
    if not stem.endswith(".wav") or NOHASH not in stem:
        return None
    speaker = stem.split(NOHASH, 1)[0]
    return speaker or None


def index_gsc(root) -> GscIndex:
    """Scan an extracted GSC v2 tree. Malformed filenames are skipped and counted."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    records, skipped = [], 0
    for word_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if word_dir.name.startswith("_"):
            continue
        for f in sorted(word_dir.iterdir()):
            if f.suffix != ".wav":
                continue
            speaker = parse_speaker(f.name)
            if speaker is None:
                skipped += 1
                continue
            records.append(UtteranceRecord(f"{word_dir.name}/{f.name}", speaker, word_dir.name))
    if skipped:
        log.warning("skipped %d files with malformed names", skipped)
    return GscIndex(root, records, skipped)


@dataclass
class SpeakerSplit:
    vocabulary: str
    threshold: int
    online: list
    pretraining: list


def speaker_split(census, vocabulary: Vocabulary, threshold: int) -> SpeakerSplit:
    """Speakers with >= threshold utterances of every vocabulary word go to
    online learning; everyone else pretrains."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    online, pretraining = [], []
    for speaker in sorted(census):
        counts = census[speaker]
        if all(counts.get(w, 0) >= threshold for w in vocabulary.words):
            online.append(speaker)
        else:
            pretraining.append(speaker)
    return SpeakerSplit(vocabulary.name, threshold, online, pretraining)


def pretrain_split(records, ratio=0.9, seed=0):
    """Seeded record-level shuffle, then a train/validation cut at ``ratio``."""
    records = sorted(records)
    n_train = int(round(len(records) * ratio))
    if n_train < 1 or n_train >= len(records):
        raise ValueError(f"ratio {ratio} over {len(records)} records leaves an empty side")
    order = np.random.default_rng(seed).permutation(len(records))
    shuffled = [records[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


@dataclass(frozen=True)
class SessionSpec:
    speaker: str
    samples_per_class: int | None = 4  # None: all available
    classes_per_speaker: int | None = None  # None: whole vocabulary
    seed: int = 0


@dataclass
class Session:
    spec: SessionSpec
    classes: list
    train: list
    val: list
    test: list


def _rng(seed, speaker, salt):
    return np.random.default_rng([seed, zlib.crc32(speaker.encode()), salt])


def make_session(records, vocabulary: Vocabulary, spec: SessionSpec) -> Session:
    """Per-speaker few-shot split.

    Every vocabulary word contributes one test utterance, chosen independently of
    the sample and class budgets so the test set stays fixed for a given seed.
    The ``classes_per_speaker`` seeded-selected words each add one validation
    utterance and up to ``samples_per_class`` training utterances.
    """
    k, c = spec.samples_per_class, spec.classes_per_speaker or len(vocabulary)
    if not 1 <= c <= len(vocabulary):
        raise ValueError(f"classes_per_speaker {c} outside [1, {len(vocabulary)}]")
    if k is not None and k < 1:
        raise ValueError("samples_per_class must be >= 1")
    by_word = defaultdict(list)
    for r in records:
        if r.speaker == spec.speaker and r.word in vocabulary:
            by_word[r.word].append(r)

    order = {}
    for ci, word in enumerate(vocabulary.words):
        utts = sorted(by_word.get(word, []))
        if not utts:
            raise ValueError(f"speaker {spec.speaker} has no '{word}' utterance for the test set")
        order[word] = [utts[i] for i in _rng(spec.seed, spec.speaker, ci).permutation(len(utts))]

    chosen_idx = _rng(spec.seed, spec.speaker, 10_000).choice(len(vocabulary), size=c, replace=False)
    classes = [vocabulary.words[i] for i in sorted(chosen_idx)]
    train, val, test = [], [], []
    for word in vocabulary.words:
        test.append(order[word][0])
    for word in classes:
        utts = order[word]
        if len(utts) < 3:
            raise ValueError(f"speaker {spec.speaker} has {len(utts)} '{word}' utterances, needs >= 3")
        val.append(utts[1])
        rest = utts[2:]
        train.extend(rest if k is None else rest[:k])
    return Session(spec, classes, train, val, test)


def write_manifest(path, rows, header):
    """Line-oriented manifest: ``# key: value`` header lines, then
    ``path<TAB>speaker<TAB>label<TAB>role`` rows sorted for byte-stable output."""
    lines = [f"# {k}: {v}" for k, v in header.items()]
    lines += ["\t".join((r.path, r.speaker, r.word, role)) for r, role in sorted(rows)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    """Returns (header dict, list of (UtteranceRecord, role))."""
    header, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(":")
            header[key.strip()] = value.strip()
            continue
        p, speaker, word, role = line.split("\t")
        rows.append((UtteranceRecord(p, speaker, word), role))
    return header, rows


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
