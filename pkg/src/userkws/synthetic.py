"""A small synthetic corpus laid out like Google Speech Commands.

Each word is a sequence of three tones; each speaker scales every frequency by a
personal pitch factor and adds a personal formant-like resonance. That gives a
speaker-dependent domain shift the embedding can learn, on a tree that the GSC
indexer and the whole pipeline accept unchanged. For offline tests and demos only.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, save_wav
from .dataset import GSC10


def word_tones(words, seed=1234):
    rng = np.random.default_rng(seed)
    return {w: rng.uniform(300.0, 2500.0, size=3) for w in words}


def speaker_voice(speaker_index, seed=1234):
    rng = np.random.default_rng([seed, speaker_index])
    return {"pitch": rng.uniform(0.8, 1.25), "resonance": rng.uniform(400.0, 3000.0),
            "gain": rng.uniform(0.2, 0.6)}


def synth_utterance(tones, voice, rng, duration=0.75, length=SAMPLE_RATE):
    n = int(duration * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    seg = n // len(tones)
    sig = np.zeros(n)
    for i, f in enumerate(tones):
        f = f * voice["pitch"] * rng.uniform(0.97, 1.03)
        part = slice(i * seg, (i + 1) * seg)
        sig[part] = np.sin(2 * np.pi * f * t[part])
        sig[part] += 0.5 * np.sin(2 * np.pi * voice["resonance"] * t[part])
    sig *= np.hanning(n) * voice["gain"]
    out = np.zeros(length)
    start = rng.integers(0, length - n)
    out[start : start + n] = sig
    out += 0.005 * rng.standard_normal(length)
    return out


def make_corpus(root, speakers, words=GSC10, seed=1234, duration=0.75):
    """Write ``<root>/<word>/<speaker>_nohash_<i>.wav`` files.

    ``speakers`` maps speaker id -> utterances per word (an int, or a dict
    word -> count). Returns the root path.
    """
    root = Path(root)
    tones = word_tones(words, seed)
    for si, (speaker, counts) in enumerate(sorted(speakers.items())):
        voice = speaker_voice(si, seed)
        rng = np.random.default_rng([seed, si, 7])
        for word in words:
            count = counts.get(word, 0) if isinstance(counts, dict) else counts
            (root / word).mkdir(parents=True, exist_ok=True)
            for i in range(count):
                save_wav(root / word / f"{speaker}_nohash_{i}.wav",
                         synth_utterance(tones[word], voice, rng, duration))
    return root
