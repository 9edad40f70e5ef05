"""WAV decoding and MFCC feature maps.

The default framing (40 ms frames every 20 ms over a 1 s clip) yields 49 frames;
ten DCT coefficients per frame give the 49x10 map the backbone consumes.
"""
from __future__ import annotations

import hashlib
import os
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.signal import get_window

SAMPLE_RATE = 16000


class WavFormatError(ValueError):
    """Unsupported or malformed WAV file; ``field`` names what was wrong."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = SAMPLE_RATE
    frame_length_ms: float = 40.0
    frame_stride_ms: float = 20.0
    fft_size: int = 1024
    num_mel: int = 40
    num_coefficients: int = 10
    mel_low_hz: float = 20.0
    mel_high_hz: float = 4000.0
    log_floor: float = 1e-6
    clip_samples: int = SAMPLE_RATE

    @property
    def frame_length(self):
        return int(round(self.sample_rate * self.frame_length_ms / 1000))

    @property
    def frame_stride(self):
        return int(round(self.sample_rate * self.frame_stride_ms / 1000))

    @property
    def num_frames(self):
        return 1 + (self.clip_samples - self.frame_length) // self.frame_stride

    @property
    def shape(self):
        return (self.num_frames, self.num_coefficients)


def load_wav(path) -> AudioClip:
    """Decode a PCM16 mono 16 kHz RIFF/WAVE file to floats in [-1, 1]."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            if wf.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: compressed audio not supported", "compression")
            if channels != 1:
                raise WavFormatError(f"{path}: {channels} channels, expected mono", "channels")
            if width != 2:
                raise WavFormatError(f"{path}: {8 * width}-bit samples, expected PCM16", "sample width")
            if rate != SAMPLE_RATE:
                raise WavFormatError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}", "sample rate")
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise WavFormatError(f"{path}: malformed WAV ({exc})", "header") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float32) / 32768.0, rate)


def save_wav(path, samples, sample_rate=SAMPLE_RATE):
    """Write float samples in [-1, 1] as PCM16 mono."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def pad_or_crop(clip: AudioClip, length=SAMPLE_RATE) -> AudioClip:
    """Right-pad short clips with zeros, center-crop long ones."""
    if clip.sample_rate != SAMPLE_RATE:
        raise WavFormatError(f"sample rate {clip.sample_rate}, expected {SAMPLE_RATE}", "sample rate")
    n = len(clip.samples)
    if n == 0:
        raise ValueError("empty clip")
    if n < length:
        out = np.zeros(length, dtype=np.float32)
        out[:n] = clip.samples
    else:
        start = (n - length) // 2
        out = np.asarray(clip.samples[start : start + length], dtype=np.float32)
    return AudioClip(out, clip.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_filterbank(config: MfccConfig) -> np.ndarray:
    """Triangular filters, evenly spaced on the mel scale: (fft_size//2+1, num_mel)."""
    edges = np.linspace(hz_to_mel(config.mel_low_hz), hz_to_mel(config.mel_high_hz), config.num_mel + 2)
    bin_mel = hz_to_mel(np.linspace(0.0, config.sample_rate / 2, config.fft_size // 2 + 1))[:, None]
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    rising = (bin_mel - lower) / (center - lower)
    falling = (upper - bin_mel) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mfcc(clip: AudioClip, config: MfccConfig = MfccConfig()) -> np.ndarray:
    """(num_frames, num_coefficients) MFCCs of a 1 s clip, before standardization."""
    x = np.asarray(clip.samples, dtype=np.float64)
    if clip.sample_rate != config.sample_rate or len(x) != config.clip_samples:
        raise ValueError(f"mfcc expects {config.clip_samples} samples at {config.sample_rate} Hz")
    frames = np.lib.stride_tricks.sliding_window_view(x, config.frame_length)[:: config.frame_stride]
    frames = frames[: config.num_frames] * get_window("hann", config.frame_length, fftbins=True)
    magnitude = np.abs(np.fft.rfft(frames, n=config.fft_size))
    energies = magnitude @ mel_filterbank(config)
    ceps = dct(np.log(energies + config.log_floor), type=2, norm="ortho", axis=1)
    return ceps[:, : config.num_coefficients].astype(np.float32)


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, n=10):
        return cls(np.zeros(n, np.float32), np.ones(n, np.float32))

    @classmethod
    def compute(cls, maps):
        """Per-coefficient moments pooled over utterances and frames."""
        stack = np.concatenate([np.asarray(m, np.float64).reshape(-1, np.shape(m)[-1]) for m in maps])
        return cls(stack.mean(axis=0).astype(np.float32), stack.std(axis=0).astype(np.float32))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], np.float32), np.asarray(d["std"], np.float32))


def standardize(feature_map, stats: FeatureStats, eps=1e-8):
    """Per-coefficient (x - mean) / std; a zero std is guarded by ``eps``."""
    x = np.asarray(feature_map, dtype=np.float32)
    return ((x - stats.mean) / np.maximum(stats.std, eps)).astype(np.float32)


# Feature cache record: little-endian uint32 ndim, uint32 extents, float32 data.
def write_feature_record(path, array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_feature_record(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    (ndim,) = struct.unpack_from("<I", buf, 0)
    shape = struct.unpack_from(f"<{ndim}I", buf, 4)
    data = np.frombuffer(buf, dtype="<f4", offset=4 + 4 * ndim)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: feature record truncated")
    return data.reshape(shape).astype(np.float32)


class FeatureExtractor:
    """Path -> raw MFCC map, optionally cached on disk keyed by path, file size,
    modification time and config."""

    def __init__(self, config: MfccConfig = MfccConfig(), cache_dir=None):
        self.config = config
        self.cache_dir = Path(cache_dir) if cache_dir else None

    def _cache_path(self, path):
        st = os.stat(path)
        key = f"{Path(path).resolve()}|{st.st_size}|{st.st_mtime_ns}|{self.config}"
        key = hashlib.sha1(key.encode()).hexdigest()
        return self.cache_dir / key[:2] / f"{key}.mfcc"

    def __call__(self, path) -> np.ndarray:
        if self.cache_dir is not None:
            cached = self._cache_path(path)
            if cached.exists():
                return read_feature_record(cached)
        feats = mfcc(pad_or_crop(load_wav(path), self.config.clip_samples), self.config)
        if self.cache_dir is not None:
            write_feature_record(cached, feats)
        return feats
