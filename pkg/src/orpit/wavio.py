"""Mono 16-bit PCM WAV reading and writing."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PCM_SCALE = 32768.0


class FormatError(ValueError):
    """A file is not in the expected on-disk format."""


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> Waveform:
        return Waveform(samples, self.sample_rate)


def quantize(samples: np.ndarray) -> np.ndarray:
    """Float samples to int16 codes: round half away from zero, then clamp."""
    x = np.asarray(samples, dtype=np.float64) * PCM_SCALE
    q = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(q, -32768, 32767).astype(np.int16)


def dequantize(codes: np.ndarray) -> np.ndarray:
    return codes.astype(np.float64) / PCM_SCALE


def write_wav(path, wav: Waveform) -> None:
    codes = quantize(wav.samples)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(wav.sample_rate))
        w.writeframes(codes.astype("<i2").tobytes())


def read_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if channels != 1:
        raise FormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    if len(raw) == 0 or len(raw) % 2:
        raise FormatError(f"{path}: empty or truncated sample data")
    codes = np.frombuffer(raw, dtype="<i2")
    return Waveform(dequantize(codes), rate)
