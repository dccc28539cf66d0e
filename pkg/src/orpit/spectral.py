"""Hann-window STFT with 50% hop, its inverse, and log-mel features."""

from __future__ import annotations

import numpy as np

from .autodiff import LOG_EPS


def _check_window(window_len: int, hop: int) -> None:
    if window_len < 2 or window_len % 2:
        raise ValueError(f"window length must be even, got {window_len}")
    if hop != window_len // 2:
        raise ValueError("hop must be half the window length")


def hann(n: int) -> np.ndarray:
    # periodic Hann: shifted copies at n/2 sum to exactly 1
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft(x, window_len: int = 256, hop: int | None = None) -> np.ndarray:
    """Complex spectrogram ``[window_len//2 + 1, n_frames]``.

    The signal is zero-padded by one hop in front and up to a whole frame at
    the back, so every sample sits under two frames.
    """
    hop = window_len // 2 if hop is None else hop
    _check_window(window_len, hop)
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    n = x.size
    n_frames = -(-n // hop) + 1
    padded = np.zeros((n_frames + 1) * hop)
    padded[hop:hop + n] = x
    idx = np.arange(window_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * hann(window_len)
    return np.fft.rfft(frames, axis=1).T


def istft(spec: np.ndarray, window_len: int = 256, hop: int | None = None,
          length: int | None = None) -> np.ndarray:
    hop = window_len // 2 if hop is None else hop
    _check_window(window_len, hop)
    frames = np.fft.irfft(spec.T, n=window_len, axis=1)
    n_frames = frames.shape[0]
    out = np.zeros((n_frames + 1) * hop)
    for i in range(n_frames):
        out[i * hop:i * hop + window_len] += frames[i]
    out = out[hop:]
    if length is None:
        length = (n_frames - 1) * hop
    return out[:length]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, window_len: int, sample_rate: int) -> np.ndarray:
    """Triangular filters ``[n_mels, n_bins]`` on the HTK mel scale.

    The outer half of the first and last filter is flat, so every FFT bin
    carries weight from at least one filter.
    """
    n_bins = window_len // 2 + 1
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if n_mels > n_bins:
        raise ValueError(f"n_mels={n_mels} exceeds the {n_bins} FFT bins")
    freqs = np.arange(n_bins) * sample_rate / window_len
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        if m == 0:
            rise = np.ones_like(freqs)
        if m == n_mels - 1:
            fall = np.ones_like(freqs)
        fb[m] = np.clip(np.minimum(rise, fall), 0.0, None)
        if fb[m].sum() == 0:
            fb[m, np.argmin(np.abs(freqs - mid))] = 1.0
    return fb


def mel_features(x, window_len: int = 1024, hop: int | None = None, n_mels: int = 64,
                 sample_rate: int | None = None) -> np.ndarray:
    """``log10(mel @ |STFT| + eps)`` with shape ``[n_mels, n_frames]``."""
    sr = sample_rate if sample_rate is not None else getattr(x, "sample_rate", None)
    if sr is None:
        raise ValueError("sample_rate is required for raw arrays")
    fb = mel_filterbank(n_mels, window_len, sr)
    mag = np.abs(stft(x, window_len, hop))
    return np.log10(fb @ mag + LOG_EPS)
