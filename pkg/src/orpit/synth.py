"""Synthetic "speaker" sources, controlled-level mixing and dataset files.

Each synthetic speaker is a harmonic complex whose fundamental lives in its
own f0 band, with a slow amplitude envelope. Mixtures draw distinct bands so
the sources in one mixture never share a pitch range.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .wavio import Waveform, dequantize, quantize, read_wav, write_wav

PEAK = 0.7
MIX_PEAK = 0.9
MIN_HARMONICS = 6

# disjoint f0 bands, one per synthetic "speaker"
SPEAKER_BANDS: tuple[tuple[float, float], ...] = (
    (85.0, 110.0),
    (120.0, 150.0),
    (165.0, 205.0),
    (220.0, 270.0),
    (290.0, 350.0),
    (370.0, 440.0),
)

KINDS = ("harmonic-complex", "filtered-noise", "chirp")


@dataclass(frozen=True)
class SourceSpec:
    kind: str = "harmonic-complex"
    f0_range: tuple[float, float] = (100.0, 200.0)
    am_rate: float = 4.0
    am_depth: float = 0.5
    seed: int = 0

    def validate(self, sample_rate: int) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        lo, hi = self.f0_range
        if not 0 < lo <= hi < sample_rate / 2:
            raise ValueError(f"f0 range {self.f0_range} outside (0, {sample_rate / 2})")
        if not 0.0 <= self.am_depth <= 1.0:
            raise ValueError("modulation depth must lie in [0, 1]")
        if self.kind != "filtered-noise" and hi * MIN_HARMONICS >= sample_rate / 2:
            raise ValueError(f"f0 {hi} Hz leaves fewer than {MIN_HARMONICS} harmonics below Nyquist")


@dataclass
class MixtureSample:
    mixture: Waveform
    sources: list[Waveform]
    gains_db: list[float]
    id: str = ""

    @property
    def n(self) -> int:
        return len(self.sources)


def envelope(n: int, sample_rate: int, rate: float, depth: float, phase: float) -> np.ndarray:
    t = np.arange(n) / sample_rate
    return 1.0 - depth * (0.5 - 0.5 * np.cos(2 * np.pi * rate * t + phase))


def _harmonic_stack(f0_track: np.ndarray, sample_rate: int, rng) -> np.ndarray:
    nyq = sample_rate / 2
    n_harm = int(nyq // f0_track.max())
    if f0_track.max() * n_harm >= nyq:
        n_harm -= 1
    phase_track = 2 * np.pi * np.cumsum(f0_track) / sample_rate
    phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    out = np.zeros(f0_track.size)
    for h in range(1, n_harm + 1):
        out += np.sin(h * phase_track + phases[h - 1]) / h
    return out


def synth_source(spec: SourceSpec, duration: float, sample_rate: int = 8000) -> Waveform:
    """Render one source; deterministic in ``spec.seed``, peak scaled to 0.7."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    spec.validate(sample_rate)
    rng = np.random.default_rng(spec.seed)
    n = int(round(duration * sample_rate))
    lo, hi = spec.f0_range
    if spec.kind == "harmonic-complex":
        f0 = rng.uniform(lo, hi) if hi > lo else lo
        x = _harmonic_stack(np.full(n, f0), sample_rate, rng)
    elif spec.kind == "chirp":
        x = _harmonic_stack(np.linspace(lo, hi, n), sample_rate, rng)
    else:
        spectrum = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spectrum[(freqs < lo) | (freqs > hi)] = 0.0
        x = np.fft.irfft(spectrum, n=n)
    x = x * envelope(n, sample_rate, spec.am_rate, spec.am_depth, rng.uniform(0, 2 * np.pi))
    peak = np.max(np.abs(x))
    if peak == 0:
        raise ValueError("source rendered silent")
    return Waveform(PEAK * x / peak, sample_rate)


def _check_aligned(waves: Sequence[Waveform]) -> None:
    for w in waves[1:]:
        if len(w) != len(waves[0]) or w.sample_rate != waves[0].sample_rate:
            raise ValueError("all waveforms must share length and sample rate")


def mix_at_snr(sources: Sequence[Waveform], snr_db: Sequence[float]) -> MixtureSample:
    """Scale sources so source 1 sits ``snr_db[k]`` dB above source k.

    ``gains_db`` in the result is the level of each source relative to the
    first, i.e. ``-snr_db``.
    """
    if len(sources) == 0 or len(sources) != len(snr_db):
        raise ValueError("need one SNR value per source")
    _check_aligned(sources)
    ref = np.linalg.norm(sources[0].samples)
    if ref == 0:
        raise ValueError("source 1 has zero energy")
    scaled = [sources[0]]
    for src, g in zip(sources[1:], snr_db[1:]):
        norm = np.linalg.norm(src.samples)
        if norm == 0:
            raise ValueError("zero-energy source")
        a = (ref / norm) * 10.0 ** (-g / 20.0)
        scaled.append(src.with_samples(a * src.samples))
    mix = np.sum([s.samples for s in scaled], axis=0)
    gains = [0.0] + [-float(g) for g in snr_db[1:]]
    return MixtureSample(Waveform(mix, sources[0].sample_rate), scaled, gains)


def dominant_mixture(target: Waveform, interferers: Sequence[Waveform],
                     first_db: float = 18.0, step_db: float = 0.5) -> MixtureSample:
    """Interferer k (1-based) at ``-(first_db + step_db*(k-1))`` dB relative to the target."""
    levels = [0.0] + [first_db + step_db * k for k in range(len(interferers))]
    return mix_at_snr([target, *interferers], levels)


def random_source(rng: np.random.Generator, band: tuple[float, float], duration: float,
                  sample_rate: int) -> Waveform:
    spec = SourceSpec(
        kind="harmonic-complex",
        f0_range=band,
        am_rate=float(rng.uniform(2.0, 6.0)),
        am_depth=float(rng.uniform(0.2, 0.8)),
        seed=int(rng.integers(2**31)),
    )
    return synth_source(spec, duration, sample_rate)


def random_mixture(rng: np.random.Generator, n: int, duration: float = 1.0,
                   sample_rate: int = 8000, snr_range: tuple[float, float] = (-2.5, 2.5),
                   bands: Sequence[tuple[float, float]] = SPEAKER_BANDS) -> MixtureSample:
    """One mixture of ``n`` sources from distinct bands, quantization-safe.

    The mixture is rescaled to peak at most 0.9 and every source is snapped
    to the 16-bit grid, so the mixture (their exact sum) survives a WAV
    round trip unchanged.
    """
    if not 1 <= n <= len(bands):
        raise ValueError(f"n must lie in [1, {len(bands)}]")
    picks = rng.choice(len(bands), size=n, replace=False)
    sources = [random_source(rng, bands[b], duration, sample_rate) for b in picks]
    snrs = [0.0] + [float(g) for g in rng.uniform(snr_range[0], snr_range[1], size=n - 1)]
    sample = mix_at_snr(sources, snrs)
    return _snap(sample)


def _snap(sample: MixtureSample) -> MixtureSample:
    peak = np.max(np.abs(sample.mixture.samples))
    scale = min(1.0, MIX_PEAK / peak) if peak > 0 else 1.0
    sr = sample.mixture.sample_rate
    srcs = [dequantize(quantize(scale * s.samples)) for s in sample.sources]
    mix = np.sum(srcs, axis=0)
    return MixtureSample(Waveform(mix, sr), [Waveform(s, sr) for s in srcs],
                         sample.gains_db, sample.id)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    counts: dict[int, int] = field(default_factory=lambda: {2: 0, 3: 0, 4: 0})
    duration: float = 1.0
    sample_rate: int = 8000
    snr_range: tuple[float, float] = (-2.5, 2.5)
    seed: int = 0
    split: str = "train"


@dataclass
class ManifestRecord:
    id: str
    mixture: str
    sources: list[str]
    gains_db: list[float]
    n: int
    split: str
    seed: int

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id, "mixture": self.mixture, "sources": self.sources,
            "gains_db": self.gains_db, "n": self.n, "split": self.split, "seed": self.seed,
        }, sort_keys=False)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load(self, record: ManifestRecord) -> MixtureSample:
        mix = read_wav(self.resolve(record.mixture))
        srcs = [read_wav(self.resolve(p)) for p in record.sources]
        return MixtureSample(mix, srcs, list(record.gains_db), record.id)

    def load_all(self) -> list[MixtureSample]:
        return [self.load(r) for r in self.records]


def record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_samples(config: DatasetConfig) -> Iterable[tuple[int, int, MixtureSample]]:
    """Yield ``(index, n, sample)``; record i depends only on ``(seed, i)``."""
    index = 0
    for n in sorted(config.counts):
        for _ in range(config.counts[n]):
            rng = record_rng(config.seed, index)
            sample = random_mixture(rng, n, config.duration, config.sample_rate, config.snr_range)
            sample.id = f"{config.split}-{index:06d}"
            yield index, n, sample
            index += 1


def make_dataset(config: DatasetConfig, out_dir) -> DatasetManifest:
    """Write WAVs plus ``manifest.jsonl`` under ``out_dir``."""
    for n, c in config.counts.items():
        if c < 0:
            raise ValueError("counts must be >= 0")
        if not 1 <= n <= len(SPEAKER_BANDS):
            raise ValueError(f"unsupported source count {n}")
    out = Path(out_dir)
    records = []
    samples = list(generate_samples(config))
    if not samples:
        return DatasetManifest([], out)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise OSError(f"{out} is not writable")
    for index, n, sample in samples:
        stem = sample.id
        mix_rel = f"{stem}_mix.wav"
        write_wav(out / mix_rel, sample.mixture)
        src_rel = []
        for k, s in enumerate(sample.sources, 1):
            rel = f"{stem}_s{k}.wav"
            write_wav(out / rel, s)
            src_rel.append(rel)
        records.append(ManifestRecord(stem, mix_rel, src_rel, sample.gains_db, n,
                                      config.split, config.seed))
    write_manifest(DatasetManifest(records, out), out / "manifest.jsonl")
    return DatasetManifest(records, out)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for r in manifest.records:
            f.write(r.to_json() + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            records.append(ManifestRecord(d["id"], d["mixture"], list(d["sources"]),
                                          [float(g) for g in d["gains_db"]], int(d["n"]),
                                          d["split"], int(d["seed"])))
            if records[-1].n != len(records[-1].sources):
                raise ValueError(f"record {d['id']}: n does not match source count")
    return DatasetManifest(records, path.parent)
