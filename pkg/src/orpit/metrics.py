"""Separation scores: SI-SNR, projection SDR, permutation alignment, IBM oracle."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import SNR_CAP_DB, SNR_EPS_DEN, DegenerateReferenceError, si_snr_terms
from .spectral import istft, stft
from .wavio import Waveform

log = logging.getLogger(__name__)

SDR_NOTE = "sdri_db is projection SDR (optimal scaling, no mean removal), not BSSEval SDR"


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


@dataclass
class SISNRBreakdown:
    s_target: np.ndarray
    e_noise: np.ndarray
    value_db: float


def si_snr_breakdown(estimate, reference) -> SISNRBreakdown:
    est, ref = _arr(estimate), _arr(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch {est.shape} vs {ref.shape}")
    value, s_target, e_noise, _, _ = si_snr_terms(est, ref)
    return SISNRBreakdown(s_target, e_noise, value)


def si_snr(estimate, reference) -> float:
    """Scale-invariant SNR in dB, capped at +/-60 dB."""
    return si_snr_breakdown(estimate, reference).value_db


def si_snr_improvement(estimate, reference, mixture) -> float:
    return si_snr(estimate, reference) - si_snr(mixture, reference)


def projection_sdr(estimate, reference) -> float:
    """Like :func:`si_snr` but on the raw signals (no mean removal)."""
    est, ref = _arr(estimate), _arr(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch {est.shape} vs {ref.shape}")
    ref_energy = np.dot(ref, ref)
    if not ref_energy > 0:
        raise DegenerateReferenceError("reference is all zeros")
    target = (np.dot(est, ref) / ref_energy) * ref
    noise = est - target
    t, e = np.dot(target, target), np.dot(noise, noise)
    if e < SNR_EPS_DEN * t:
        return SNR_CAP_DB
    if t == 0 or t < SNR_EPS_DEN * e:
        return -SNR_CAP_DB
    return float(10.0 * np.log10(t / e))


def sdr_improvement(estimate, reference, mixture) -> float:
    return projection_sdr(estimate, reference) - projection_sdr(mixture, reference)


def best_permutation_score(estimates: Sequence, references: Sequence) -> tuple[tuple[int, ...], float]:
    """Exhaustive alignment; ``perm[i]`` is the estimate assigned to reference i.

    Ties go to the lexicographically smallest permutation.
    """
    n = len(references)
    if len(estimates) != n:
        raise ValueError(f"{len(estimates)} estimates for {n} references")
    if not 1 <= n <= 6:
        raise ValueError("best_permutation_score supports 1..6 signals")
    table = np.array([[si_snr(e, r) for e in estimates] for r in references])
    best, best_val = None, -np.inf
    for perm in itertools.permutations(range(n)):
        val = table[np.arange(n), perm].mean()
        if val > best_val:
            best, best_val = perm, val
    return best, float(best_val)


def ibm_masks(references: Sequence, window_len: int = 256) -> np.ndarray:
    """Binary masks ``[n_src, bins, frames]``; each bin goes to the loudest reference."""
    mags = np.stack([np.abs(stft(_arr(r), window_len)) for r in references])
    winner = np.argmax(mags, axis=0)  # first max wins ties
    return (winner[None] == np.arange(len(references))[:, None, None]).astype(np.float64)


def ibm_separate(mixture, references: Sequence, window_len: int = 256) -> list[Waveform]:
    mix = _arr(mixture)
    sr = getattr(mixture, "sample_rate", 8000)
    for r in references:
        if _arr(r).shape != mix.shape:
            raise ValueError("references must match the mixture length")
    spec = stft(mix, window_len)
    masks = ibm_masks(references, window_len)
    return [Waveform(istft(m * spec, window_len, length=mix.size), sr) for m in masks]


# --------------------------------------------------------------------------
# set evaluation
# --------------------------------------------------------------------------

@dataclass
class RecordScore:
    id: str
    n: int
    si_snri_db: float
    sdri_db: float
    perm: tuple[int, ...]
    n_estimates: int


@dataclass
class EvalReport:
    records: list[RecordScore] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)

    def mean(self, attr: str = "si_snri_db", n: int | None = None) -> float:
        vals = [getattr(r, attr) for r in self.records if n is None or r.n == n]
        return float(np.mean(vals)) if vals else float("nan")

    def counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for r in self.records:
            out[r.n] = out.get(r.n, 0) + 1
        return dict(sorted(out.items()))

    def summary(self) -> dict:
        per_n = {
            str(n): {"count": c, "si_snri_db": self.mean("si_snri_db", n),
                     "sdri_db": self.mean("sdri_db", n)}
            for n, c in self.counts().items()
        }
        return {
            "count": len(self.records),
            "failed": len(self.failures),
            "si_snri_db": self.mean("si_snri_db") if self.records else None,
            "sdri_db": self.mean("sdri_db") if self.records else None,
            "per_n": per_n,
            "note": SDR_NOTE,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["id", "n", "si_snri_db", "sdri_db", "perm"])
            for r in self.records:
                w.writerow([r.id, r.n, f"{r.si_snri_db:.6f}", f"{r.sdri_db:.6f}",
                            "-".join(str(p) for p in r.perm)])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n", encoding="utf-8")


def _align(estimates: Sequence, references: Sequence, mixture) -> tuple[tuple[int, ...], list]:
    """Pair estimates to references when the counts may differ.

    Surplus estimates are dropped by the search; a missing estimate is
    replaced by the unprocessed mixture (improvement 0 dB for that source).
    """
    n = len(references)
    ests = list(estimates)
    while len(ests) < n:
        ests.append(mixture)
    if len(ests) == n:
        perm, _ = best_permutation_score(ests, references)
        return perm, [ests[p] for p in perm]
    table = np.array([[si_snr(e, r) for e in ests] for r in references])
    best, best_val = None, -np.inf
    for perm in itertools.permutations(range(len(ests)), n):
        val = table[np.arange(n), perm].mean()
        if val > best_val:
            best, best_val = perm, val
    return best, [ests[p] for p in best]


def score_record(record_id: str, mixture, references: Sequence, estimates: Sequence) -> RecordScore:
    perm, aligned = _align(estimates, references, mixture)
    si = [si_snr_improvement(e, r, mixture) for e, r in zip(aligned, references)]
    sd = [sdr_improvement(e, r, mixture) for e, r in zip(aligned, references)]
    return RecordScore(record_id, len(references), float(np.mean(si)), float(np.mean(sd)),
                       tuple(int(p) for p in perm), len(estimates))


def evaluate_set(samples, separate: Callable, stopper=None, jobs: int = 1) -> EvalReport:
    """Score ``separate`` over a manifest (or a list of mixture samples).

    ``separate(sample, stopper)`` returns the estimated stems for one
    mixture. Records that fail to load are counted in ``failures`` and left
    out of every aggregate.
    """
    from .synth import DatasetManifest

    if isinstance(samples, DatasetManifest):
        manifest = samples
        loaders = [(r.id, lambda r=r: manifest.load(r)) for r in manifest.records]
    else:
        loaders = [(s.id, lambda s=s: s) for s in samples]

    def run(item):
        rid, load = item
        try:
            sample = load()
        except (OSError, ValueError) as exc:
            log.warning("record %s skipped: %s", rid, exc)
            return rid, None, str(exc)
        stems = separate(sample, stopper)
        return rid, score_record(sample.id or rid, sample.mixture, sample.sources, stems), None

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(run, loaders))
    else:
        results = [run(item) for item in loaders]
    report = EvalReport()
    for rid, score, err in results:
        if score is None:
            report.failures.append((rid, err))
        else:
            report.records.append(score)
    return report
