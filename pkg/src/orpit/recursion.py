"""Recursive one-source-at-a-time separation and source counting.

Starting from ``r^0 = x``, step j computes ``(s^j, r^j) = F(r^{j-1})``. A
stopper decides after each step whether to recurse on ``r^j`` again.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .separator import SeparatorParams, run_batch, separate_long_arrays
from .wavio import Waveform

log = logging.getLogger(__name__)

SAFETY_CAP = 8
SILENCE_RMS = 1e-5


class NumericError(ArithmeticError):
    """A separation step produced non-finite samples."""

    def __init__(self, message: str, trace: RecursionTrace | None = None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class FixedIterations:
    j: int
    safety_cap: int = SAFETY_CAP

    def __post_init__(self):
        if self.j < 1:
            raise ValueError("FixedIterations needs j >= 1")


@dataclass(frozen=True)
class OracleCount:
    n: int
    safety_cap: int = SAFETY_CAP

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("OracleCount needs n >= 1")


@dataclass(frozen=True)
class ClassifierStop:
    """Continue while ``predict(r^j) >= threshold``."""

    predict: Callable[[Waveform], float]
    threshold: float = 0.5
    safety_cap: int = SAFETY_CAP

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")


@dataclass(frozen=True)
class MaxCap:
    limit: int
    safety_cap: int = SAFETY_CAP

    def __post_init__(self):
        if self.limit < 1:
            raise ValueError("MaxCap needs limit >= 1")


Stopper = Union[FixedIterations, OracleCount, ClassifierStop, MaxCap]


@dataclass
class Step:
    source: Waveform
    residual: Waveform
    decision: str  # "continue" or "stop"
    probability: float | None = None


@dataclass
class RecursionTrace:
    input: Waveform
    stopper: Stopper
    steps: list[Step] = field(default_factory=list)
    estimated_count: int | None = None
    truncated: bool = False
    low_confidence: bool = False
    terminal: bool = False

    def to_summary(self, stem_paths: list[str] | None = None) -> dict:
        return {
            "stopper": type(self.stopper).__name__,
            "steps": [{"step": i + 1, "decision": s.decision, "probability": s.probability}
                      for i, s in enumerate(self.steps)],
            "estimated_count": self.estimated_count,
            "truncated": self.truncated,
            "low_confidence": self.low_confidence,
            "stems": stem_paths or [],
        }

    def write_json(self, path, stem_paths: list[str] | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_summary(stem_paths), indent=2) + "\n",
                              encoding="utf-8")


def _planned_steps(stopper: Stopper) -> int:
    cap = stopper.safety_cap
    if isinstance(stopper, FixedIterations):
        return min(stopper.j, cap)
    if isinstance(stopper, OracleCount):
        return min(stopper.n - 1, cap)
    if isinstance(stopper, MaxCap):
        return min(stopper.limit, cap)
    return cap


def separate_recursive(params: SeparatorParams, x: Waveform, stopper: Stopper) -> RecursionTrace:
    trace = RecursionTrace(x, stopper)
    residual = x
    planned = _planned_steps(stopper)
    classifier = isinstance(stopper, ClassifierStop)
    silent = float(np.sqrt(np.mean(x.samples ** 2))) < SILENCE_RMS
    if classifier and silent:
        planned = 1
    if planned == 0:
        # OracleCount(1): the input already is the single source
        trace.terminal = True
        trace.estimated_count = 1
        return trace
    for j in range(1, planned + 1):
        one, rest = separate_long_arrays(params, residual.samples)
        if not (np.all(np.isfinite(one)) and np.all(np.isfinite(rest))):
            raise NumericError(f"step {j} produced non-finite samples", trace)
        step = Step(x.with_samples(one), x.with_samples(rest), "continue")
        trace.steps.append(step)
        residual = step.residual
        if classifier and not silent:
            step.probability = float(stopper.predict(step.residual))
            if step.probability < stopper.threshold:
                step.decision = "stop"
                trace.estimated_count = j
                break
    else:
        trace.steps[-1].decision = "stop"
        if classifier:
            if silent:
                trace.estimated_count = 1
                trace.low_confidence = True
            else:
                trace.estimated_count = planned
                trace.truncated = True
        elif isinstance(stopper, MaxCap):
            trace.truncated = True
            trace.estimated_count = planned
        elif isinstance(stopper, OracleCount):
            trace.estimated_count = stopper.n
            trace.truncated = stopper.n - 1 > planned
        else:
            trace.estimated_count = planned
            trace.truncated = stopper.j > planned
    trace.terminal = True
    return trace


def stems_from_trace(trace: RecursionTrace) -> list[Waveform]:
    """Output stems: ``s^1..s^J``, plus ``r^{N-1}`` under oracle stopping."""
    if not trace.terminal:
        raise ValueError("trace has not terminated")
    stems = [s.source for s in trace.steps]
    if isinstance(trace.stopper, OracleCount):
        stems.append(trace.steps[-1].residual if trace.steps else trace.input)
    return stems


def estimate_count(params: SeparatorParams, x: Waveform, predict: Callable[[Waveform], float],
                   threshold: float = 0.5, safety_cap: int = SAFETY_CAP) -> int:
    trace = separate_recursive(params, x, ClassifierStop(predict, threshold, safety_cap))
    if trace.truncated:
        log.warning("count hit the safety cap of %d", safety_cap)
    return int(trace.estimated_count)


def oracle_stems_batch(params: SeparatorParams, mixtures: np.ndarray, n: int) -> list[np.ndarray]:
    """Batched oracle recursion for equal-length clips ``mixtures[B, T]``.

    Returns ``n`` arrays of shape ``[B, T]`` (``s^1..s^{n-1}``, ``r^{n-1}``).
    Only valid for clips no longer than one segment.
    """
    if mixtures.shape[1] > params.config.segment_len:
        raise ValueError("batched recursion needs clips within one segment")
    stems = []
    residual = np.asarray(mixtures, dtype=np.float64)
    for _ in range(n - 1):
        one, residual = run_batch(params, residual)
        stems.append(one)
    stems.append(residual)
    return stems
