"""One-and-rest permutation invariant training (OR-PIT) objective.

For ``N`` sources there are exactly ``N`` one-vs-rest splits. Split ``i``
scores ``-si_snr(one, s_i) - si_snr(rest, sum_{n != i} s_n) / (N - 1)``; the
lowest score wins and only its terms carry gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossBreakdown:
    one_terms: list[float]   # -si_snr(one, s_i) per split
    rest_terms: list[float]  # -si_snr(rest, r_i) per split, unweighted
    totals: list[float]
    best: int                # 0-based split index
    total: float


def _as_array(s) -> np.ndarray:
    return np.asarray(s.data if isinstance(s, Tensor) else getattr(s, "samples", s), dtype=np.float64)


def split_targets(sources: Sequence) -> tuple[list[np.ndarray], list[np.ndarray]]:
    srcs = [_as_array(s).ravel() for s in sources]
    rests = []
    for i in range(len(srcs)):
        others = [s for k, s in enumerate(srcs) if k != i]
        rest = others[0].copy()
        for s in others[1:]:
            rest = rest + s
        rests.append(rest)
    return srcs, rests


def or_pit_loss(est_one: Tensor, est_rest: Tensor, sources: Sequence) -> tuple[Tensor, int, LossBreakdown]:
    """Returns ``(loss, best, breakdown)`` with ``best`` 0-based (ties -> lowest)."""
    n = len(sources)
    if n < 2:
        raise ValueError("OR-PIT needs at least two sources")
    srcs, rests = split_targets(sources)
    size = est_one.data.size
    if est_rest.data.size != size or any(s.size != size for s in srcs):
        raise ad.ShapeError("or_pit_loss: all signals must have equal length")
    one64 = est_one.data.astype(np.float64)
    rest64 = est_rest.data.astype(np.float64)
    ones, restv, totals = [], [], []
    for i in range(n):
        a = ad.si_snr_terms(one64, srcs[i])[0]
        b = ad.si_snr_terms(rest64, rests[i])[0]
        ones.append(-a)
        restv.append(-b)
        totals.append(-(a + b / (n - 1)))
    best = int(np.argmin(totals))
    term = ad.add(ad.si_snr(est_one, srcs[best]),
                  _div(ad.si_snr(est_rest, rests[best]), n - 1))
    loss = ad.scalar_mul(term, -1.0)
    return loss, best, LossBreakdown(ones, restv, totals, best, totals[best])


def _div(t: Tensor, k: int) -> Tensor:
    # exact division keeps the graph value bit-identical to the split table
    if k == 1:
        return t
    return ad.scalar_div(t, k)


def upit_loss_n2(est_a: Tensor, est_b: Tensor, s1, s2) -> Tensor:
    """Two-speaker uPIT: the better of the two channel assignments."""
    r1, r2 = _as_array(s1).ravel(), _as_array(s2).ravel()
    a64, b64 = est_a.data.astype(np.float64), est_b.data.astype(np.float64)
    keep = -(ad.si_snr_terms(a64, r1)[0] + ad.si_snr_terms(b64, r2)[0])
    swap = -(ad.si_snr_terms(a64, r2)[0] + ad.si_snr_terms(b64, r1)[0])
    first, second = (r1, r2) if keep <= swap else (r2, r1)
    return ad.scalar_mul(ad.add(ad.si_snr(est_a, first), ad.si_snr(est_b, second)), -1.0)
