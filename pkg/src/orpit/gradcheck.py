"""Central finite-difference checks for the autodiff engine.

Use ``dtype=np.float64`` for the tight check mode; the float32 mode mirrors
training precision and needs a looser tolerance.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Graph, Tensor, backward


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int,
                 eps: float) -> np.ndarray:
    x = inputs[index]
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(fn(*inputs).data)
        flat[i] = orig - eps
        minus = float(fn(*inputs).data)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Graph() as g:
        out = fn(*inputs)
    backward(g, out)
    return [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    if den == 0:
        return 0.0
    return float(num / den)


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                    eps: float = 1e-3, dtype=np.float64, oracle_dtype=None) -> list[float]:
    """Relative error between analytic and central-difference gradients.

    ``fn`` receives one :class:`Tensor` per array and must return a scalar.
    Returns one error per input. The analytic pass runs at ``dtype``; the
    finite differences run at ``oracle_dtype`` (default: same as ``dtype``)
    on the same point after rounding to ``dtype``.
    """
    inputs = [Tensor(np.array(a, dtype=dtype)) for a in arrays]
    analytic = analytic_grads(fn, inputs)
    probes = inputs
    if oracle_dtype is not None:
        probes = [Tensor(t.data.astype(oracle_dtype)) for t in inputs]
    for t in probes:
        t.requires_grad = False
    errors = []
    for i in range(len(probes)):
        numeric = numeric_grad(fn, probes, i, eps)
        errors.append(relative_error(analytic[i], numeric))
    return errors
