"""OR-PIT training over mixed 2- and 3-source batches, plus recursive fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .loss import or_pit_loss
from .metrics import best_permutation_score, si_snr
from .optim import AdamState, adam_step
from .recursion import NumericError, oracle_stems_batch
from .separator import SeparatorConfig, SeparatorParams, forward, init_params, save_checkpoint
from .synth import DatasetManifest, MixtureSample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 42
    n_ratio: dict[int, float] = field(default_factory=lambda: {2: 0.5, 3: 0.5})
    val_fraction: float = 0.05
    val_every: int = 1
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    clip_norm: float = 5.0
    halve_lr_patience: int = 0
    stop_grad_recursion: bool = False
    spot_check: bool = True
    model: SeparatorConfig = field(default_factory=SeparatorConfig)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not math.isclose(sum(self.n_ratio.values()), 1.0, abs_tol=1e-9):
            raise ValueError("n_ratio values must sum to 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    val_sisnri_n2: float
    val_sisnri_n3: float
    seconds: float
    split_hist: dict[int, int]
    lr: float
    spot_check_delta: float = 0.0


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0

    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "loss", "val_sisnri_n2", "val_sisnri_n3", "seconds"])
            for e in self.epochs:
                w.writerow([e.epoch, f"{e.loss:.6f}", f"{e.val_sisnri_n2:.4f}",
                            f"{e.val_sisnri_n3:.4f}", f"{e.seconds:.2f}"])


def _samples(data) -> list[MixtureSample]:
    if isinstance(data, DatasetManifest):
        return data.load_all()
    return list(data)


def split_validation(samples: Sequence[MixtureSample], fraction: float, seed: int):
    """Stratified hold-out: the same fraction of every source count."""
    rng = np.random.default_rng([seed, 7])
    train, val = [], []
    by_n: dict[int, list[MixtureSample]] = {}
    for s in samples:
        by_n.setdefault(s.n, []).append(s)
    for n in sorted(by_n):
        group = by_n[n]
        order = rng.permutation(len(group))
        k = int(round(fraction * len(group)))
        val += [group[i] for i in order[:k]]
        train += [group[i] for i in order[k:]]
    return train, val


def epoch_batches(samples: Sequence[MixtureSample], config: TrainConfig, epoch: int) -> list[list[int]]:
    """Shuffled batches whose source-count mix follows ``config.n_ratio``.

    Each epoch visits every training mixture once; groups are interleaved so
    every batch carries roughly the configured share of each count.
    """
    rng = np.random.default_rng([config.seed, epoch])
    groups = {n: [i for i, s in enumerate(samples) if s.n == n] for n in sorted(config.n_ratio)}
    queues = {n: list(rng.permutation(g)) for n, g in groups.items() if g}
    order = []
    credit = {n: 0.0 for n in queues}
    while any(queues.values()):
        live = [n for n in queues if queues[n]]
        for n in live:
            credit[n] += config.n_ratio[n]
        pick = max(live, key=lambda n: (credit[n], -n))
        credit[pick] -= 1.0
        order.append(int(queues[pick].pop()))
    bs = config.batch_size
    return [order[i:i + bs] for i in range(0, len(order), bs)]


def _batch_arrays(samples: Sequence[MixtureSample], idx: Sequence[int], dtype) -> tuple[Tensor, list]:
    x = np.stack([samples[i].mixture.samples for i in idx]).astype(dtype)[:, None, :]
    targets = [[s.samples for s in samples[i].sources] for i in idx]
    return Tensor(x), targets


def _batch_loss(params: SeparatorParams, x: Tensor, targets) -> tuple[Tensor, list[int], list[float]]:
    one, rest = forward(params, x)
    losses, best, values = [], [], []
    for b, srcs in enumerate(targets):
        l, i, bd = or_pit_loss(ad.select(one, b), ad.select(rest, b), srcs)
        losses.append(l)
        best.append(i)
        values.append(bd.total)
    total = losses[0]
    for l in losses[1:]:
        total = ad.add(total, l)
    return ad.scalar_div(total, len(losses)), best, values


def _grads(params: SeparatorParams) -> dict[str, np.ndarray]:
    return {k: t.grad for k, t in params.tensors.items() if t.grad is not None}


def _zero_grads(params: SeparatorParams) -> None:
    for t in params.tensors.values():
        t.grad = None


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(scale)
    return norm


def validation_sisnri(params: SeparatorParams, samples: Sequence[MixtureSample], n: int,
                      batch: int = 16) -> float:
    """Mean best-permutation SI-SNRi with oracle stopping over mixtures with ``n`` sources."""
    group = [s for s in samples if s.n == n]
    if not group:
        return float("nan")
    scores = []
    for i in range(0, len(group), batch):
        chunk = group[i:i + batch]
        mix = np.stack([s.mixture.samples for s in chunk])
        stems = oracle_stems_batch(params, mix, n)
        for b, s in enumerate(chunk):
            ests = [st[b] for st in stems]
            refs = [src.samples for src in s.sources]
            _, mean_est = best_permutation_score(ests, refs)
            base = np.mean([si_snr(s.mixture.samples, r) for r in refs])
            scores.append(mean_est - base)
    return float(np.mean(scores))


def _save(params: SeparatorParams, config: TrainConfig, name: str) -> None:
    if config.checkpoint_dir:
        out = Path(config.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, out / name)


def _score(e: EpochLog) -> float:
    vals = [v for v in (e.val_sisnri_n2, e.val_sisnri_n3) if math.isfinite(v)]
    return float(np.mean(vals)) if vals else -e.loss


def _run(params: SeparatorParams, train: list[MixtureSample], val: list[MixtureSample],
         config: TrainConfig, step_fn) -> tuple[SeparatorParams, TrainLog]:
    state = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    logbook = TrainLog()
    best_params, best_score = params.copy(), -math.inf
    dtype = params.tensors["enc.w"].dtype
    stale = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        hist: dict[int, int] = {}
        total, count, delta = 0.0, 0, 0.0
        for k, idx in enumerate(epoch_batches(train, config, epoch)):
            x, targets = _batch_arrays(train, idx, dtype)
            _zero_grads(params)
            with Graph() as g:
                loss, best = step_fn(params, x, targets)
            value = float(loss.data)
            if not math.isfinite(value):
                _save(best_params, config, "last_good.orp")
                raise NumericError(f"non-finite loss at epoch {epoch}; last good parameters kept")
            if k == 0 and config.spot_check:
                with_graph_free = step_fn(params, x, targets)[0]
                delta = abs(float(with_graph_free.data) - value)
            ad.backward(g, loss)
            grads = _grads(params)
            _clip(grads, config.clip_norm)
            adam_step(params.tensors, grads, state)
            for i in best:
                hist[i] = hist.get(i, 0) + 1
            total += value * len(idx)
            count += len(idx)
        entry = EpochLog(epoch, total / max(count, 1), float("nan"), float("nan"),
                         time.perf_counter() - t0, dict(sorted(hist.items())), state.lr, delta)
        if val and (epoch % config.val_every == 0 or epoch == config.epochs):
            entry.val_sisnri_n2 = validation_sisnri(params, val, 2)
            entry.val_sisnri_n3 = validation_sisnri(params, val, 3)
        entry.seconds = time.perf_counter() - t0
        logbook.epochs.append(entry)
        log.info("epoch %d loss %.3f val n2 %.2f n3 %.2f (%.1fs)", epoch, entry.loss,
                 entry.val_sisnri_n2, entry.val_sisnri_n3, entry.seconds)
        score = _score(entry)
        if not val or math.isfinite(entry.val_sisnri_n2) or math.isfinite(entry.val_sisnri_n3):
            if score > best_score:
                best_score, best_params, logbook.best_epoch = score, params.copy(), epoch
                stale = 0
            else:
                stale += 1
                if config.halve_lr_patience and stale >= config.halve_lr_patience:
                    state.lr /= 2
                    stale = 0
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            _save(params, config, f"epoch{epoch:03d}.orp")
    for t in best_params.tensors.values():
        t.requires_grad = True
    return best_params, logbook


def _orpit_step(params: SeparatorParams, x: Tensor, targets):
    loss, best, _ = _batch_loss(params, x, targets)
    return loss, best


def train_orpit(data, config: TrainConfig | None = None,
                init: SeparatorParams | None = None) -> tuple[SeparatorParams, TrainLog]:
    """Train the separator with the OR-PIT loss; returns the best-validation parameters."""
    config = config or TrainConfig()
    config.validate()
    samples = _samples(data)
    if not samples:
        raise ValueError("no training mixtures")
    params = init.copy() if init is not None else init_params(config.model, seed=config.seed)
    for t in params.tensors.values():
        t.requires_grad = True
    if config.epochs == 0:
        return params, TrainLog()
    train, val = split_validation(samples, config.val_fraction, config.seed)
    unknown = {s.n for s in train} - set(config.n_ratio)
    if unknown:
        raise ValueError(f"training data holds source counts {sorted(unknown)} outside n_ratio")
    return _run(params, train, val, config, _orpit_step)


def _finetune_step(config: TrainConfig):
    def step(params: SeparatorParams, x: Tensor, targets):
        one, rest = forward(params, x)
        losses, best = [], []
        second_targets = []
        for b, srcs in enumerate(targets):
            l, i, _ = or_pit_loss(ad.select(one, b), ad.select(rest, b), srcs)
            losses.append(l)
            best.append(i)
            second_targets.append([s for k, s in enumerate(srcs) if k != i])
        if config.stop_grad_recursion:
            rest_in = Tensor(rest.data.copy())
        else:
            rest_in = rest
        one2, rest2 = forward(params, rest_in)
        for b, srcs in enumerate(second_targets):
            l, _, _ = or_pit_loss(ad.select(one2, b), ad.select(rest2, b), srcs)
            losses.append(l)
        total = losses[0]
        for l in losses[1:]:
            total = ad.add(total, l)
        return ad.scalar_div(total, len(targets)), best
    return step


def fine_tune_recursive(params: SeparatorParams, data, config: TrainConfig | None = None
                        ) -> tuple[SeparatorParams, TrainLog]:
    """Two-step recursive fine-tuning on 3-source mixtures.

    Step 1 scores OR-PIT on the mixture; step 2 feeds the step-1 residual
    back through the separator and scores OR-PIT against the two sources
    the winning split left in the residual. The two losses are summed.
    """
    config = config or TrainConfig(epochs=5, n_ratio={3: 1.0})
    config.validate()
    samples = _samples(data)
    if not samples:
        raise ValueError("no fine-tuning mixtures")
    if any(s.n != 3 for s in samples):
        raise ValueError("fine-tuning expects 3-source mixtures")
    params = params.copy()
    for t in params.tensors.values():
        t.requires_grad = True
    if config.epochs == 0:
        return params, TrainLog()
    if set(config.n_ratio) != {3}:
        config = TrainConfig(**{**config.__dict__, "n_ratio": {3: 1.0}})
    train, val = split_validation(samples, config.val_fraction, config.seed)
    return _run(params, train, val, config, _finetune_step(config))
