"""Stop classifier and the multiclass source-count baseline.

Both are the same small CNN over log-mel features (mel bands as input
channels): two ``conv k3 -> relu -> maxpool 2`` blocks, a time average and
one dense layer. The binary head answers "does this residual still hold a
source?"; the multiclass head guesses the source count directly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Graph, Tensor
from .optim import AdamState, adam_step
from .recursion import SAFETY_CAP, SILENCE_RMS
from .separator import SeparatorParams, run_batch
from .spectral import mel_features
from .synth import DatasetManifest, MixtureSample
from .wavio import FormatError, Waveform

log = logging.getLogger(__name__)

MIN_FRAMES = 4  # two pool-by-2 stages need at least four frames
KINDS = ("mixture", "residual", "overrun", "noise", "silence")


@dataclass(frozen=True)
class FeatureConfig:
    window_len: int = 1024
    hop: int = 512
    n_mels: int = 64
    sample_rate: int = 8000
    normalize: bool = True  # scale each clip to unit RMS before featurizing

    def validate(self) -> None:
        if self.hop < 1 or self.hop > self.window_len:
            raise ValueError("hop must lie in [1, window_len]")
        if not 1 <= self.n_mels <= 128:
            raise ValueError("n_mels must lie in [1, 128]")


@dataclass
class ClassifierParams:
    head: str  # "binary" or "multiclass"
    k_max: int
    features: FeatureConfig
    tensors: dict[str, Tensor]
    feat_mean: np.ndarray
    feat_std: np.ndarray
    val_accuracy: float = float("nan")

    @property
    def n_out(self) -> int:
        return 1 if self.head == "binary" else self.k_max

    def copy(self) -> ClassifierParams:
        return ClassifierParams(self.head, self.k_max, self.features,
                                {k: Tensor(t.data.copy(), requires_grad=True, name=k)
                                 for k, t in self.tensors.items()},
                                self.feat_mean.copy(), self.feat_std.copy(), self.val_accuracy)


@dataclass
class FeatureSet:
    features: np.ndarray  # [N, n_mels, frames]
    labels: np.ndarray  # [N] int
    kinds: list[str]
    config: FeatureConfig

    def __len__(self) -> int:
        return len(self.labels)

    def positive_fraction(self) -> float:
        return float(np.mean(self.labels == 1))


@dataclass
class ClassifierTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-5
    hidden: int = 32
    val_fraction: float = 0.1


@dataclass
class CountEvalResult:
    classes: tuple[int, ...]
    confusion: np.ndarray  # rows: true count, columns: predicted count
    per_class: dict[int, float] = field(default_factory=dict)
    accuracy: float = 0.0

    @classmethod
    def from_pairs(cls, true: Sequence[int], pred: Sequence[int]) -> CountEvalResult:
        true = np.asarray(true, dtype=int)
        pred = np.asarray(pred, dtype=int)
        top = int(max(true.max(), pred.max()))
        classes = tuple(range(1, top + 1))
        conf = np.zeros((top, top), dtype=int)
        np.add.at(conf, (true - 1, pred - 1), 1)
        per = {int(c): float(conf[c - 1, c - 1] / conf[c - 1].sum())
               for c in np.unique(true)}
        return cls(classes, conf, per, float(np.trace(conf) / len(true)))


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------

def featurize(x, config: FeatureConfig) -> np.ndarray:
    """Log-mel features ``[n_mels, frames]`` with at least ``MIN_FRAMES`` frames."""
    samples = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    if samples.size < config.window_len:
        raise ValueError(f"clip of {samples.size} samples is shorter than one "
                         f"{config.window_len}-sample feature frame")
    if config.normalize:
        rms = float(np.sqrt(np.mean(samples ** 2)))
        if rms > SILENCE_RMS:
            samples = samples / rms
    f = mel_features(samples, config.window_len, config.hop, config.n_mels, config.sample_rate)
    if f.shape[1] < MIN_FRAMES:
        f = np.pad(f, ((0, 0), (0, MIN_FRAMES - f.shape[1])), mode="edge")
    return f


def _featurize_all(clips: Sequence[np.ndarray], config: FeatureConfig) -> np.ndarray:
    return np.stack([featurize(c, config) for c in clips])


def _samples(data) -> list[MixtureSample]:
    if isinstance(data, DatasetManifest):
        return data.load_all()
    return list(data)


def _noise_clip(rng: np.random.Generator, length: int) -> np.ndarray:
    level = 10.0 ** rng.uniform(-4.5, -2.0)
    return level * rng.standard_normal(length)


def build_stop_training_set(separator: SeparatorParams, data, seed: int = 0,
                            config: FeatureConfig | None = None,
                            balance: float = 0.5) -> FeatureSet:
    """Labelled residuals for the stop classifier.

    For a mixture of ``n`` sources, oracle recursion gives the mixture and
    residuals ``r^1..r^{n-1}`` (positives, label 1) and one extra step past
    the true count gives ``r^n`` (negative, label 0). Low-level noise clips
    and one exact-silence clip are added as negatives until the positive
    share is ``balance``.
    """
    config = config or FeatureConfig()
    config.validate()
    samples = _samples(data)
    if not samples:
        raise ValueError("no mixtures to build a stop training set from")
    clips, labels, kinds = [], [], []
    by_key: dict[tuple[int, int], list[MixtureSample]] = {}
    for s in samples:
        by_key.setdefault((s.n, s.mixture.samples.size), []).append(s)
    for (n, _), group in sorted(by_key.items()):
        residual = np.stack([s.mixture.samples for s in group])
        clips += list(residual)
        labels += [1] * len(group)
        kinds += ["mixture"] * len(group)
        for j in range(1, n + 1):
            _, residual = run_batch(separator, residual)
            clips += list(residual)
            labels += [1 if j < n else 0] * len(group)
            kinds += ["residual" if j < n else "overrun"] * len(group)
    rng = np.random.default_rng([seed, 11])
    length = samples[0].mixture.samples.size
    n_pos = sum(labels)
    n_extra = max(1, int(math.ceil(n_pos / balance - len(labels))))
    for i in range(n_extra):
        if i == 0:
            clips.append(np.zeros(length))
            kinds.append("silence")
        else:
            clips.append(_noise_clip(rng, length))
            kinds.append("noise")
        labels.append(0)
    return FeatureSet(_featurize_all(clips, config), np.asarray(labels), kinds, config)


def count_feature_set(data, config: FeatureConfig | None = None) -> FeatureSet:
    """Mixture features labelled with their source count (for the baseline)."""
    config = config or FeatureConfig()
    samples = _samples(data)
    if not samples:
        raise ValueError("no mixtures")
    feats = _featurize_all([s.mixture.samples for s in samples], config)
    return FeatureSet(feats, np.asarray([s.n for s in samples]), ["mixture"] * len(samples), config)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

def init_classifier(head: str, features: FeatureConfig, k_max: int = 1, hidden: int = 32,
                    seed: int = 0) -> ClassifierParams:
    if head not in ("binary", "multiclass"):
        raise ValueError(f"unknown head {head!r}")
    if head == "multiclass" and k_max < 2:
        raise ValueError("multiclass head needs k_max >= 2")
    n_out = 1 if head == "binary" else k_max
    shapes = {
        "conv1.w": (hidden, features.n_mels, 3), "conv1.b": (hidden,),
        "conv2.w": (hidden, hidden, 3), "conv2.b": (hidden,),
        "dense.w": (hidden, n_out), "dense.b": (n_out,),
    }
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            fan_in = shape[0] if name == "dense.w" else int(np.prod(shape[1:]))
            b = math.sqrt(3.0 / fan_in)
            arr = rng.uniform(-b, b, size=shape)
        tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    return ClassifierParams(head, k_max if head == "multiclass" else 1, features, tensors,
                            np.zeros(features.n_mels, np.float32),
                            np.ones(features.n_mels, np.float32))


def _logits(params: ClassifierParams, feats: np.ndarray) -> Tensor:
    """Forward ``feats[B, n_mels, frames]`` to logits ``[B, n_out]``."""
    p = params.tensors
    z = (feats - params.feat_mean[:, None]) / params.feat_std[:, None]
    h = Tensor(z.astype(np.float32))
    for layer in ("conv1", "conv2"):
        h = ad.conv1d(ad.pad1d(h, 1, 1), p[f"{layer}.w"])
        h = ad.max_pool1d(ad.relu(ad.add_bias(h, p[f"{layer}.b"])), 2)
    return ad.add_row(ad.matmul(ad.mean_time(h), p["dense.w"]), p["dense.b"])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def predict_batch(params: ClassifierParams, clips: np.ndarray) -> np.ndarray:
    """Source-bearing probabilities for equal-length clips ``[B, T]``."""
    if params.head != "binary":
        raise ValueError("predict_batch needs a binary-head classifier")
    feats = _featurize_all(list(np.atleast_2d(clips)), params.features)
    return _sigmoid(_logits(params, feats).data[:, 0].astype(np.float64))


def predict_is_source(params: ClassifierParams, waveform) -> float:
    """Probability that ``waveform`` still contains a source."""
    samples = waveform.samples if isinstance(waveform, Waveform) else np.asarray(waveform, float)
    return float(predict_batch(params, samples[None])[0])


def predict_count(params: ClassifierParams, clips: np.ndarray) -> np.ndarray:
    """Multiclass head: predicted source counts (1-based) for clips ``[B, T]``."""
    if params.head != "multiclass":
        raise ValueError("predict_count needs a multiclass-head classifier")
    feats = _featurize_all(list(np.atleast_2d(clips)), params.features)
    return _logits(params, feats).data.argmax(axis=1) + 1


def _accuracy(params: ClassifierParams, feats: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    z = _logits(params, feats).data
    pred = (z[:, 0] >= 0).astype(int) if params.head == "binary" else z.argmax(axis=1)
    return float(np.mean(pred == labels))


def _fit(params: ClassifierParams, fs: FeatureSet, targets: np.ndarray,
         config: ClassifierTrainConfig, seed: int) -> tuple[ClassifierParams, list[float]]:
    rng = np.random.default_rng([seed, 3])
    order = rng.permutation(len(targets))
    n_val = int(round(config.val_fraction * len(targets)))
    val, train = order[:n_val], order[n_val:]
    mean = fs.features[train].mean(axis=(0, 2))
    std = fs.features[train].std(axis=(0, 2))
    params.feat_mean = mean.astype(np.float32)
    params.feat_std = np.maximum(std, 1e-3).astype(np.float32)
    state = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    losses = []
    for epoch in range(config.epochs):
        perm = np.random.default_rng([seed, epoch]).permutation(train)
        total = 0.0
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i:i + config.batch_size]
            for t in params.tensors.values():
                t.grad = None
            with Graph() as g:
                logits = _logits(params, fs.features[idx])
                if params.head == "binary":
                    loss = ad.bce_with_logits(logits, targets[idx])
                else:
                    loss = ad.softmax_xent(logits, targets[idx])
            ad.backward(g, loss)
            grads = {k: t.grad for k, t in params.tensors.items() if t.grad is not None}
            adam_step(params.tensors, grads, state)
            total += float(loss.data) * len(idx)
        losses.append(total / len(perm))
        log.debug("classifier epoch %d loss %.4f", epoch + 1, losses[-1])
    params.val_accuracy = _accuracy(params, fs.features[val], targets[val])
    return params, losses


def train_binary(fs: FeatureSet, config: ClassifierTrainConfig | None = None,
                 seed: int = 0) -> ClassifierParams:
    config = config or ClassifierTrainConfig()
    if len(np.unique(fs.labels)) < 2:
        raise ValueError("binary training needs both labels present")
    params = init_classifier("binary", fs.config, hidden=config.hidden, seed=seed)
    if config.epochs == 0:
        return params
    params, losses = _fit(params, fs, fs.labels.astype(int), config, seed)
    params.train_losses = losses  # type: ignore[attr-defined]
    return params


def train_count_baseline(data, k_max: int = 3, config: ClassifierTrainConfig | None = None,
                         seed: int = 0, features: FeatureConfig | None = None) -> ClassifierParams:
    config = config or ClassifierTrainConfig()
    fs = data if isinstance(data, FeatureSet) else count_feature_set(data, features)
    missing = set(range(1, k_max + 1)) - set(int(v) for v in fs.labels)
    if missing:
        raise ValueError(f"count baseline data lacks classes {sorted(missing)}")
    if fs.labels.max() > k_max:
        raise ValueError("count labels exceed k_max")
    params = init_classifier("multiclass", fs.config, k_max=k_max, hidden=config.hidden, seed=seed)
    if config.epochs == 0:
        return params
    params, _ = _fit(params, fs, fs.labels.astype(int) - 1, config, seed)
    return params


def evaluate_count_baseline(params: ClassifierParams, data) -> CountEvalResult:
    samples = _samples(data)
    pred = [int(predict_count(params, s.mixture.samples[None])[0]) for s in samples]
    return CountEvalResult.from_pairs([s.n for s in samples], pred)


def binary_counts(separator: SeparatorParams, classifier: ClassifierParams, mixtures: np.ndarray,
                  threshold: float = 0.5, safety_cap: int = SAFETY_CAP) -> np.ndarray:
    """Recursive counts for equal-length clips ``[B, T]``.

    The count is the first step ``j`` whose residual scores below
    ``threshold``, or ``safety_cap`` when none does.
    """
    residual = np.asarray(mixtures, dtype=np.float64)
    counts = np.full(len(residual), safety_cap, dtype=int)
    live = np.ones(len(residual), dtype=bool)
    for j in range(1, safety_cap + 1):
        idx = np.flatnonzero(live)
        if idx.size == 0:
            break
        _, r = run_batch(separator, residual[idx])
        residual[idx] = r
        stop = predict_batch(classifier, r) < threshold
        counts[idx[stop]] = j
        live[idx[stop]] = False
    return counts


def evaluate_binary_counting(separator: SeparatorParams, classifier: ClassifierParams, data,
                             threshold: float = 0.5) -> CountEvalResult:
    """A mixture is sized correctly iff every residual before ``r^n`` scores as
    source-bearing and ``r^n`` scores as exhausted."""
    samples = _samples(data)
    true, pred = [], []
    by_len: dict[int, list[MixtureSample]] = {}
    for s in samples:
        by_len.setdefault(s.mixture.samples.size, []).append(s)
    for _, group in sorted(by_len.items()):
        counts = binary_counts(separator, classifier, np.stack([s.mixture.samples for s in group]),
                               threshold)
        true += [s.n for s in group]
        pred += list(counts)
    return CountEvalResult.from_pairs(true, pred)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_classifier(params: ClassifierParams, path) -> None:
    f = params.features
    header = {
        "head": params.head, "k_max": str(params.k_max), "window_len": str(f.window_len),
        "hop": str(f.hop), "n_mels": str(f.n_mels), "sample_rate": str(f.sample_rate),
        "normalize": str(int(f.normalize)), "val_accuracy": repr(params.val_accuracy),
    }
    tensors = {k: t.data for k, t in params.tensors.items()}
    tensors["feat.mean"] = params.feat_mean
    tensors["feat.std"] = params.feat_std
    container.save(path, "classifier", header, tensors)


def load_classifier(path) -> ClassifierParams:
    header, arrays = container.load(path, kind="classifier")
    try:
        features = FeatureConfig(int(header["window_len"]), int(header["hop"]),
                                 int(header["n_mels"]), int(header["sample_rate"]),
                                 bool(int(header.get("normalize", "1"))))
        features.validate()
        head, k_max = header["head"], int(header["k_max"])
        val_acc = float(header.get("val_accuracy", "nan"))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad classifier header: {exc}") from exc
    try:
        mean, std = arrays.pop("feat.mean"), arrays.pop("feat.std")
    except KeyError as exc:
        raise FormatError(f"{path}: classifier lacks feature statistics") from exc
    hidden = arrays["conv1.w"].shape[0] if "conv1.w" in arrays else 0
    ref = init_classifier(head, features, k_max=k_max, hidden=max(hidden, 1))
    if set(arrays) != set(ref.tensors) or any(arrays[k].shape != ref.tensors[k].shape
                                              for k in arrays):
        raise FormatError(f"{path}: classifier tensors do not match the header")
    tensors = {k: Tensor(arrays[k], requires_grad=True, name=k) for k in ref.tensors}
    return ClassifierParams(head, ref.k_max, features, tensors, mean, std, val_acc)
