"""The one-and-rest separator: encoder, two ReLU masks, shared decoder.

Signal path for an input ``x[B, 1, T]``::

    e  = relu(conv1d(pad(x), enc, stride))          # [B, n_basis, F]
    h  = relu(conv1x1(global_norm(e)))              # [B, mask_channels, F]
    h  = h + relu(dilated_conv(h))                  # once per dilation
    m1, m2 = relu(conv1x1(h)), relu(conv1x1(h))     # masks, [B, n_basis, F]
    one, rest = crop(conv1d_transpose(m_k * e, dec, stride))

Channel 1 is always the single extracted source and channel 2 the residual.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .wavio import FormatError, Waveform


@dataclass(frozen=True)
class SeparatorConfig:
    n_basis: int = 64
    enc_kernel: int = 16
    enc_stride: int = 8
    mask_layers: int = 4
    mask_channels: int = 64
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    mask_kernel: int = 3
    segment_len: int = 8000
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_basis", "enc_kernel", "enc_stride", "mask_layers", "mask_channels",
                     "mask_kernel", "segment_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.enc_stride > self.enc_kernel:
            raise ValueError("enc_stride must not exceed enc_kernel")
        if self.segment_len % self.enc_stride or self.segment_len % 2:
            raise ValueError("segment_len must be even and a multiple of enc_stride")
        if len(self.dilations) != self.mask_layers or min(self.dilations) < 1:
            raise ValueError("need one positive dilation per mask layer")
        if self.mask_kernel % 2 == 0:
            raise ValueError("mask_kernel must be odd")

    def to_header(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(str(d) for d in v) if isinstance(v, (tuple, list)) else str(v)
        return out

    @classmethod
    def from_header(cls, header: dict[str, str]) -> SeparatorConfig:
        kw = {}
        for f in fields(cls):
            if f.name not in header:
                raise FormatError(f"checkpoint header lacks {f.name!r}")
            raw = header[f.name]
            kw[f.name] = tuple(int(v) for v in raw.split(",")) if f.name == "dilations" else int(raw)
        return cls(**kw)


@dataclass
class SeparatorParams:
    config: SeparatorConfig
    tensors: dict[str, Tensor]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> SeparatorParams:
        return SeparatorParams(self.config, {k: Tensor(t.data.copy(), name=k)
                                             for k, t in self.tensors.items()})

    def astype(self, dtype) -> SeparatorParams:
        return SeparatorParams(self.config, {k: Tensor(t.data.astype(dtype), name=k)
                                             for k, t in self.tensors.items()})


def param_shapes(cfg: SeparatorConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape; conv kernels are ``[C_out, C_in, K]``."""
    nb, mc, k = cfg.n_basis, cfg.mask_channels, cfg.mask_kernel
    shapes = {
        "enc.w": (nb, 1, cfg.enc_kernel),
        "in.w": (mc, nb, 1),
        "in.b": (mc,),
    }
    for i in range(cfg.mask_layers):
        shapes[f"layer{i}.w"] = (mc, mc, k)
        shapes[f"layer{i}.b"] = (mc,)
    for head in ("one", "rest"):
        shapes[f"mask_{head}.w"] = (nb, mc, 1)
        shapes[f"mask_{head}.b"] = (nb,)
    shapes["dec.w"] = (nb, 1, cfg.enc_kernel)
    return shapes


def init_bound(name: str, shape: tuple[int, ...]) -> float:
    if name.endswith(".b"):
        return 0.0
    # the decoder sums over basis channels, which sit on axis 0
    fan_in = shape[0] if name == "dec.w" else int(np.prod(shape[1:]))
    return math.sqrt(3.0 / fan_in)


def init_params(config: SeparatorConfig | None = None, seed: int | None = None,
                dtype=np.float32) -> SeparatorParams:
    """Uniform ``[-sqrt(3/fan_in), sqrt(3/fan_in)]`` weights, zero biases."""
    cfg = config or SeparatorConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        b = init_bound(name, shape)
        arr = rng.uniform(-b, b, size=shape) if b else np.zeros(shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return SeparatorParams(cfg, tensors)


def _frame_padding(t: int, kernel: int, stride: int) -> tuple[int, int]:
    # one stride of context in front; back padding to whole frames plus one stride
    left = stride
    body = left + t + stride
    extra = (-(body - kernel)) % stride
    return left, stride + extra


def forward(params: SeparatorParams, x: Tensor, return_masks: bool = False):
    """Run the separator on ``x[1, T]`` or ``x[B, 1, T]``.

    Returns ``(one, rest)`` with the same shape as ``x`` (plus the two masks
    when ``return_masks``).
    """
    cfg = params.config
    p = params.tensors
    t = x.shape[-1]
    if x.data.ndim not in (2, 3) or x.shape[-2] != 1:
        raise ad.ShapeError(f"separator input must be [1, T] or [B, 1, T], got {x.shape}")
    if t < cfg.enc_kernel:
        raise ad.ShapeError(f"input of {t} samples is shorter than the encoder kernel")
    left, right = _frame_padding(t, cfg.enc_kernel, cfg.enc_stride)
    xp = ad.pad1d(x, left, right)
    e = ad.relu(ad.conv1d(xp, p["enc.w"], stride=cfg.enc_stride))
    h = ad.relu(ad.add_bias(ad.conv1d(ad.global_norm(e), p["in.w"]), p["in.b"]))
    half = cfg.mask_kernel // 2
    for i, d in enumerate(cfg.dilations):
        z = ad.conv1d(ad.pad1d(h, half * d, half * d), p[f"layer{i}.w"], dilation=d)
        h = ad.add(h, ad.relu(ad.add_bias(z, p[f"layer{i}.b"])))
    outs, masks = [], []
    for head in ("one", "rest"):
        m = ad.relu(ad.add_bias(ad.conv1d(h, p[f"mask_{head}.w"]), p[f"mask_{head}.b"]))
        y = ad.conv1d_transpose(ad.mul(m, e), p["dec.w"], stride=cfg.enc_stride)
        outs.append(ad.crop1d(y, left, left + t))
        masks.append(m)
    if return_masks:
        return outs[0], outs[1], masks
    return outs[0], outs[1]


def run_batch(params: SeparatorParams, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inference on ``batch[B, T]``; returns float64 ``(one, rest)`` arrays."""
    dtype = params.tensors["enc.w"].dtype
    x = Tensor(np.asarray(batch, dtype=dtype)[:, None, :])
    one, rest = forward(params, x)
    return one.data[:, 0].astype(np.float64), rest.data[:, 0].astype(np.float64)


def crossfade_weights(segment_len: int, n_segments: int) -> np.ndarray:
    """Triangular weights ``[n_segments, segment_len]`` for 50% overlap-add.

    Overlapping halves sum to exactly 1; the outer half of the first and
    last segment is flat at 1.
    """
    hop = segment_len // 2
    up = np.arange(hop) / hop
    w = np.concatenate([up, 1.0 - up])
    out = np.tile(w, (n_segments, 1))
    out[0, :hop] = 1.0
    out[-1, hop:] = 1.0
    return out


def separate_long_arrays(params: SeparatorParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Separate a 1-D signal of any length via 50%-overlapping segments.

    Returns raw arrays so callers can inspect non-finite output.
    """
    seg = params.config.segment_len
    if x.size <= seg:
        one, rest = run_batch(params, x[None])
        return one[0], rest[0]
    hop = seg // 2
    n_seg = -(-(x.size - seg) // hop) + 1
    padded = np.zeros((n_seg - 1) * hop + seg)
    padded[:x.size] = x
    starts = np.arange(n_seg) * hop
    batch = np.stack([padded[s:s + seg] for s in starts])
    one, rest = run_batch(params, batch)
    weights = crossfade_weights(seg, n_seg)
    outs = []
    for y in (one, rest):
        acc = np.zeros(padded.size)
        for k, s in enumerate(starts):
            acc[s:s + seg] += weights[k] * y[k]
        outs.append(acc[:x.size])
    return outs[0], outs[1]


def separate_long(params: SeparatorParams, wav: Waveform) -> tuple[Waveform, Waveform]:
    """Separate a waveform of any length via 50%-overlapping segments."""
    one, rest = separate_long_arrays(params, wav.samples)
    return wav.with_samples(one), wav.with_samples(rest)


def save_checkpoint(params: SeparatorParams, path) -> None:
    container.save(path, "separator", params.config.to_header(), params.arrays())


def load_checkpoint(path) -> SeparatorParams:
    header, arrays = container.load(path, kind="separator")
    try:
        cfg = SeparatorConfig.from_header(header)
        cfg.validate()
    except ValueError as exc:
        raise FormatError(f"{path}: bad separator config: {exc}") from exc
    expected = param_shapes(cfg)
    if set(arrays) != set(expected):
        raise FormatError(f"{path}: tensor names do not match the config")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise FormatError(f"{path}: tensor {name} has shape {arrays[name].shape}, expected {shape}")
    return SeparatorParams(cfg, {k: Tensor(arrays[k], requires_grad=True, name=k) for k in expected})
