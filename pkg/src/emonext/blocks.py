"""Parameterized building blocks: spatial transformer, ConvNeXt block,
squeeze-and-excitation, patchify stem and inter-stage downsampling.

Parameters live in plain dataclasses of :class:`Tensor`; the forward
functions are pure apart from the explicit ``rng`` used for drop path.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DimensionError, Tensor

LAYER_SCALE_INIT = 1e-6
INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> Tensor:
    """Normal(0, std) truncated to +-2 std, resampled until inside."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return Tensor((out * std).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def full(shape, value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses and lists yielding ``(dotted.name, tensor)`` in a
    fixed order. This order defines the checkpoint layout."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("static"):
                continue
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_tensors(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))


def with_tensors(obj, tensors):
    """Rebuild ``obj`` with its tensors replaced, in :func:`named_tensors` order."""
    it = iter(tensors)

    def rebuild(o):
        if isinstance(o, Tensor):
            return next(it)
        if dataclasses.is_dataclass(o):
            changes = {
                f.name: rebuild(getattr(o, f.name))
                for f in dataclasses.fields(o)
                if not f.metadata.get("static")
            }
            return dataclasses.replace(o, **changes)
        if isinstance(o, list):
            return [rebuild(item) for item in o]
        return o

    return rebuild(obj)


# ---------------------------------------------------------------------------
# spatial transformer
# ---------------------------------------------------------------------------


@dataclass
class STNParams:
    conv1_weight: Tensor
    conv1_bias: Tensor
    conv2_weight: Tensor
    conv2_bias: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor
    input_size: int = dataclasses.field(default=224, metadata={"static": True})


IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def localization_features(input_size: int) -> int:
    """Flattened feature count after conv5 -> pool2 -> conv5 -> pool2."""
    s = input_size
    s = (s - 4) // 2
    s = (s - 4) // 2
    if s < 1:
        raise DimensionError(f"input size {input_size} too small for the localization network")
    return 10 * s * s


def init_stn(rng: np.random.Generator, in_ch: int, input_size: int, dtype=np.float32) -> STNParams:
    flat = localization_features(input_size)
    return STNParams(
        conv1_weight=trunc_normal(rng, (8, in_ch, 5, 5), std=0.1, dtype=dtype),
        conv1_bias=zeros(8, dtype),
        conv2_weight=trunc_normal(rng, (10, 8, 5, 5), std=0.1, dtype=dtype),
        conv2_bias=zeros(10, dtype),
        fc1_weight=trunc_normal(rng, (32, flat), std=INIT_STD, dtype=dtype),
        fc1_bias=zeros(32, dtype),
        fc2_weight=zeros((6, 32), dtype),
        fc2_bias=Tensor(IDENTITY_THETA.astype(dtype), requires_grad=True),
        input_size=input_size,
    )


def localization_net(x: Tensor, p: STNParams) -> Tensor:
    """Predict one 2x3 affine matrix per sample."""
    if x.shape[2] != p.input_size or x.shape[3] != p.input_size:
        raise DimensionError(
            f"localization net expects {p.input_size}x{p.input_size} input, got {x.shape[2]}x{x.shape[3]}"
        )
    h = F.relu(F.max_pool2d(F.conv2d(x, p.conv1_weight, p.conv1_bias)))
    h = F.relu(F.max_pool2d(F.conv2d(h, p.conv2_weight, p.conv2_bias)))
    h = h.reshape(x.shape[0], -1)
    h = F.relu(F.linear(h, p.fc1_weight, p.fc1_bias))
    theta = F.linear(h, p.fc2_weight, p.fc2_bias)
    return theta.reshape(x.shape[0], 2, 3)


def stn_forward(x: Tensor, p: STNParams) -> Tensor:
    theta = localization_net(x, p)
    grid = F.affine_grid(theta, x.shape[2], x.shape[3])
    return F.grid_sample_bilinear(x, grid)


# ---------------------------------------------------------------------------
# ConvNeXt block
# ---------------------------------------------------------------------------


@dataclass
class BlockParams:
    dw_weight: Tensor  # C x 1 x 7 x 7
    dw_bias: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    pw1_weight: Tensor  # 4C x C
    pw1_bias: Tensor
    pw2_weight: Tensor  # C x 4C
    pw2_bias: Tensor
    layer_scale: Tensor

    @property
    def channels(self) -> int:
        return self.dw_weight.shape[0]


def init_block(rng: np.random.Generator, dim: int, dtype=np.float32) -> BlockParams:
    return BlockParams(
        dw_weight=trunc_normal(rng, (dim, 1, 7, 7), dtype=dtype),
        dw_bias=zeros(dim, dtype),
        ln_gamma=full(dim, 1.0, dtype),
        ln_beta=zeros(dim, dtype),
        pw1_weight=trunc_normal(rng, (4 * dim, dim), dtype=dtype),
        pw1_bias=zeros(4 * dim, dtype),
        pw2_weight=trunc_normal(rng, (dim, 4 * dim), dtype=dtype),
        pw2_bias=zeros(dim, dtype),
        layer_scale=full(dim, LAYER_SCALE_INIT, dtype),
    )


def convnext_block(
    x: Tensor,
    p: BlockParams,
    drop_prob: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    c = p.channels
    if x.ndim != 4 or x.shape[1] != c:
        raise DimensionError(f"convnext_block expects {c} channels on axis 1, got shape {x.shape}")
    h = F.conv2d(x, p.dw_weight, p.dw_bias, padding=3, groups=c)
    h = h.permute(0, 2, 3, 1)  # NHWC so LN and the pointwise layers act on channels
    h = F.layer_norm(h, p.ln_gamma, p.ln_beta, axis=-1)
    h = F.linear(h, p.pw1_weight, p.pw1_bias)
    h = F.gelu(h)
    h = F.linear(h, p.pw2_weight, p.pw2_bias)
    h = h * p.layer_scale
    h = h.permute(0, 3, 1, 2)
    return x + F.drop_path(h, drop_prob, training, rng)


# ---------------------------------------------------------------------------
# squeeze and excitation
# ---------------------------------------------------------------------------


@dataclass
class SEParams:
    fc1_weight: Tensor  # C/r x C
    fc1_bias: Tensor
    fc2_weight: Tensor  # C x C/r
    fc2_bias: Tensor
    reduction: int = dataclasses.field(default=16, metadata={"static": True})


def se_hidden(channels: int, reduction: int) -> int:
    if reduction < 1:
        raise ValueError(f"SE reduction must be >= 1, got {reduction}")
    return max(1, channels // reduction)


def init_se(rng: np.random.Generator, dim: int, reduction: int, dtype=np.float32) -> SEParams:
    hidden = se_hidden(dim, reduction)
    return SEParams(
        fc1_weight=trunc_normal(rng, (hidden, dim), dtype=dtype),
        fc1_bias=zeros(hidden, dtype),
        fc2_weight=trunc_normal(rng, (dim, hidden), dtype=dtype),
        fc2_bias=zeros(dim, dtype),
        reduction=reduction,
    )


def se_gates(x: Tensor, p: SEParams) -> Tensor:
    """Per-channel gates in (0, 1), shape N x C x 1 x 1."""
    c = p.fc2_weight.shape[0]
    if x.ndim != 4 or x.shape[1] != c:
        raise DimensionError(f"se_block expects {c} channels on axis 1, got shape {x.shape}")
    s = F.global_avg_pool(x).reshape(x.shape[0], c)
    s = F.relu(F.linear(s, p.fc1_weight, p.fc1_bias))
    s = F.sigmoid(F.linear(s, p.fc2_weight, p.fc2_bias))
    return s.reshape(x.shape[0], c, 1, 1)


def se_block(x: Tensor, p: SEParams) -> Tensor:
    return x * se_gates(x, p)


# ---------------------------------------------------------------------------
# stem and downsampling
# ---------------------------------------------------------------------------


@dataclass
class StemParams:
    weight: Tensor  # C1 x in_ch x 4 x 4
    bias: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor


def init_stem(rng: np.random.Generator, in_ch: int, dim: int, dtype=np.float32) -> StemParams:
    return StemParams(
        weight=trunc_normal(rng, (dim, in_ch, 4, 4), dtype=dtype),
        bias=zeros(dim, dtype),
        ln_gamma=full(dim, 1.0, dtype),
        ln_beta=zeros(dim, dtype),
    )


def patchify_stem(x: Tensor, p: StemParams) -> Tensor:
    """Non-overlapping 4x4 stride-4 convolution followed by channel LN."""
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise DimensionError(f"patchify stem needs spatial dims divisible by 4, got {x.shape[2]}x{x.shape[3]}")
    h = F.conv2d(x, p.weight, p.bias, stride=4)
    return F.layer_norm(h, p.ln_gamma, p.ln_beta, axis=1)


@dataclass
class DownsampleParams:
    ln_gamma: Tensor
    ln_beta: Tensor
    weight: Tensor  # C_next x C x 2 x 2
    bias: Tensor


def init_downsample(rng: np.random.Generator, dim: int, dim_next: int, dtype=np.float32) -> DownsampleParams:
    return DownsampleParams(
        ln_gamma=full(dim, 1.0, dtype),
        ln_beta=zeros(dim, dtype),
        weight=trunc_normal(rng, (dim_next, dim, 2, 2), dtype=dtype),
        bias=zeros(dim_next, dtype),
    )


def downsample_layer(x: Tensor, p: DownsampleParams) -> Tensor:
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"downsample needs even spatial dims, got {x.shape[2]}x{x.shape[3]}")
    h = F.layer_norm(x, p.ln_gamma, p.ln_beta, axis=1)
    return F.conv2d(h, p.weight, p.bias, stride=2)
