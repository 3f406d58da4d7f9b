"""EmoNeXt assembly: STN -> patchify stem -> four ConvNeXt stages each
followed by SE -> self-attention head -> classifier, plus the attention
regularized training loss."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .blocks import (
    BlockParams,
    DownsampleParams,
    SEParams,
    StemParams,
    STNParams,
    convnext_block,
    downsample_layer,
    full,
    init_block,
    init_downsample,
    init_se,
    init_stem,
    init_stn,
    localization_features,
    named_tensors,
    patchify_stem,
    se_block,
    se_hidden,
    stn_forward,
    trunc_normal,
    zeros,
)
from .rng import INIT, stream
from .tensor import DimensionError, Tensor, no_grad

CLASS_NAMES = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
NUM_CLASSES = len(CLASS_NAMES)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, int, int, int]
    blocks: tuple[int, int, int, int]
    num_classes: int = NUM_CLASSES
    in_channels: int = 1
    se_reduction: int = 16
    sa_lambda: float = 0.01
    drop_path_max: float = 0.1
    label_smoothing: float = 0.1
    input_size: int = 224

    def __post_init__(self):
        if len(self.channels) != 4 or len(self.blocks) != 4:
            raise ConfigError("channels and blocks need exactly four entries")
        if any(c < 1 for c in self.channels) or any(b < 1 for b in self.blocks):
            raise ConfigError("channel widths and block counts must be positive")
        if self.sa_lambda < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.sa_lambda}")
        if not 0.0 <= self.drop_path_max < 1.0:
            raise ConfigError(f"drop_path_max must be in [0, 1), got {self.drop_path_max}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.input_size % 32:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("channels", "blocks"):
            if key in d:
                d[key] = tuple(int(v) for v in d[key])
        return cls(**d)

    @property
    def stage_sizes(self) -> tuple[int, int, int, int]:
        s = self.input_size // 4
        return (s, s // 2, s // 4, s // 8)

    @property
    def num_tokens(self) -> int:
        return self.stage_sizes[-1] ** 2


PRESETS: dict[str, ModelConfig] = {
    "micro": ModelConfig(channels=(8, 16, 32, 64), blocks=(1, 1, 1, 1), se_reduction=4, input_size=64),
    "tiny": ModelConfig(channels=(96, 192, 384, 768), blocks=(3, 3, 9, 3)),
    "small": ModelConfig(channels=(96, 192, 384, 768), blocks=(3, 3, 27, 3)),
    "base": ModelConfig(channels=(128, 256, 512, 1024), blocks=(3, 3, 27, 3)),
    "large": ModelConfig(channels=(192, 384, 768, 1536), blocks=(3, 3, 27, 3)),
    "xlarge": ModelConfig(channels=(256, 512, 1024, 2048), blocks=(3, 3, 27, 3)),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}") from None
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


@dataclass
class HeadParams:
    q_weight: Tensor  # d x C4
    k_weight: Tensor  # d x C4
    ln_gamma: Tensor
    ln_beta: Tensor
    fc_weight: Tensor  # classes x C4
    fc_bias: Tensor


@dataclass
class EmoNeXt:
    config: ModelConfig = field(metadata={"static": True})
    stn: STNParams
    stem: StemParams
    stages: list[list[BlockParams]]
    se: list[SEParams]
    downsample: list[DownsampleParams]
    head: HeadParams

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(named_tensors(self))

    def parameters(self) -> list[Tensor]:
        return [t for _, t in named_tensors(self)]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


@dataclass
class AttentionOutput:
    logits: Tensor  # N x classes
    weights: Tensor  # N x T x T


def build(config: ModelConfig | str, rng: np.random.Generator | int = 0, dtype=np.float32) -> EmoNeXt:
    if isinstance(config, str):
        config = preset(config)
    if isinstance(rng, (int, np.integer)):
        rng = stream(int(rng), INIT)
    c = config.channels
    stn = init_stn(rng, config.in_channels, config.input_size, dtype)
    stem = init_stem(rng, config.in_channels, c[0], dtype)
    stages, se, down = [], [], []
    for i in range(4):
        stages.append([init_block(rng, c[i], dtype) for _ in range(config.blocks[i])])
        se.append(init_se(rng, c[i], config.se_reduction, dtype))
        if i < 3:
            down.append(init_downsample(rng, c[i], c[i + 1], dtype))
    d = c[3]
    head = HeadParams(
        q_weight=trunc_normal(rng, (d, d), dtype=dtype),
        k_weight=trunc_normal(rng, (d, d), dtype=dtype),
        ln_gamma=full(d, 1.0, dtype),
        ln_beta=zeros(d, dtype),
        fc_weight=trunc_normal(rng, (config.num_classes, d), dtype=dtype),
        fc_bias=zeros(config.num_classes, dtype),
    )
    return EmoNeXt(config=config, stn=stn, stem=stem, stages=stages, se=se, downsample=down, head=head)


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every parameter without allocating them, in the
    same order as :meth:`EmoNeXt.named_parameters`."""
    c, ic = config.channels, config.in_channels
    flat = localization_features(config.input_size)
    shapes = [
        ("stn.conv1_weight", (8, ic, 5, 5)), ("stn.conv1_bias", (8,)),
        ("stn.conv2_weight", (10, 8, 5, 5)), ("stn.conv2_bias", (10,)),
        ("stn.fc1_weight", (32, flat)), ("stn.fc1_bias", (32,)),
        ("stn.fc2_weight", (6, 32)), ("stn.fc2_bias", (6,)),
        ("stem.weight", (c[0], ic, 4, 4)), ("stem.bias", (c[0],)),
        ("stem.ln_gamma", (c[0],)), ("stem.ln_beta", (c[0],)),
    ]  # fmt: skip
    for i in range(4):
        dim = c[i]
        for b in range(config.blocks[i]):
            pre = f"stages.{i}.{b}."
            shapes += [
                (pre + "dw_weight", (dim, 1, 7, 7)), (pre + "dw_bias", (dim,)),
                (pre + "ln_gamma", (dim,)), (pre + "ln_beta", (dim,)),
                (pre + "pw1_weight", (4 * dim, dim)), (pre + "pw1_bias", (4 * dim,)),
                (pre + "pw2_weight", (dim, 4 * dim)), (pre + "pw2_bias", (dim,)),
                (pre + "layer_scale", (dim,)),
            ]  # fmt: skip
    for i in range(4):
        hid = se_hidden(c[i], config.se_reduction)
        shapes += [
            (f"se.{i}.fc1_weight", (hid, c[i])), (f"se.{i}.fc1_bias", (hid,)),
            (f"se.{i}.fc2_weight", (c[i], hid)), (f"se.{i}.fc2_bias", (c[i],)),
        ]  # fmt: skip
    for i in range(3):
        shapes += [
            (f"downsample.{i}.ln_gamma", (c[i],)), (f"downsample.{i}.ln_beta", (c[i],)),
            (f"downsample.{i}.weight", (c[i + 1], c[i], 2, 2)), (f"downsample.{i}.bias", (c[i + 1],)),
        ]  # fmt: skip
    d = c[3]
    shapes += [
        ("head.q_weight", (d, d)), ("head.k_weight", (d, d)),
        ("head.ln_gamma", (d,)), ("head.ln_beta", (d,)),
        ("head.fc_weight", (config.num_classes, d)), ("head.fc_bias", (config.num_classes,)),
    ]  # fmt: skip
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in parameter_shapes(config))


def drop_path_rates(config: ModelConfig) -> list[float]:
    """Linear ramp from 0 at the first block to ``drop_path_max`` at the last."""
    total = sum(config.blocks)
    if total == 1:
        return [0.0]
    return [config.drop_path_max * i / (total - 1) for i in range(total)]


def attention_weights(tokens: Tensor, q_weight: Tensor, k_weight: Tensor) -> Tensor:
    """Row-stochastic W = softmax(Q K^T / sqrt(d)) with Q, K linear in the tokens."""
    q = F.linear(tokens, q_weight)
    k = F.linear(tokens, k_weight)
    d = q_weight.shape[0]
    scores = (q @ k.permute(0, 2, 1)) * (1.0 / math.sqrt(d))
    return F.softmax(scores, axis=-1)


def features(model: EmoNeXt, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> list[Tensor]:
    """Backbone outputs after each stage's SE block (before downsampling)."""
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected N x {cfg.in_channels} x S x S input, got {x.shape}")
    if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise DimensionError(
            f"input spatial size {x.shape[2]}x{x.shape[3]} != configured {cfg.input_size}x{cfg.input_size}"
        )
    rates = drop_path_rates(cfg)
    h = stn_forward(x, model.stn)
    h = patchify_stem(h, model.stem)
    outs = []
    k = 0
    for i in range(4):
        for block in model.stages[i]:
            h = convnext_block(h, block, rates[k], training, rng)
            k += 1
        h = se_block(h, model.se[i])
        outs.append(h)
        if i < 3:
            h = downsample_layer(h, model.downsample[i])
    return outs


def forward(model: EmoNeXt, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> AttentionOutput:
    h = features(model, x, training, rng)[-1]
    n, c, hh, ww = h.shape
    tokens = h.reshape(n, c, hh * ww).permute(0, 2, 1)  # N x T x C
    head = model.head
    w = attention_weights(tokens, head.q_weight, head.k_weight)
    attended = (w @ tokens).mean(axis=1)
    pooled = F.layer_norm(attended, head.ln_gamma, head.ln_beta, axis=-1)
    logits = F.linear(pooled, head.fc_weight, head.fc_bias)
    return AttentionOutput(logits=logits, weights=w)


def sa_regularizer(weights: Tensor) -> Tensor:
    """Variance of all attention entries around their per-sample mean,
    averaged over the batch."""
    n = weights.shape[0]
    flat = weights.reshape(n, -1)
    dev = flat - flat.mean(axis=1, keepdims=True)
    return (dev * dev).mean(axis=1).mean()


def cross_entropy_smoothed(logits: Tensor, targets, epsilon: float = 0.0) -> Tensor:
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if targets.shape[0] != n:
        raise ValueError(f"got {targets.shape[0]} targets for {n} logit rows")
    if np.any((targets < 0) | (targets >= k)):
        bad = targets[(targets < 0) | (targets >= k)][0]
        raise ValueError(f"target {bad} outside 0..{k - 1}")
    q = np.full((n, k), epsilon / k, dtype=logits.dtype)
    q[np.arange(n), targets] += 1.0 - epsilon
    logp = F.log_softmax(logits, axis=-1)
    return -(logp * Tensor(q)).sum(axis=1).mean()


@dataclass
class LossParts:
    total: Tensor
    ce: Tensor
    sa: Tensor


def total_loss(logits: Tensor, targets, weights: Tensor, sa_lambda: float, epsilon: float, detach_sa: bool = False) -> LossParts:
    if sa_lambda < 0:
        raise ValueError(f"lambda must be >= 0, got {sa_lambda}")
    ce = cross_entropy_smoothed(logits, targets, epsilon)
    sa = sa_regularizer(weights)
    if sa_lambda == 0.0:
        return LossParts(total=ce, ce=ce, sa=sa)
    reg = sa.detach() if detach_sa else sa
    return LossParts(total=ce + reg * sa_lambda, ce=ce, sa=sa)


def predict(model: EmoNeXt, x: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Class indices (ties to the lowest index) and softmax probabilities."""
    with no_grad():
        out = forward(model, x, training=False)
        probs = F.softmax(out.logits, axis=-1).data
    return np.argmax(out.logits.data, axis=-1), probs
