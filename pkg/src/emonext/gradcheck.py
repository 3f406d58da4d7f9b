"""Central finite-difference verification of the backward rules.

``grad_check`` is the generic harness; ``OP_CHECKS`` is the per-primitive
suite run by ``emonext gradcheck`` and the test suite.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .tensor import Tensor, concatenate, default_dtype

logger = logging.getLogger(__name__)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray | Tensor],
    eps: float = 1e-4,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
) -> float:
    """Compare analytic gradients of scalar ``f(*inputs)`` to central differences.

    Returns the max over checked coordinates of |a - n| / max(|a|, |n|, 1e-8).
    When ``max_checks`` is set, only that many randomly chosen coordinates per
    input are perturbed (the analytic side is always complete).

    With ``skip_kinks`` a coordinate whose +-eps probes change the branch
    pattern of any piecewise op (ReLU, max pool, bilinear cell) is replaced by
    another randomly drawn coordinate; central differences are meaningless
    across a kink.
    """
    arrays = [np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64) for t in inputs]
    with default_dtype(np.float64):
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = f(*leaves)
        if out.size != 1:
            raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
        out.backward()
        analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

        def evaluate(k: int, flat_index: int, delta: float) -> tuple[float, str]:
            probe = [a.copy() for a in arrays]
            probe[k].reshape(-1)[flat_index] += delta
            with F.record_branches() as log:
                value = float(f(*(Tensor(p) for p in probe)).data)
            return value, F.branch_digest(log)

        base_digest = evaluate(0, 0, 0.0)[1] if skip_kinks else ""
        worst = 0.0
        rng = rng or np.random.default_rng(0)
        for k, a in enumerate(arrays):
            sampled = max_checks is not None and a.size > max_checks
            order = rng.permutation(a.size) if sampled else np.arange(a.size)
            wanted = max_checks if sampled else a.size
            ga = analytic[k].reshape(-1)
            checked = 0
            for idx in order:
                if checked == wanted:
                    break
                hi, d_hi = evaluate(k, idx, eps)
                lo, d_lo = evaluate(k, idx, -eps)
                if skip_kinks and (d_hi != base_digest or d_lo != base_digest):
                    logger.debug("input %d index %d straddles a kink, resampling", k, idx)
                    continue
                checked += 1
                num = (hi - lo) / (2.0 * eps)
                ana = float(ga[idx])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    return worst


@dataclass
class OpCheck:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]
    threshold: float = 1e-4


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    # random projection so every output element contributes a distinct weight
    return (out * Tensor(rng.standard_normal(out.shape))).sum()


def _conv_dense(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    proj = rng.standard_normal((2, 4, 3, 3))
    return lambda x, w, b: (F.conv2d(x, w, b, stride=2, padding=1) * Tensor(proj)).sum(), [x, w, b]


def _conv_depthwise(rng):
    x = rng.standard_normal((1, 3, 5, 5))
    w = rng.standard_normal((3, 1, 3, 3))
    b = rng.standard_normal(3)
    proj = rng.standard_normal((1, 3, 5, 5))
    return lambda x, w, b: (F.conv2d(x, w, b, padding=1, groups=3) * Tensor(proj)).sum(), [x, w, b]


def _conv_grouped(rng):
    x = rng.standard_normal((1, 4, 4, 4))
    w = rng.standard_normal((6, 2, 2, 2))
    proj = rng.standard_normal((1, 6, 3, 3))
    return lambda x, w: (F.conv2d(x, w, None, groups=2) * Tensor(proj)).sum(), [x, w]


def _linear(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(5)
    proj = rng.standard_normal((3, 5))
    return lambda x, w, b: (F.linear(x, w, b) * Tensor(proj)).sum(), [x, w, b]


def _layer_norm(rng):
    x = rng.standard_normal((2, 3, 4))
    g = rng.standard_normal(4)
    b = rng.standard_normal(4)
    proj = rng.standard_normal((2, 3, 4))
    return lambda x, g, b: (F.layer_norm(x, g, b, axis=-1) * Tensor(proj)).sum(), [x, g, b]


def _layer_norm_channels(rng):
    x = rng.standard_normal((2, 3, 2, 2))
    g = rng.standard_normal(3)
    b = rng.standard_normal(3)
    proj = rng.standard_normal((2, 3, 2, 2))
    return lambda x, g, b: (F.layer_norm(x, g, b, axis=1) * Tensor(proj)).sum(), [x, g, b]


def _gelu(rng):
    x = rng.standard_normal((4, 5)) * 2.0
    proj = rng.standard_normal((4, 5))
    return lambda x: (F.gelu(x) * Tensor(proj)).sum(), [x]


def _softmax(rng):
    x = rng.standard_normal((3, 5))
    proj = rng.standard_normal((3, 5))
    return lambda x: (F.softmax(x, axis=-1) * Tensor(proj)).sum(), [x]


def _log_softmax(rng):
    x = rng.standard_normal((3, 5))
    proj = rng.standard_normal((3, 5))
    return lambda x: (F.log_softmax(x, axis=-1) * Tensor(proj)).sum(), [x]


def _sigmoid(rng):
    x = rng.standard_normal((4, 4)) * 3.0
    proj = rng.standard_normal((4, 4))
    return lambda x: (F.sigmoid(x) * Tensor(proj)).sum(), [x]


def _relu(rng):
    x = rng.standard_normal((4, 4))
    x = np.where(np.abs(x) < 1e-2, 0.5, x)  # keep away from the kink
    proj = rng.standard_normal((4, 4))
    return lambda x: (F.relu(x) * Tensor(proj)).sum(), [x]


def _global_avg_pool(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    proj = rng.standard_normal((2, 3, 1, 1))
    return lambda x: (F.global_avg_pool(x) * Tensor(proj)).sum(), [x]


def _max_pool(rng):
    # distinct values spaced well beyond eps so no window has a near-tie
    x = rng.permutation(2 * 2 * 5 * 5).reshape(2, 2, 5, 5) * 0.1
    proj = rng.standard_normal((2, 2, 2, 2))
    return lambda x: (F.max_pool2d(x) * Tensor(proj)).sum(), [x]


def _grid_sample(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    grid = rng.uniform(-1.2, 1.2, size=(1, 3, 3, 2))
    # stay clear of cell boundaries where the sampler has kinks
    for _ in range(100):
        px = (grid + 1.0) * 1.5
        if np.all(np.abs(px - np.round(px)) > 1e-2):
            break
        grid = rng.uniform(-1.2, 1.2, size=(1, 3, 3, 2))
    proj = rng.standard_normal((1, 2, 3, 3))
    return lambda x, g: (F.grid_sample_bilinear(x, g) * Tensor(proj)).sum(), [x, grid]


def _affine_grid(rng):
    theta = rng.standard_normal((2, 2, 3))
    proj = rng.standard_normal((2, 3, 4, 2))
    return lambda t: (F.affine_grid(t, 3, 4) * Tensor(proj)).sum(), [theta]


def _elementwise(rng):
    a = rng.standard_normal((3, 4))
    b = rng.uniform(0.5, 2.0, size=(1, 4))  # broadcast operand, bounded away from 0
    proj = rng.standard_normal((3, 4))

    def f(a, b):
        y = (a + b) * a - b / (a * a + 1.0) + (-a) ** 2 * 0.5 - 3.0 * b
        return (y * Tensor(proj)).sum()

    return f, [a, b]


def _matmul(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((4, 2))
    proj = rng.standard_normal((2, 3, 2))
    return lambda a, b: ((a @ b) * Tensor(proj)).sum(), [a, b]


def _reductions_and_shapes(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 1, 4))

    def f(a, b):
        y = concatenate([a, b], axis=1).permute(0, 2, 1).reshape(8, 4)
        return (y.mean(axis=0) * Tensor(np.arange(1.0, 5.0))).sum() + (y.exp().sum(axis=1)).log().sum()

    return f, [a, b]


OP_CHECKS: list[OpCheck] = [
    OpCheck("conv2d", _conv_dense),
    OpCheck("conv2d_depthwise", _conv_depthwise),
    OpCheck("conv2d_grouped", _conv_grouped),
    OpCheck("linear", _linear),
    OpCheck("layer_norm", _layer_norm),
    OpCheck("layer_norm_channels", _layer_norm_channels),
    OpCheck("gelu", _gelu),
    OpCheck("softmax", _softmax),
    OpCheck("log_softmax", _log_softmax),
    OpCheck("sigmoid", _sigmoid),
    OpCheck("relu", _relu),
    OpCheck("global_avg_pool", _global_avg_pool),
    OpCheck("max_pool2d", _max_pool),
    OpCheck("grid_sample", _grid_sample),
    OpCheck("affine_grid", _affine_grid),
    OpCheck("elementwise", _elementwise),
    OpCheck("matmul", _matmul),
    OpCheck("reduce_reshape", _reductions_and_shapes),
]


def run_op_check(check: OpCheck, seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> float:
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        f, inputs = check.build(rng)
        worst = max(worst, grad_check(f, inputs))
    return worst


def model_check(seed: int = 0, max_checks: int = 4, eps: float = 1e-4) -> float:
    """Finite-difference check of the total loss through the whole Micro model.

    The input and ``max_checks`` random coordinates of every parameter tensor
    are probed in 64-bit mode. Parameters are moved off the initialization
    point (O(1) layer scale, non-degenerate attention, random biases) so no
    gradient is trivially tiny, and the STN bias is solved so the sampling grid
    is a half-pixel translation: every bilinear sample then sits as far as
    possible from a cell boundary.
    """
    from .blocks import localization_net, with_tensors
    from .model import NUM_CLASSES, build, forward, preset, total_loss

    cfg = preset("micro", drop_path_max=0.0)
    rng = np.random.default_rng(seed)
    model = build(cfg, rng=seed, dtype=np.float64)
    names = [name for name, _ in model.named_parameters()]
    base = []
    for name, p in model.named_parameters():
        arr = p.data.copy()
        if name.endswith("layer_scale"):
            arr = rng.uniform(0.5, 1.5, size=arr.shape)
        elif name in ("head.q_weight", "head.k_weight"):
            arr = rng.standard_normal(arr.shape) * 0.3
        elif name == "stn.fc2_weight":
            arr = rng.standard_normal(arr.shape) * 0.05
        elif name.endswith("bias"):
            arr = rng.standard_normal(arr.shape) * 0.1
        base.append(arr)
    x = rng.standard_normal((1, 1, cfg.input_size, cfg.input_size))
    target = [int(rng.integers(0, NUM_CLASSES))]

    with default_dtype(np.float64):
        shift = 1.0 / (cfg.input_size - 1)  # half a pixel in align-corners units
        bias_idx = names.index("stn.fc2_bias")
        base[bias_idx] = np.zeros(6)
        stn = with_tensors(model, [Tensor(b) for b in base]).stn
        theta_without_bias = localization_net(Tensor(x), stn).data.reshape(6)
        base[bias_idx] = np.array([1.0, 0.0, shift, 0.0, 1.0, shift]) - theta_without_bias

    def loss_fn(xin, *params):
        out = forward(with_tensors(model, params), xin, training=False)
        return total_loss(out.logits, target, out.weights, 0.1, 0.1).total

    return grad_check(loss_fn, [x] + base, eps=eps, max_checks=max_checks, rng=rng, skip_kinks=True)
