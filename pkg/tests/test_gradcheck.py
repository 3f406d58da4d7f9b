import numpy as np
import pytest

from emonext import blocks
from emonext import functional as F
from emonext.gradcheck import OP_CHECKS, grad_check, model_check, run_op_check
from emonext.tensor import Tensor, corrupt_backward


@pytest.mark.parametrize("check", OP_CHECKS, ids=lambda c: c.name)
def test_primitive_backward_rules(check):
    assert run_op_check(check, seeds=range(5)) < check.threshold


def test_sum_is_exact(rng):
    assert grad_check(lambda x: x.sum(), [rng.standard_normal((3, 4))]) < 1e-10


def test_gelu_sum(rng):
    assert grad_check(lambda x: F.gelu(x).sum(), [rng.standard_normal(16)]) < 1e-6


def test_grid_sample_off_lattice(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    # coordinates kept clear of pixel boundaries (cell width 2/3)
    cells = rng.integers(0, 3, size=(1, 3, 3, 2))
    grid = -1.0 + (cells + rng.uniform(0.2, 0.8, size=cells.shape)) * (2.0 / 3.0)
    assert grad_check(lambda x, g: F.grid_sample_bilinear(x, g).sum(), [x, grid]) < 1e-4


@pytest.mark.parametrize("op", ["gelu", "conv2d", "layer_norm", "grid_sample"])
def test_detects_corrupted_rule(op):
    check = next(c for c in OP_CHECKS if c.name == op)
    with corrupt_backward(op, 1.01):
        assert run_op_check(check, seeds=[0]) > check.threshold


def _perturbed(params, rng, scale=0.3):
    return [rng.standard_normal(p.shape) * scale for p in params]


def test_block_and_se_stack(rng):
    block = blocks.init_block(rng, 4, dtype=np.float64)
    se = blocks.init_se(rng, 4, 16, dtype=np.float64)
    stack = (block, se)
    leaves = [p for _, p in blocks.named_tensors(stack)]
    values = _perturbed(leaves, rng)
    x = rng.standard_normal((1, 4, 8, 8))
    proj = Tensor(rng.standard_normal((1, 4, 8, 8)))

    def f(x, *params):
        b, s = blocks.with_tensors(stack, params)
        return (blocks.se_block(blocks.convnext_block(x, b), s) * proj).sum()

    assert grad_check(f, [x] + values, skip_kinks=True) < 1e-4


def test_whole_stn(rng):
    # 16x16 is the smallest input the two conv5/pool2 stages accept
    stn = blocks.init_stn(rng, 1, 16, dtype=np.float64)
    leaves = [p for _, p in blocks.named_tensors(stn)]
    values = [p.data.copy() for p in leaves]
    values[6] = rng.standard_normal(values[6].shape) * 0.05  # fc2 weight off zero so gradients reach the loc net
    values[7] = np.array([0.9, 0.1, 0.03, -0.1, 0.9, -0.05])
    values[1] = values[1] + 0.1
    values[3] = values[3] + 0.1
    values[5] = values[5] + 0.1
    x = rng.standard_normal((1, 1, 16, 16))
    proj = Tensor(rng.standard_normal((1, 1, 16, 16)))

    def f(x, *params):
        return (blocks.stn_forward(x, blocks.with_tensors(stn, params)) * proj).sum()

    assert grad_check(f, [x] + values, skip_kinks=True) < 1e-4


@pytest.mark.parametrize("seed", [0, 1])
def test_composed_micro_model(seed):
    assert model_check(seed) < 1e-3
