"""Neural-network primitives with hand-written backward rules.

Layouts are fixed: activations NCHW, conv weights [out, in/groups, kh, kw],
linear weights [out, in], sampling grids [N, H, W, 2] in (x, y) order.
"""
from __future__ import annotations

import contextlib
import hashlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import DimensionError, Tensor

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# when not None, piecewise ops append their discrete branch choices here
_branch_log: list[bytes] | None = None


@contextlib.contextmanager
def record_branches():
    """Collect the branch pattern (ReLU masks, pooling argmaxes, bilinear
    cells) of every piecewise op run inside the block. Two evaluations with
    equal digests lie on the same smooth piece."""
    global _branch_log
    prev = _branch_log
    log: list[bytes] = []
    _branch_log = log
    try:
        yield log
    finally:
        _branch_log = prev


def branch_digest(log: list[bytes]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for item in log:
        h.update(item)
    return h.hexdigest()


def _log_branch(*arrays: np.ndarray) -> None:
    if _branch_log is not None:
        for a in arrays:
            _branch_log.append(np.ascontiguousarray(a).tobytes())


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, groups: int = 1) -> Tensor:
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be NCHW, got rank {x.ndim}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be [out, in/groups, kh, kw], got rank {weight.ndim}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups:
        raise DimensionError(f"input channels (axis 1) = {c} not divisible by groups = {groups}")
    if o % groups:
        raise DimensionError(f"output channels (weight axis 0) = {o} not divisible by groups = {groups}")
    if cg != c // groups:
        raise DimensionError(f"weight axis 1 = {cg} but input channels / groups = {c // groups}")
    if h + 2 * ph < kh:
        raise DimensionError(f"padded height (axis 2) {h + 2 * ph} smaller than kernel {kh}")
    if w + 2 * pw < kw:
        raise DimensionError(f"padded width (axis 3) {w + 2 * pw} smaller than kernel {kw}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"bias shape {bias.shape} != ({o},)")

    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    depthwise = groups == c and o == c and cg == 1

    def tap(arr, i, j):
        return arr[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]

    if depthwise:
        out = np.zeros((n, o, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += tap(xp, i, j) * wd[:, 0, i, j][None, :, None, None]
        cols = None
    else:
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]  # N,C,Ho,Wo,kh,kw
        if groups == 1:
            out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        else:
            cols_g = cols.reshape(n, groups, cg, ho, wo, kh, kw)
            wg = wd.reshape(groups, o // groups, cg, kh, kw)
            out = np.einsum("ngchwij,gocij->ngohw", cols_g, wg).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gxp = np.zeros_like(xp)
        if depthwise:
            gw = np.zeros_like(wd)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (g * tap(xp, i, j)).sum(axis=(0, 2, 3))
                    tap(gxp, i, j)[...] += g * wd[:, 0, i, j][None, :, None, None]
        elif groups == 1:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw
            gcols = np.tensordot(g, wd, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
            for i in range(kh):
                for j in range(kw):
                    tap(gxp, i, j)[...] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        else:
            cols_g = cols.reshape(n, groups, cg, ho, wo, kh, kw)
            wg = wd.reshape(groups, o // groups, cg, kh, kw)
            g_g = g.reshape(n, groups, o // groups, ho, wo)
            gw = np.einsum("ngohw,ngchwij->gocij", g_g, cols_g).reshape(wd.shape)
            gcols = np.einsum("ngohw,gocij->ngchwij", g_g, wg).reshape(n, c, ho, wo, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    tap(gxp, i, j)[...] += gcols[..., i, j]
        gx = gxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Odd trailing rows/columns are dropped;
    ties route the gradient to the first maximum in row-major order."""
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise DimensionError(f"max_pool2d needs spatial dims >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    xc = x.data[:, :, : 2 * h2, : 2 * w2]
    win = xc.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    _log_branch(idx)

    def backward(g):
        mask = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(mask, idx[..., None], g[..., None], axis=-1)
        gc = mask.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : 2 * h2, : 2 * w2] = gc
        return (gx,)

    return Tensor._make(out, (x,), backward, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, NCHW -> NC11."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got rank {x.ndim}")
    return x.mean(axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# dense layers and normalization
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W^T + b over the last axis."""
    out_f, in_f = weight.shape
    if x.shape[-1] != in_f:
        raise DimensionError(f"linear: input last axis is {x.shape[-1]}, weight expects {in_f}")
    if bias is not None and bias.shape != (out_f,):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({out_f},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, in_f)
    wd = weight.data
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (out_f,))

    def backward(g):
        g2 = g.reshape(-1, out_f)
        gx = (g2 @ wd).reshape(x.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "linear")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` then scale and shift."""
    axis = axis % x.ndim
    extent = x.shape[axis]
    if extent < 1:
        raise DimensionError(f"layer_norm: normalized axis {axis} has extent {extent}")
    if gamma.shape != (extent,) or beta.shape != (extent,):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match axis {axis} extent {extent}"
        )
    bshape = [1] * x.ndim
    bshape[axis] = extent
    gb = gamma.data.reshape(bshape)
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xm = xd - mu
    var = (xm * xm).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xm * rstd
    out = xhat * gb + beta.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gxhat = g * gb
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=axis, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True)
        )
        ggamma = (g * xhat).sum(axis=other)
        gbeta = g.sum(axis=other)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf form of the Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = xd * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return Tensor._make(out, (x,), backward, "gelu")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    _log_branch(mask)
    return Tensor._make(np.where(mask, xd, 0).astype(xd.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# spatial transformer sampling
# ---------------------------------------------------------------------------


def affine_grid(theta: Tensor, out_h: int, out_w: int) -> Tensor:
    """Map the align-corners target lattice over [-1, 1]^2 through ``theta``
    (N x 2 x 3). Returns source coordinates of shape N x H x W x 2.

    The grid is always float64: in float32 the coordinate rounding alone
    (about 1e-5 pixels at 224) shows up as visible error on sharp images."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"affine_grid output size must be positive, got {out_h}x{out_w}")
    if theta.ndim != 3 or theta.shape[1:] != (2, 3):
        raise DimensionError(f"theta must be N x 2 x 3, got {theta.shape}")
    base = base_lattice(out_h, out_w, np.float64).reshape(1, out_h * out_w, 3)
    grid = Tensor(base) @ theta.permute(0, 2, 1)
    return grid.reshape(theta.shape[0], out_h, out_w, 2)


def base_lattice(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Homogeneous target coordinates [x, y, 1] for an h x w align-corners lattice."""
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy, np.ones_like(gx)], axis=-1).astype(dtype)


def grid_sample_bilinear(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling with align-corners coordinates and zero padding.

    ``grid[n, i, j] = (gx, gy)`` in normalized coordinates; -1 and +1 hit the
    centers of the first and last pixels.
    """
    if x.ndim != 4:
        raise DimensionError(f"grid_sample input must be NCHW, got rank {x.ndim}")
    if grid.ndim != 4 or grid.shape[-1] != 2:
        raise DimensionError(f"grid must be N x H x W x 2, got {grid.shape}")
    n, c, h, w = x.shape
    if grid.shape[0] != n:
        raise DimensionError(f"grid batch (axis 0) {grid.shape[0]} != input batch {n}")
    _, ho, wo, _ = grid.shape
    p = ho * wo
    gd = grid.data.astype(np.float64).reshape(n, p, 2)
    sx = (w - 1) / 2.0
    sy = (h - 1) / 2.0
    ix = (gd[..., 0] + 1.0) * sx
    iy = (gd[..., 1] + 1.0) * sy
    x0 = np.floor(ix)
    y0 = np.floor(iy)
    fx = ix - x0
    fy = iy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    _log_branch(x0, y0)
    xt = x.data.reshape(n, c, h * w).transpose(0, 2, 1)  # N, HW, C
    rows = np.arange(n)[:, None]

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        cx = x0 + dx
        cy = y0 + dy
        valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        flat = np.where(valid, cy * w + cx, 0)
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        vals = xt[rows, flat] * valid[..., None]  # N, P, C
        # d(weight)/d(ix), d(weight)/d(iy)
        dwx = (1.0 if dx else -1.0) * wy
        dwy = (1.0 if dy else -1.0) * wx
        corners.append((flat, valid, wx * wy, dwx, dwy, vals))

    out = sum(wgt[..., None] * vals for _, _, wgt, _, _, vals in corners)
    out = out.transpose(0, 2, 1).reshape(n, c, ho, wo).astype(x.dtype)

    def backward(g):
        gt = g.reshape(n, c, p).transpose(0, 2, 1)  # N, P, C
        gx = np.zeros((n * h * w, c), dtype=g.dtype)
        gix = np.zeros((n, p))
        giy = np.zeros((n, p))
        offsets = (np.arange(n) * (h * w))[:, None]
        for flat, valid, wgt, dwx, dwy, vals in corners:
            contrib = gt * (wgt * valid)[..., None]
            np.add.at(gx, (flat + offsets).reshape(-1), contrib.reshape(-1, c))
            gv = (gt * vals).sum(axis=-1)
            gix += gv * dwx
            giy += gv * dwy
        gx = gx.reshape(n, h * w, c).transpose(0, 2, 1).reshape(x.shape)
        ggrid = np.stack([gix * sx, giy * sy], axis=-1).reshape(grid.shape)
        return gx, ggrid

    return Tensor._make(out, (x, grid), backward, "grid_sample")


# ---------------------------------------------------------------------------
# regularization
# ---------------------------------------------------------------------------


def drop_path(x: Tensor, drop_prob: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth: zero whole samples of a residual branch.

    Kept samples are rescaled by 1/(1-p) so the expectation is unchanged.
    """
    if not training or drop_prob <= 0.0:
        return x
    keep = 1.0 - drop_prob
    if rng is None:
        raise ValueError("drop_path in training mode needs an rng")
    mask = (rng.random(x.shape[0]) < keep).astype(x.dtype)
    if keep > 0.0:
        mask = mask / keep
    mask = mask.reshape((x.shape[0],) + (1,) * (x.ndim - 1)).astype(x.dtype)
    return x * Tensor(mask)
