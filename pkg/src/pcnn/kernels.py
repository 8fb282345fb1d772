"""Differentiable neural-network primitives on NCHW tensors.

Coordinates follow one corner-aligned convention throughout: for an extent
``n > 1`` the normalized range [-1, 1] maps onto pixel centers 0 and n - 1;
a single-pixel extent maps to its center. Sampling outside the image reads
zeros.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatch, InvalidLabel, InvalidShape
from .tensor import Tensor, record


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (1, 1)

    def __post_init__(self):
        vals = (self.in_channels, self.out_channels, *self.kernel, *self.stride)
        if any(v < 1 for v in vals) or min(self.padding) < 0:
            raise InvalidShape(f"invalid convolution spec {self}")

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _require_4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise InvalidShape(f"{op}: expected N x C x H x W input, got {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation with zero padding (no kernel flip)."""
    _require_4d(x, "conv2d")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise InvalidShape(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise InvalidShape(f"conv2d: bias shape {bias.shape} does not match {o} outputs")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise InvalidShape(f"conv2d: output extent {ho}x{wo} for input {h}x{w}")

    # im2col in channels-last order: rows are output pixels, columns are (kh, kw, C) taps
    xt = x.data.transpose(0, 2, 3, 1)
    xp = np.pad(xt, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else xt
    hp, wp = xp.shape[1], xp.shape[2]
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wm = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(o, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward_fn(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        dw = None
        if weight.requires_grad:
            dw = np.ascontiguousarray((gm.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        db = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (gm @ wm).reshape(n, ho, wo, kh, kw, c)
            dxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :] += dcols[:, :, :, i, j, :]
            dx = np.ascontiguousarray(dxp[:, ph : ph + h, pw : pw + w, :].transpose(0, 3, 1, 2))
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv2d", out, inputs, backward_fn)


def max_pool2d(x: Tensor, window=(2, 2), stride=(2, 2)) -> Tensor:
    """Windowed maximum; ties route the gradient to the first maximum in row-major order."""
    _require_4d(x, "max_pool2d")
    n, c, h, w = x.shape
    kh, kw = _pair(window)
    sh, sw = _pair(stride)
    if kh > h or kw > w:
        raise InvalidShape(f"max_pool2d: window {kh}x{kw} larger than input {h}x{w}")
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, kh * kw)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * sh + arg // kw
    cols = np.arange(wo)[None, :] * sw + arg % kw
    plane = np.arange(n * c).reshape(n, c, 1, 1) * (h * w)
    flat_idx = (plane + rows * w + cols).reshape(-1)

    def backward_fn(g):
        dx = np.bincount(flat_idx, weights=g.reshape(-1), minlength=n * c * h * w)
        return (dx.astype(g.dtype).reshape(n, c, h, w),)

    return record("max_pool2d", np.ascontiguousarray(out), (x,), backward_fn)


def global_max_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_max_pool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        dx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(dx, arg[..., None], g[..., None], axis=-1)
        return (dx.reshape(n, c, h, w),)

    return record("global_max_pool", out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    inv = x.dtype.type(1.0 / (h * w))

    def backward_fn(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)).copy(),)

    return record("global_avg_pool", out, (x,), backward_fn)


class RunningStats:
    """Per-channel running mean/variance owned by one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def update(self, mean: np.ndarray, var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean = ((1 - m) * self.mean + m * mean).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * var_unbiased).astype(self.var.dtype)


BN_EPS = 1e-5


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool) -> Tensor:
    _require_4d(x, "batch_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidShape(f"batch_norm: affine parameters must have shape ({c},)")
    dt = x.dtype.type
    xd = x.data
    if training:
        m = n * h * w
        if m < 2:
            raise DegenerateBatch(f"batch_norm: {m} element per channel in train mode")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        stats.update(mean, var * (m / (m - 1)))
    else:
        m = None
        mean, var = stats.mean.astype(xd.dtype), stats.var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + dt(BN_EPS))).astype(xd.dtype)
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (inv[None, :, None, None] / dt(m)) * (dt(m) * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return record("batch_norm", out, (x, gamma, beta), backward_fn)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or weight.shape[1] != x.shape[1] \
            or bias.shape != (weight.shape[0],):
        raise InvalidShape(f"fully_connected: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def backward_fn(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return record("fully_connected", out, (x, weight, bias), backward_fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise InvalidShape(f"softmax_cross_entropy: logits must be N x K with K >= 2, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise InvalidShape(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidLabel(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def backward_fn(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1
        return (d * (g / n),)

    return record("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * (n_in - 1) / (n_out - 1)


def _lerp_indices(n_in: int, n_out: int):
    pos = _axis_coords(n_in, n_out)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.clip(i0, 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    return i0, i1, frac


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, f = _lerp_indices(n_in, n_out)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    return m


def bilinear_resize(x: Tensor, out: Tuple[int, int]) -> Tensor:
    """Corner-aligned bilinear resize of the last two axes.

    Values are blended as ``a + f * (b - a)`` so equal neighbors reproduce
    themselves exactly.
    """
    _require_4d(x, "bilinear_resize")
    ho, wo = int(out[0]), int(out[1])
    if ho < 1 or wo < 1:
        raise InvalidShape(f"bilinear_resize: output size {out}")
    n, c, h, w = x.shape
    if (ho, wo) == (h, w):
        return record("bilinear_resize", x.data.copy(), (x,), lambda g: (g,))
    dt = x.dtype
    y0, y1, fy = _lerp_indices(h, ho)
    x0, x1, fx = _lerp_indices(w, wo)
    fy = fy.astype(dt)[:, None]
    fx = fx.astype(dt)
    xd = x.data
    top = xd[:, :, y0][..., x0] + fx * (xd[:, :, y0][..., x1] - xd[:, :, y0][..., x0])
    bot = xd[:, :, y1][..., x0] + fx * (xd[:, :, y1][..., x1] - xd[:, :, y1][..., x0])
    res = top + fy * (bot - top)
    ry = _interp_matrix(h, ho).astype(dt)
    rx = _interp_matrix(w, wo).astype(dt)

    def backward_fn(g):
        return (np.einsum("ah,ncab,bw->nchw", ry, g, rx, optimize=True),)

    return record("bilinear_resize", np.ascontiguousarray(res), (x,), backward_fn)


def _normalized_axis(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return 2.0 * np.arange(n) / (n - 1) - 1.0


def grid_generate(theta: Tensor, out: Tuple[int, int]) -> Tensor:
    """Map per-sample 2x3 affine matrices to an N x H_out x W_out x 2 field of source coordinates."""
    ho, wo = int(out[0]), int(out[1])
    if ho < 1 or wo < 1:
        raise InvalidShape(f"grid_generate: output size {out}")
    if theta.data.ndim != 3 or theta.shape[1:] != (2, 3):
        raise InvalidShape(f"grid_generate: theta must be N x 2 x 3, got {theta.shape}")
    n = theta.shape[0]
    yt, xt = np.meshgrid(_normalized_axis(ho), _normalized_axis(wo), indexing="ij")
    base = np.stack([xt.ravel(), yt.ravel(), np.ones(ho * wo)], axis=1).astype(theta.dtype)
    grid = np.einsum("pk,njk->npj", base, theta.data).reshape(n, ho, wo, 2)

    def backward_fn(g):
        return (np.einsum("npj,pk->njk", g.reshape(n, ho * wo, 2), base),)

    return record("grid_generate", np.ascontiguousarray(grid), (theta,), backward_fn)


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of ``x`` at normalized grid positions, zero outside the image."""
    _require_4d(x, "grid_sample")
    n, c, h, w = x.shape
    if grid.data.ndim != 4 or grid.shape[0] != n or grid.shape[3] != 2:
        raise InvalidShape(f"grid_sample: grid {grid.shape} does not match input batch {n}")
    dt = x.dtype.type
    _, ho, wo, _ = grid.shape
    p = ho * wo
    gd = grid.data.reshape(n, p, 2)
    px = (gd[..., 0] + dt(1)) * dt((w - 1) / 2.0)
    py = (gd[..., 1] + dt(1)) * dt((h - 1) / 2.0)
    x0f, y0f = np.floor(px), np.floor(py)
    wx1, wy1 = (px - x0f).astype(x.dtype), (py - y0f).astype(x.dtype)
    wx0, wy0 = dt(1) - wx1, dt(1) - wy1
    x0, y0 = x0f.astype(np.int64), y0f.astype(np.int64)
    xf = x.data.reshape(n, c, h * w)

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi, xi = y0 + dy, x0 + dx
        valid = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
        idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        v = np.take_along_axis(xf, idx[:, None, :], axis=2) * valid[:, None, :]
        corners.append((idx, valid, v))
    (i00, m00, v00), (i01, m01, v01), (i10, m10, v10), (i11, m11, v11) = corners
    a, b = wy0[:, None, :], wy1[:, None, :]
    l, r = wx0[:, None, :], wx1[:, None, :]
    out = a * (l * v00 + r * v01) + b * (l * v10 + r * v11)

    def backward_fn(g):
        g = g.reshape(n, c, p)
        dx = None
        if x.requires_grad:
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
            acc = np.zeros(n * c * h * w)
            for idx, valid, wgt in ((i00, m00, a * l), (i01, m01, a * r), (i10, m10, b * l), (i11, m11, b * r)):
                contrib = g * wgt * valid[:, None, :]
                acc += np.bincount((base + idx[:, None, :]).ravel(), weights=contrib.ravel(),
                                   minlength=n * c * h * w)
            dx = acc.astype(g.dtype).reshape(n, c, h, w)
        dgrid = None
        if grid.requires_grad:
            dpx = (a * (v01 - v00) + b * (v11 - v10))
            dpy = (l * (v10 - v00) + r * (v11 - v01))
            gx = (g * dpx).sum(axis=1) * dt((w - 1) / 2.0)
            gy = (g * dpy).sum(axis=1) * dt((h - 1) / 2.0)
            dgrid = np.stack([gx, gy], axis=-1).reshape(n, ho, wo, 2)
        return dx, dgrid

    return record("grid_sample", np.ascontiguousarray(out.reshape(n, c, ho, wo)), (x, grid), backward_fn)


def crop(x: Tensor, rect: Tuple[int, int, int, int]) -> Tensor:
    """Copy the half-open rectangle (row_start, row_end, col_start, col_end) of the last two axes."""
    _require_4d(x, "crop")
    r0, r1, c0, c1 = rect
    h, w = x.shape[2:]
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise InvalidShape(f"crop: rectangle {rect} outside {h}x{w}")
    shape = x.shape

    def backward_fn(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[:, :, r0:r1, c0:c1] = g
        return (dx,)

    return record("crop", x.data[:, :, r0:r1, c0:c1].copy(), (x,), backward_fn)


def paste(tiles: Sequence[Tensor], rects: Sequence[Tuple[int, int, int, int]], size: Tuple[int, int],
          fill: float = 0.0) -> Tensor:
    """Write each tile into its rectangle of an H x W canvas.

    Cells covered by several tiles hold the mean of the tiles; uncovered
    cells hold ``fill``.
    """
    if len(tiles) != len(rects) or not tiles:
        raise InvalidShape("paste: need one rectangle per tile")
    n, c = tiles[0].shape[:2]
    h, w = size
    dtype = tiles[0].dtype
    acc = np.zeros((n, c, h, w), dtype=dtype)
    count = np.zeros((h, w), dtype=dtype)
    for t, (r0, r1, c0, c1) in zip(tiles, rects):
        if t.shape != (n, c, r1 - r0, c1 - c0):
            raise InvalidShape(f"paste: tile {t.shape} does not fit rectangle {(r0, r1, c0, c1)}")
        acc[:, :, r0:r1, c0:c1] += t.data
        count[r0:r1, c0:c1] += 1
    covered = count > 0
    safe = np.where(covered, count, 1)
    out = np.where(covered, acc / safe, dtype.type(fill))

    def backward_fn(g):
        gs = g / safe
        return tuple(gs[:, :, r0:r1, c0:c1].copy() for (r0, r1, c0, c1) in rects)

    return record("paste", out.astype(dtype), tuple(tiles), backward_fn)
