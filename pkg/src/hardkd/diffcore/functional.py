"""Differentiable operations: losses, softmax, convolution, grid sampling.

All backward rules are handwritten against the numpy forward and verified
by finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _ensure_tensor

KL_FLOOR = 1e-12


def softmax_with_temperature(logits, temperature):
    """Row-wise softmax of logits/temperature with max-subtraction."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    a = _ensure_tensor(logits)
    z = a.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gi = (g - (g * s).sum(axis=-1, keepdims=True)) * s / temperature
        return [(a, gi)]

    return Tensor._from_op(s, (a,), backward)


def kl_divergence(p, q):
    """Mean over rows of sum_c p_c (log p_c - log q_c).

    Terms with p_c = 0 contribute 0; q is clamped below at KL_FLOOR.
    """
    p = _ensure_tensor(p)
    q = _ensure_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    if (p.data < 0).any() or (q.data < 0).any():
        raise ValueError("probabilities must be non-negative")
    rows = max(p.size // p.shape[-1], 1)
    for name, t in (("p", p), ("q", q)):
        sums = t.data.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError(f"rows of {name} must sum to 1 within 1e-6")
    qc = np.maximum(q.data, KL_FLOOR)
    active = p.data > 0
    log_ratio = np.where(active, np.log(np.where(active, p.data, 1.0)) - np.log(qc), 0.0)
    out = np.asarray((p.data * log_ratio).sum() / rows)

    def backward(g):
        gp = np.where(active, log_ratio + 1.0, 0.0) * (g / rows)
        gq = np.where(q.data > KL_FLOOR, -p.data / qc, 0.0) * (g / rows)
        return [(p, gp), (q, gq)]

    return Tensor._from_op(out, (p, q), backward)


def mse(a, b):
    """Mean squared elementwise difference."""
    a = _ensure_tensor(a)
    b = _ensure_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = a.size

    def backward(g):
        scaled = (2.0 / n) * g * diff
        return [(a, scaled), (b, -scaled)]

    return Tensor._from_op(np.asarray((diff * diff).mean()), (a, b), backward)


def _axis_coords(n, dtype):
    # -1 and +1 are the centers of the first and last pixel (align-corners).
    if n == 1:
        return np.zeros(1, dtype=dtype)
    return np.linspace(-1.0, 1.0, n, dtype=dtype)


def affine_grid(theta, height, width):
    """Sampling grid for a batch of 2x3 affine matrices.

    Output [B, H, W, 2] holds source coordinates (x_s, y_s) = theta @ (u, v, 1)
    at each output pixel's normalized coordinates (u, v).
    """
    theta = _ensure_tensor(theta)
    if theta.ndim != 3 or theta.shape[1:] != (2, 3):
        raise ValueError(f"theta must be [B, 2, 3], got {theta.shape}")
    if height < 1 or width < 1:
        raise ValueError("height and width must be >= 1")
    b = theta.shape[0]
    us = _axis_coords(width, theta.dtype)
    vs = _axis_coords(height, theta.dtype)
    base = np.stack(
        [
            np.tile(us, height),
            np.repeat(vs, width),
            np.ones(height * width, dtype=theta.dtype),
        ],
        axis=0,
    )  # (3, H*W)
    out = (theta.data @ base).transpose(0, 2, 1).reshape(b, height, width, 2)

    def backward(g):
        gflat = g.reshape(b, height * width, 2).transpose(0, 2, 1)  # (B, 2, H*W)
        return [(theta, gflat @ base.T)]

    return Tensor._from_op(out, (theta,), backward)


def grid_sample_bilinear(image, grid):
    """Bilinear resampling of image [B,C,H,W] at grid [B,H',W',2] coordinates.

    Coordinates are normalized with align-corners semantics; anything outside
    [-1, 1] samples the constant 0 (zero padding). Differentiable with respect
    to both the image and the grid.
    """
    image = _ensure_tensor(image)
    grid = _ensure_tensor(grid)
    if image.ndim != 4:
        raise ValueError(f"image must be [B,C,H,W], got {image.shape}")
    if grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != image.shape[0]:
        raise ValueError(f"grid must be [B,H',W',2] with matching batch, got {grid.shape}")
    if not np.isfinite(grid.data).all():
        raise ValueError("grid coordinates must be finite")
    bsz, ch, h, w = image.shape
    _, hg, wg, _ = grid.shape

    x = grid.data[..., 0]
    y = grid.data[..., 1]
    ix = (x + 1.0) * 0.5 * (w - 1)
    iy = (y + 1.0) * 0.5 * (h - 1)
    ix0 = np.floor(ix).astype(np.int64)
    iy0 = np.floor(iy).astype(np.int64)
    fx = ix - ix0
    fy = iy - iy0

    img_bhwc = image.data.transpose(0, 2, 3, 1)
    bi = np.arange(bsz)[:, None, None]
    corners = []
    for dx, dy, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        cx = ix0 + dx
        cy = iy0 + dy
        valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        cxc = np.clip(cx, 0, w - 1)
        cyc = np.clip(cy, 0, h - 1)
        val = img_bhwc[bi, cyc, cxc] * valid[..., None]  # (B, Hg, Wg, C)
        corners.append((cxc, cyc, valid, wgt, val, dx, dy))
    out_bhwc = sum(wgt[..., None] * val for _, _, _, wgt, val, _, _ in corners)
    out = out_bhwc.transpose(0, 3, 1, 2)

    def backward(g):
        g_bhwc = g.transpose(0, 2, 3, 1)
        dimg_bhwc = np.zeros_like(img_bhwc)
        dix = np.zeros_like(ix)
        diy = np.zeros_like(iy)
        for cxc, cyc, valid, wgt, val, dx, dy in corners:
            contrib = g_bhwc * valid[..., None] * wgt[..., None]
            np.add.at(dimg_bhwc, (bi, cyc, cxc), contrib)
            gv = (g_bhwc * val).sum(axis=-1)  # d out / d wgt, summed over channels
            dwx = (fy if dy == 1 else 1 - fy) * (1.0 if dx == 1 else -1.0)
            dwy = (fx if dx == 1 else 1 - fx) * (1.0 if dy == 1 else -1.0)
            dix += gv * dwx
            diy += gv * dwy
        dgrid = np.stack([dix * 0.5 * (w - 1), diy * 0.5 * (h - 1)], axis=-1)
        return [(image, dimg_bhwc.transpose(0, 3, 1, 2)), (grid, dgrid)]

    return Tensor._from_op(out, (image, grid), backward)


def reparam_sample(mu, log_sigma, rng, shape=None):
    """mu + exp(log_sigma) * z with z ~ N(0, 1); gradients reach mu/log_sigma only.

    `shape` broadcasts the parameters against an independent draw per element,
    e.g. one draw per batch row.
    """
    mu = _ensure_tensor(mu)
    log_sigma = _ensure_tensor(log_sigma)
    if shape is None:
        shape = np.broadcast_shapes(mu.shape, log_sigma.shape)
    z = Tensor(rng.standard_normal(shape).astype(mu.dtype, copy=False))
    return mu + log_sigma.exp() * z


def _im2col(xp, kh, kw, stride, oh, ow):
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def _col2im(cols, b, c, hp, wp, kh, kw, stride, oh, ow):
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return xp


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Direct 2-D convolution (cross-correlation) via im2col."""
    x = _ensure_tensor(x)
    weight = _ensure_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if ic != c:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {ic}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError("kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)  # (B, C*KH*KW, OH*OW)
    wm = weight.data.reshape(oc, -1)
    out = np.matmul(wm, cols).reshape(b, oc, oh, ow)
    if bias is not None:
        bias = _ensure_tensor(bias)
        out = out + bias.data[None, :, None, None]
    prev = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gl = g.reshape(b, oc, oh * ow)
        dw = np.tensordot(gl, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        dcols = np.matmul(wm.T, gl)
        dxp = _col2im(dcols, b, c, h + 2 * padding, w + 2 * padding, kh, kw, stride, oh, ow)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [(x, dx), (weight, dw)]
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return grads

    return Tensor._from_op(out, prev, backward)


def extract_patches(x, patch):
    """Split [B,C,H,W] into non-overlapping patches -> [B, K, C*P*P].

    K enumerates patch locations row-major; P must divide H and W.
    """
    x = _ensure_tensor(x)
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ValueError(f"patch size {patch} must divide image extent {h}x{w}")
    nh, nw = h // patch, w // patch
    blocks = x.data.reshape(b, c, nh, patch, nw, patch)
    out = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(b, nh * nw, c * patch * patch)

    def backward(g):
        gb = g.reshape(b, nh, nw, c, patch, patch).transpose(0, 3, 1, 4, 2, 5)
        return [(x, gb.reshape(b, c, h, w))]

    return Tensor._from_op(out, (x,), backward)


def combine_patches(patches, channels, height, width, patch):
    """Inverse of extract_patches: [B, K, C*P*P] -> [B,C,H,W]."""
    patches = _ensure_tensor(patches)
    b = patches.shape[0]
    nh, nw = height // patch, width // patch
    if patches.shape[1:] != (nh * nw, channels * patch * patch):
        raise ValueError(f"patch tensor shape {patches.shape} does not match target geometry")
    blocks = patches.data.reshape(b, nh, nw, channels, patch, patch)
    out = blocks.transpose(0, 3, 1, 4, 2, 5).reshape(b, channels, height, width)

    def backward(g):
        gb = g.reshape(b, channels, nh, patch, nw, patch).transpose(0, 2, 4, 1, 3, 5)
        return [(patches, gb.reshape(patches.shape))]

    return Tensor._from_op(out, (patches,), backward)


def softmax_over_axis(x, axis):
    """Plain softmax along an arbitrary axis (used for per-patch mix weights)."""
    a = _ensure_tensor(x)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return [(a, (g - (g * s).sum(axis=axis, keepdims=True)) * s)]

    return Tensor._from_op(s, (a,), backward)
