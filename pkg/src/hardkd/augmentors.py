"""Parameterized augmentation models g(x) plus the static baseline
augmentations used as controls.

Learnable augmentors draw their transform through the reparametrization
trick, so a downstream scalar is differentiable in every augmentor
parameter. All of them start as (near-)identity maps.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import save_checkpoint
from .data import translate_images
from .diffcore import (
    Tensor,
    affine_grid,
    combine_patches,
    extract_patches,
    get_default_dtype,
    grid_sample_bilinear,
    repeat,
    reparam_sample,
    softmax_over_axis,
)

INIT_LOG_SIGMA = math.log(1e-3)

IDENTITY_THETA = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _param(values):
    return Tensor(np.asarray(values, dtype=get_default_dtype()).copy(), requires_grad=True)


class Augmentor:
    """Common surface: augment(batch, rng), trainable parameters, snapshots."""

    def augment(self, x, rng):
        raise NotImplementedError

    def parameters(self):
        raise NotImplementedError

    def state_dict(self):
        raise NotImplementedError

    def load_state_dict(self, state):
        raise NotImplementedError

    @property
    def descriptor(self):
        raise NotImplementedError

    def snapshot(self):
        """Frozen deep copy; later mutation of the live augmentor cannot leak in."""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.requires_grad = False
            p.grad = None
        return clone

    def save(self, path):
        save_checkpoint(path, self.descriptor, self.state_dict())


class GaussianAugmentor(Augmentor):
    """x + eps with eps ~ N(mu, exp(log_sigma)^2), one draw per batch row."""

    def __init__(self, dim, init_log_sigma=INIT_LOG_SIGMA):
        self.dim = int(dim)
        self.mu = _param(np.zeros(self.dim))
        self.log_sigma = _param(np.full(self.dim, init_log_sigma))

    def augment(self, x, rng):
        noise = reparam_sample(self.mu, self.log_sigma, rng,
                               shape=(x.shape[0], self.dim))
        return x + noise

    def parameters(self):
        return [self.mu, self.log_sigma]

    def state_dict(self):
        return {"mu": self.mu.data, "log_sigma": self.log_sigma.data}

    def load_state_dict(self, state):
        self.mu.data = np.asarray(state["mu"], dtype=self.mu.dtype).reshape(self.dim)
        self.log_sigma.data = np.asarray(
            state["log_sigma"], dtype=self.log_sigma.dtype
        ).reshape(self.dim)

    @property
    def descriptor(self):
        return f"aug-gaussian:d={self.dim}"


class AffineAugmentor(Augmentor):
    """Learned distribution over the 6 entries of a sampling-grid matrix.

    The mean starts at the identity transform and the per-entry std at 1e-3,
    so the initial augmentor is a near-identity map.
    """

    def __init__(self, init_log_sigma=INIT_LOG_SIGMA):
        self.theta_mu = _param(IDENTITY_THETA)
        self.theta_log_sigma = _param(np.full((2, 3), init_log_sigma))

    def augment(self, x, rng):
        b, _, h, w = x.shape
        theta = reparam_sample(self.theta_mu, self.theta_log_sigma, rng,
                               shape=(b, 2, 3))
        if not np.isfinite(theta.data).all():
            raise FloatingPointError("non-finite affine matrix draw")
        return grid_sample_bilinear(x, affine_grid(theta, h, w))

    def parameters(self):
        return [self.theta_mu, self.theta_log_sigma]

    def state_dict(self):
        return {"theta_mu": self.theta_mu.data,
                "theta_log_sigma": self.theta_log_sigma.data}

    def load_state_dict(self, state):
        self.theta_mu.data = np.asarray(
            state["theta_mu"], dtype=self.theta_mu.dtype).reshape(2, 3)
        self.theta_log_sigma.data = np.asarray(
            state["theta_log_sigma"], dtype=self.theta_log_sigma.dtype).reshape(2, 3)

    @property
    def descriptor(self):
        return "aug-affine"


class MixAugmentor(Augmentor):
    """Patch-wise, input-dependent interpolation across groups of images.

    Each patch is projected to an embedding, compared (dot product) against a
    query drawn per group, and the per-patch softmax over the group's images
    weights a convex combination of the original patches. Every group member
    receives the combined image.
    """

    def __init__(self, channels, height, width, patch=4, embed=32, group=2,
                 rng=None):
        if height % patch or width % patch:
            raise ValueError(f"patch {patch} must divide {height}x{width}")
        if group < 2:
            raise ValueError(f"group size must be >= 2, got {group}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.channels = channels
        self.height = height
        self.width = width
        self.patch = patch
        self.embed = embed
        self.group = group
        d = channels * patch * patch
        self.projection = _param(rng.standard_normal((d, embed)) / math.sqrt(d))
        self.query_mu = _param(np.zeros(embed))
        self.query_log_sigma = _param(np.zeros(embed))

    def augment(self, x, rng):
        b = x.shape[0]
        if b % self.group:
            raise ValueError(f"batch size {b} not divisible by group size {self.group}")
        n_groups = b // self.group
        k = (self.height // self.patch) * (self.width // self.patch)
        d = self.channels * self.patch * self.patch

        patches = extract_patches(x, self.patch)                      # (B, K, D)
        emb = patches.reshape(b * k, d) @ self.projection             # (B*K, E)
        query = reparam_sample(self.query_mu, self.query_log_sigma, rng,
                               shape=(n_groups, self.embed))          # one per group
        query_per_image = repeat(query, self.group, axis=0)           # (B, E)
        scores = (emb.reshape(b, k, self.embed)
                  * query_per_image.reshape(b, 1, self.embed)).sum(axis=2)  # (B, K)
        weights = softmax_over_axis(scores.reshape(n_groups, self.group, k), axis=1)
        grouped = patches.reshape(n_groups, self.group, k, d)
        combined = (weights.reshape(n_groups, self.group, k, 1) * grouped).sum(axis=1)
        per_image = repeat(combined, self.group, axis=0)              # (B, K, D)
        return combine_patches(per_image, self.channels, self.height,
                               self.width, self.patch)

    def mix_weights(self, x, rng):
        """Per-patch group weights only (for simplex property checks)."""
        b = x.shape[0]
        n_groups = b // self.group
        k = (self.height // self.patch) * (self.width // self.patch)
        d = self.channels * self.patch * self.patch
        patches = extract_patches(x, self.patch)
        emb = patches.reshape(b * k, d) @ self.projection
        query = reparam_sample(self.query_mu, self.query_log_sigma, rng,
                               shape=(n_groups, self.embed))
        query_per_image = repeat(query, self.group, axis=0)
        scores = (emb.reshape(b, k, self.embed)
                  * query_per_image.reshape(b, 1, self.embed)).sum(axis=2)
        return softmax_over_axis(scores.reshape(n_groups, self.group, k), axis=1)

    def parameters(self):
        return [self.projection, self.query_mu, self.query_log_sigma]

    def state_dict(self):
        return {
            "projection": self.projection.data,
            "query_mu": self.query_mu.data,
            "query_log_sigma": self.query_log_sigma.data,
        }

    def load_state_dict(self, state):
        self.projection.data = np.asarray(
            state["projection"], dtype=self.projection.dtype
        ).reshape(self.projection.shape)
        self.query_mu.data = np.asarray(
            state["query_mu"], dtype=self.query_mu.dtype).reshape(self.embed)
        self.query_log_sigma.data = np.asarray(
            state["query_log_sigma"], dtype=self.query_log_sigma.dtype
        ).reshape(self.embed)

    @property
    def descriptor(self):
        return (f"aug-mix:c={self.channels},h={self.height},w={self.width},"
                f"p={self.patch},e={self.embed},g={self.group}")


class ComposedAugmentor(Augmentor):
    """Inner augmentor followed by an affine augmentor (generative-style slot)."""

    def __init__(self, inner, affine=None):
        self.inner = inner
        self.affine = affine if affine is not None else AffineAugmentor()

    def augment(self, x, rng):
        return self.affine.augment(self.inner.augment(x, rng), rng)

    def parameters(self):
        return self.inner.parameters() + self.affine.parameters()

    def state_dict(self):
        out = {f"inner.{k}": v for k, v in self.inner.state_dict().items()}
        out.update({f"affine.{k}": v for k, v in self.affine.state_dict().items()})
        return out

    def load_state_dict(self, state):
        self.inner.load_state_dict(
            {k[len("inner."):]: v for k, v in state.items() if k.startswith("inner.")})
        self.affine.load_state_dict(
            {k[len("affine."):]: v for k, v in state.items() if k.startswith("affine.")})

    @property
    def descriptor(self):
        return f"aug-composed({self.inner.descriptor}|{self.affine.descriptor})"


def from_descriptor(descriptor):
    """Reconstruct an (uninitialized) augmentor from its checkpoint descriptor."""
    if descriptor.startswith("aug-gaussian:"):
        fields = dict(kv.split("=") for kv in descriptor.split(":", 1)[1].split(","))
        return GaussianAugmentor(int(fields["d"]))
    if descriptor == "aug-affine":
        return AffineAugmentor()
    if descriptor.startswith("aug-mix:"):
        fields = dict(kv.split("=") for kv in descriptor.split(":", 1)[1].split(","))
        return MixAugmentor(
            channels=int(fields["c"]), height=int(fields["h"]), width=int(fields["w"]),
            patch=int(fields["p"]), embed=int(fields["e"]), group=int(fields["g"]),
        )
    if descriptor.startswith("aug-composed(") and descriptor.endswith(")"):
        body = descriptor[len("aug-composed("):-1]
        inner_desc, affine_desc = body.rsplit("|", 1)
        return ComposedAugmentor(from_descriptor(inner_desc), from_descriptor(affine_desc))
    raise ValueError(f"unknown augmentor descriptor {descriptor!r}")


def load_augmentor(path):
    """Load any augmentor snapshot saved via Augmentor.save."""
    from .checkpoint import load_checkpoint

    descriptor, arrays = load_checkpoint(path)
    augmentor = from_descriptor(descriptor)
    augmentor.load_state_dict(arrays)
    return augmentor


# ---- static baseline augmentations -----------------------------------------


def mixup_baseline(x1, x2, alpha):
    """(1 - alpha) * x1 + alpha * x2."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch: {x1.shape} vs {x2.shape}")
    return (1.0 - alpha) * x1 + alpha * x2


@dataclass
class AffineRanges:
    """Uniform sampling ranges for the random-affine control.

    `scale` is the sampling-grid scale interval; `max_shift_px` is in pixels.
    Defaults are chosen so content inside the central 14x14 box of a 28x28
    canvas stays fully visible.
    """

    max_shift_px: float = 3.5
    max_rotation_deg: float = 15.0
    scale: tuple = (0.85, 1.15)
    max_shear_deg: float = 0.0

    def validate(self):
        if self.max_shift_px < 0 or self.max_rotation_deg < 0 or self.max_shear_deg < 0:
            raise ValueError("affine ranges must be non-negative")
        lo, hi = self.scale
        if lo <= 0 or lo > hi:
            raise ValueError(f"degenerate scale interval {self.scale}")


def _random_affine_theta(rng, ranges, h, w):
    tx = rng.uniform(-ranges.max_shift_px, ranges.max_shift_px)
    ty = rng.uniform(-ranges.max_shift_px, ranges.max_shift_px)
    rot = math.radians(rng.uniform(-ranges.max_rotation_deg, ranges.max_rotation_deg))
    shear = math.radians(rng.uniform(-ranges.max_shear_deg, ranges.max_shear_deg))
    scale = rng.uniform(*ranges.scale)
    cos_r, sin_r = math.cos(rot), math.sin(rot)
    lin = scale * np.array([[cos_r, -sin_r], [sin_r, cos_r]]) @ np.array(
        [[1.0, math.tan(shear)], [0.0, 1.0]]
    )
    # translation in normalized units; content moves by (tx, ty) pixels
    tnorm = np.array([-2.0 * tx / max(w - 1, 1), -2.0 * ty / max(h - 1, 1)])
    return np.concatenate([lin, tnorm[:, None]], axis=1)


def random_affine_baseline(x, rng, ranges=None):
    """Per-image affine resampling with parameters drawn uniformly from ranges."""
    if ranges is None:
        ranges = AffineRanges()
    ranges.validate()
    b, _, h, w = x.shape
    thetas = np.stack([_random_affine_theta(rng, ranges, h, w) for _ in range(b)])
    grid = affine_grid(Tensor(thetas.astype(x.dtype)), h, w)
    return grid_sample_bilinear(x, grid)


def oracle_shift_baseline(x, rng, max_shift):
    """Integer-pixel shifts matching the shifted test-set generator."""
    b, _, h, w = x.shape
    if max_shift >= w or max_shift >= h:
        raise ValueError(f"max_shift {max_shift} exceeds image extent {h}x{w}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    out = np.empty_like(data)
    for i in range(b):
        dx, dy = rng.integers(-max_shift, max_shift + 1, size=2)
        out[i] = translate_images(data[i], int(dx), int(dy))
    return Tensor(out) if isinstance(x, Tensor) else out
