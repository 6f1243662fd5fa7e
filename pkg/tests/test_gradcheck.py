"""Finite-difference checks for every differentiable operation.

All checks run in 64-bit with h=1e-5 and relative tolerance 1e-4. Random
constants are drawn once per instance (never inside the checked closure) and
grid coordinates are kept off the integer pixel lattice, where bilinear
interpolation is not differentiable.
"""

import numpy as np
import pytest

from conftest import check_gradients, leaf
from hardkd import distill as hd
from hardkd.augmentors import AffineAugmentor, GaussianAugmentor, MixAugmentor
from hardkd.diffcore import (
    Tensor,
    affine_grid,
    combine_patches,
    conv2d,
    extract_patches,
    grid_sample_bilinear,
    kl_divergence,
    make_rng,
    mse,
    repeat,
    reparam_sample,
    softmax_over_axis,
    softmax_with_temperature,
)

N_INSTANCES = 5


def rngs():
    return [make_rng(1000 + i) for i in range(N_INSTANCES)]


# ---- elementwise and reductions -------------------------------------------------


def test_grad_add_mul_sub():
    for rng in rngs():
        a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
        check_gradients(lambda a, b: ((a + b) * (a - b) + 2 * a).sum(), [a, b])


def test_grad_div_pow():
    for rng in rngs():
        a = leaf(rng, 2, 5, lo=0.5, hi=1.5)
        b = leaf(rng, 2, 5, lo=0.5, hi=1.5)
        check_gradients(lambda a, b: ((a / b) ** 3).sum(), [a, b])


def test_grad_matmul():
    for rng in rngs():
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        check_gradients(lambda a, b: ((a @ b) ** 2).sum(), [a, b])


def test_grad_relu():
    for rng in rngs():
        a = leaf(rng, 4, 4)
        a.data[np.abs(a.data) < 0.05] += 0.1  # keep away from the kink
        check_gradients(lambda a: (a.relu() * a.relu()).sum(), [a])


def test_grad_exp_log_cos():
    for rng in rngs():
        a = leaf(rng, 6, lo=0.2, hi=2.0)
        check_gradients(lambda a: (a.exp() + a.log() + a.cos()).sum(), [a])


def test_grad_sum_mean_axes():
    for rng in rngs():
        a = leaf(rng, 2, 3, 4)
        check_gradients(lambda a: (a.sum(axis=1) * a.mean(axis=(0, 2), keepdims=True).sum()).sum(), [a])


def test_grad_reshape_repeat():
    for rng in rngs():
        a = leaf(rng, 2, 3)
        check_gradients(lambda a: (repeat(a.reshape(3, 2), 2, axis=1) ** 2).sum(), [a])


# ---- softmax / losses ------------------------------------------------------------


def test_grad_softmax_with_temperature():
    for rng in rngs():
        a = leaf(rng, 4, 5, lo=-2, hi=2)
        w = Tensor(rng.random((4, 5)))  # frozen weighting, outside the closure
        check_gradients(lambda a: (softmax_with_temperature(a, 2.5) * w).sum(), [a])


def test_grad_kl_through_softmax():
    for rng in rngs():
        a = leaf(rng, 3, 5, lo=-1, hi=1)
        b = leaf(rng, 3, 5, lo=-1, hi=1)
        check_gradients(
            lambda a, b: kl_divergence(
                softmax_with_temperature(a, 1.0), softmax_with_temperature(b, 1.0)),
            [a, b])


def test_grad_mse():
    for rng in rngs():
        a, b = leaf(rng, 4, 3), leaf(rng, 4, 3)
        check_gradients(lambda a, b: mse(a, b), [a, b])


def test_grad_teacher_student_loss_kl_and_mse():
    cfg_kl = hd.DistillConfig(distance="kl", temperature=4.0)
    cfg_mse = hd.DistillConfig(distance="mse")
    for rng in rngs():
        s = leaf(rng, 4, 6, lo=-2, hi=2)
        t = Tensor(rng.uniform(-2, 2, size=(4, 6)))
        check_gradients(lambda s: hd.teacher_student_loss(s, t, cfg_kl), [s])
        s2 = leaf(rng, 5, 1)
        t2 = Tensor(rng.random((5, 1)))
        check_gradients(lambda s2: hd.teacher_teacher_loss(s2, t2, cfg_mse), [s2])


# ---- grid operations ---------------------------------------------------------------


def test_grad_affine_grid():
    for rng in rngs():
        theta = Tensor(
            np.array([[[1.0, 0, 0], [0, 1.0, 0]]]) + 0.1 * rng.standard_normal((1, 2, 3)),
            requires_grad=True)
        w = Tensor(rng.random((1, 5, 4, 2)))
        check_gradients(lambda theta: (affine_grid(theta, 5, 4) * w).sum(), [theta])


def _off_lattice_grid(rng, b, hg, wg):
    # interior coordinates kept away from exact pixel centers
    coords = rng.uniform(-0.8, 0.8, size=(b, hg, wg, 2))
    return coords + 0.013


def test_grad_grid_sample_image_and_grid():
    for rng in rngs():
        img = leaf(rng, 1, 2, 5, 5, lo=0.0, hi=1.0)
        grid = Tensor(_off_lattice_grid(rng, 1, 3, 3), requires_grad=True)
        w = Tensor(rng.random((1, 2, 3, 3)))
        check_gradients(lambda img, grid: (grid_sample_bilinear(img, grid) * w).sum(),
                        [img, grid])


def test_grad_affine_grid_sample_chain():
    for rng in rngs():
        theta = Tensor(
            np.array([[[0.9, 0.05, 0.03], [-0.04, 1.1, -0.07]]])
            + 0.02 * rng.standard_normal((1, 2, 3)),
            requires_grad=True)
        img = Tensor(rng.random((1, 1, 6, 6)))
        w = Tensor(rng.random((1, 1, 6, 6)))
        check_gradients(
            lambda theta: (grid_sample_bilinear(img, affine_grid(theta, 6, 6)) * w).sum(),
            [theta])


# ---- convolution / patches ---------------------------------------------------------


def test_grad_conv2d():
    for rng in rngs():
        x = leaf(rng, 2, 2, 5, 5)
        w = leaf(rng, 3, 2, 3, 3)
        b = leaf(rng, 3)
        check_gradients(
            lambda x, w, b: (conv2d(x, w, b, stride=2, padding=1) ** 2).sum(),
            [x, w, b])


def test_grad_patches_roundtrip():
    for rng in rngs():
        x = leaf(rng, 1, 1, 4, 4)
        w = Tensor(rng.random((1, 4, 4)))
        check_gradients(
            lambda x: (combine_patches(extract_patches(x, 2) ** 2, 1, 4, 4, 2)).sum(),
            [x])
        check_gradients(lambda x: (extract_patches(x, 2) * w).sum(), [x])


def test_grad_softmax_over_axis():
    for rng in rngs():
        x = leaf(rng, 2, 3, 4, lo=-2, hi=2)
        w = Tensor(rng.random((2, 3, 4)))
        check_gradients(lambda x: (softmax_over_axis(x, axis=1) * w).sum(), [x])


# ---- reparametrization and augmentors ----------------------------------------------


def test_grad_reparam_sample_frozen_draw():
    for i, rng in enumerate(rngs()):
        mu = leaf(rng, 4)
        log_sigma = leaf(rng, 4, lo=-1.0, hi=0.5)
        check_gradients(
            lambda mu, log_sigma: (reparam_sample(mu, log_sigma, make_rng(i), shape=(3, 4)) ** 2).sum(),
            [mu, log_sigma])


def test_grad_gaussian_augmentor_params():
    for i, rng in enumerate(rngs()):
        a = GaussianAugmentor(3, init_log_sigma=-0.5)
        a.mu.data[:] = rng.uniform(-0.5, 0.5, 3)
        x = Tensor(rng.random((4, 3)))
        check_gradients(lambda mu, ls: (a.augment(x, make_rng(50 + i)) ** 2).sum(),
                        [a.mu, a.log_sigma])


def test_grad_affine_augmentor_params():
    for i, rng in enumerate(rngs()):
        a = AffineAugmentor(init_log_sigma=-3.0)
        a.theta_mu.data += 0.05 * rng.standard_normal((2, 3))
        x = Tensor(rng.random((2, 1, 6, 6)))
        check_gradients(
            lambda mu, ls: (a.augment(x, make_rng(80 + i)) ** 2).sum(),
            [a.theta_mu, a.theta_log_sigma])


def test_grad_mix_augmentor_params():
    for i, rng in enumerate(rngs()):
        a = MixAugmentor(channels=1, height=4, width=4, patch=2, embed=3,
                         group=2, rng=rng)
        x = Tensor(rng.random((4, 1, 4, 4)))
        check_gradients(
            lambda proj, qmu, qls: (a.augment(x, make_rng(120 + i)) ** 2).sum(),
            [a.projection, a.query_mu, a.query_log_sigma])
