"""Shared test helpers: a central finite-difference gradient checker."""

import numpy as np

from hardkd.diffcore import Tensor, grad


def fd_gradient(fn, tensors, index, h=1e-5):
    """Central finite differences of scalar fn(*tensors) w.r.t. tensors[index]."""
    base = tensors[index]
    out = np.zeros_like(base.data)
    flat = base.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn(*tensors).item()
        flat[i] = orig - h
        minus = fn(*tensors).item()
        flat[i] = orig
        out.reshape(-1)[i] = (plus - minus) / (2 * h)
    return out


def check_gradients(fn, tensors, rtol=1e-4, h=1e-5):
    """Compare analytic grads of scalar fn(*tensors) against finite differences.

    Every entry of `tensors` must require gradients. Relative error is measured
    against the combined gradient scale, so near-zero entries do not blow up.
    """
    analytic = grad(fn(*tensors), tensors)
    for index, t in enumerate(tensors):
        numeric = fd_gradient(fn, tensors, index, h=h)
        a = analytic[t].data
        scale = max(np.abs(a).max(), np.abs(numeric).max(), 1e-8)
        rel = np.abs(a - numeric).max() / scale
        assert rel < rtol, (
            f"gradient mismatch for argument {index}: rel err {rel:.3e}\n"
            f"analytic:\n{a}\nnumeric:\n{numeric}"
        )


def leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)
