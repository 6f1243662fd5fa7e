"""Teacher and student function families.

The cos teacher is analytic and frozen; the MLP student and the small CNN
teacher are built directly on diffcore tensors. The CNN ends in a global
average pool, which is what gives it approximate shift invariance.
"""

from __future__ import annotations

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .diffcore import Tensor, conv2d, get_default_dtype


class CosTeacher:
    """Analytic teacher f(x) = cos(x); parameter-free and frozen by nature."""

    descriptor = "cos-teacher"

    def __call__(self, x):
        return x.cos()

    def parameters(self):
        return []


def _init_weight(rng, fan_in, shape):
    # He init for ReLU stacks.
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(get_default_dtype()), requires_grad=True)


def _init_bias(shape):
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)


class Mlp:
    """Three fully-connected layers with ReLU between them; raw outputs."""

    def __init__(self, sizes=(1, 64, 64, 1), rng=None):
        if len(sizes) != 4:
            raise ValueError(f"expected 4 layer widths, got {sizes}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.sizes = tuple(int(s) for s in sizes)
        self.weights = []
        self.biases = []
        for d_in, d_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(_init_weight(rng, d_in, (d_in, d_out)))
            self.biases.append(_init_bias(d_out))

    @property
    def descriptor(self):
        return "mlp:" + "-".join(str(s) for s in self.sizes)

    def __call__(self, x):
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[-1]} != model width {self.sizes[0]}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = h.relu()
        return h

    def parameters(self):
        return self.weights + self.biases

    def state_dict(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"fc{i}.weight"] = w.data
            out[f"fc{i}.bias"] = b.data
        return out

    def load_state_dict(self, state):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w.data = np.asarray(state[f"fc{i}.weight"], dtype=w.dtype).reshape(w.shape)
            b.data = np.asarray(state[f"fc{i}.bias"], dtype=b.dtype).reshape(b.shape)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False


class Cnn:
    """conv(1->16, 3x3, pad 1) -> ReLU -> conv(16->32, 3x3, pad 1) -> ReLU
    -> global average pool -> fc(32 -> 10). Returns logits."""

    CHANNELS = (1, 16, 32)
    CLASSES = 10
    descriptor = "cnn:1-16-32-10"

    def __init__(self, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        c0, c1, c2 = self.CHANNELS
        self.conv1_w = _init_weight(rng, c0 * 9, (c1, c0, 3, 3))
        self.conv1_b = _init_bias(c1)
        self.conv2_w = _init_weight(rng, c1 * 9, (c2, c1, 3, 3))
        self.conv2_b = _init_bias(c2)
        self.fc_w = _init_weight(rng, c2, (c2, self.CLASSES))
        self.fc_b = _init_bias(self.CLASSES)

    def __call__(self, x):
        if x.ndim != 4 or x.shape[1] != self.CHANNELS[0]:
            raise ValueError(f"expected [B,1,H,W] input, got {x.shape}")
        if x.shape[2] < 3 or x.shape[3] < 3:
            raise ValueError("input smaller than the 3x3 kernels")
        h = conv2d(x, self.conv1_w, self.conv1_b, padding=1).relu()
        h = conv2d(h, self.conv2_w, self.conv2_b, padding=1).relu()
        pooled = h.mean(axis=(2, 3))
        return pooled @ self.fc_w + self.fc_b

    def parameters(self):
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b,
                self.fc_w, self.fc_b]

    def state_dict(self):
        return {
            "conv1.weight": self.conv1_w.data, "conv1.bias": self.conv1_b.data,
            "conv2.weight": self.conv2_w.data, "conv2.bias": self.conv2_b.data,
            "fc.weight": self.fc_w.data, "fc.bias": self.fc_b.data,
        }

    def load_state_dict(self, state):
        mapping = {
            "conv1.weight": self.conv1_w, "conv1.bias": self.conv1_b,
            "conv2.weight": self.conv2_w, "conv2.bias": self.conv2_b,
            "fc.weight": self.fc_w, "fc.bias": self.fc_b,
        }
        for name, p in mapping.items():
            p.data = np.asarray(state[name], dtype=p.dtype).reshape(p.shape)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False


class FlattenStudent:
    """Adapter feeding [B,C,H,W] batches into an MLP as flat vectors."""

    def __init__(self, mlp):
        self.mlp = mlp

    @property
    def descriptor(self):
        return self.mlp.descriptor

    def __call__(self, x):
        return self.mlp(x.reshape(x.shape[0], -1))

    def parameters(self):
        return self.mlp.parameters()

    def state_dict(self):
        return self.mlp.state_dict()

    def load_state_dict(self, state):
        self.mlp.load_state_dict(state)

    def freeze(self):
        self.mlp.freeze()


def save_model(model, path):
    save_checkpoint(path, model.descriptor, model.state_dict())


def load_model(model, path):
    """Load parameters into an existing model; errors name any arch mismatch."""
    _, arrays = load_checkpoint(path, expected_descriptor=model.descriptor)
    model.load_state_dict(arrays)
    return model
