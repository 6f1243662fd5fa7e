import numpy as np
import pytest

from hardkd.diffcore import Tensor, make_rng
from hardkd.diffcore.optim import Adam, AdamState, adam_step


def test_zero_gradient_leaves_params_unchanged():
    p = np.array([1.0, -2.0, 3.0])
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(3)], state, lr=0.1)
    assert np.array_equal(p, [1.0, -2.0, 3.0])


def test_first_step_magnitude_is_about_lr():
    p = np.array([5.0])
    state = AdamState.for_params([p])
    adam_step([p], [np.ones(1)], state, lr=0.1)
    # bias correction makes the very first update ~ lr * sign(grad)
    assert p[0] == pytest.approx(5.0 - 0.1, abs=1e-8)


def test_five_step_trajectory_matches_reference_oracle():
    beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 0.05

    def oracle(grads):
        p, m, v = 2.0, 0.0, 0.0
        traj = []
        for t, g in enumerate(grads, start=1):
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)
            traj.append(p)
        return traj

    grads = [1.0, -0.5, 2.0, 0.1, -1.5]
    p = np.array([2.0])
    state = AdamState.for_params([p])
    for g, expected in zip(grads, oracle(grads)):
        adam_step([p], [np.array([g])], state, lr=lr,
                  beta1=beta1, beta2=beta2, eps=eps)
        assert p[0] == pytest.approx(expected, abs=1e-10)


def test_moments_start_at_zero():
    state = AdamState.for_params([np.ones((2, 3))])
    assert state.step == 0
    assert np.array_equal(state.m[0], np.zeros((2, 3)))
    assert np.array_equal(state.v[0], np.zeros((2, 3)))


def test_weight_decay_pulls_toward_zero():
    p = np.array([10.0])
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(1)], state, lr=0.1, weight_decay=0.01)
    assert p[0] < 10.0


def test_nonpositive_lr_rejected():
    p = np.array([1.0])
    with pytest.raises(ValueError):
        adam_step([p], [np.ones(1)], AdamState.for_params([p]), lr=0.0)


def test_non_finite_gradient_raises():
    p = np.array([1.0])
    with pytest.raises(FloatingPointError):
        adam_step([p], [np.array([np.nan])], AdamState.for_params([p]), lr=0.1)


def test_adam_class_reads_grad_buffers():
    x = Tensor([3.0], requires_grad=True)
    opt = Adam([x], lr=0.1)
    (x * x).sum().backward()
    opt.step()
    assert x.data[0] == pytest.approx(2.9, abs=1e-8)
    opt.zero_grad()
    assert np.array_equal(x.grad, [0.0])


def test_adam_class_rejects_missing_gradient():
    x = Tensor([1.0], requires_grad=True)
    x.grad = None
    with pytest.raises(RuntimeError):
        Adam([x]).step()


def test_adam_deterministic_trajectory():
    def run():
        rng = make_rng(11)
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        opt = Adam([x], lr=0.01)
        for _ in range(20):
            opt.zero_grad()
            (x * x).sum().backward()
            opt.step()
        return x.data.copy()

    assert np.array_equal(run(), run())
