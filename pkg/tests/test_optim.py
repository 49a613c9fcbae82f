import numpy as np
import pytest

from vocabrl import optim as O
from vocabrl.tensor import Tensor


def _param(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def test_zero_gradient_keeps_parameters():
    p = _param([1.0, -2.0])
    opt = O.SGD([p], lr=0.5, momentum=0.75)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_sgd_momentum_rule():
    p = _param([0.0])
    opt = O.SGD([p], lr=0.1, momentum=0.5)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    # v1 = 1, v2 = 0.5 + 1 = 1.5; p = -0.1 * (1 + 1.5)
    np.testing.assert_allclose(p.data, [-0.25])


def test_clip_scales_norm_ten_to_one():
    p, q = _param([0.0, 0.0]), _param([0.0])
    p.grad, q.grad = np.array([6.0, 0.0]), np.array([8.0])
    norm = O.clip_grad_norm([p, q], 1.0)
    assert norm == pytest.approx(10.0)
    np.testing.assert_allclose(np.r_[p.grad, q.grad], [0.6, 0.0, 0.8], atol=1e-9)


def test_adagrad_steps_shrink():
    p = _param([0.0])
    opt = O.AdaGrad([p], lr=0.08)
    last, steps = 0.0, []
    for _ in range(5):
        p.grad = np.array([2.0])
        opt.step()
        steps.append(last - p.data[0])
        last = p.data[0]
    assert all(a > b for a, b in zip(steps, steps[1:]))


def test_adam_first_step_is_lr():
    p = _param([1.0, 1.0])
    opt = O.Adam([p], lr=1e-3)
    p.grad = np.array([0.3, -5.0])
    opt.step()
    np.testing.assert_allclose(p.data, [1.0 - 1e-3, 1.0 + 1e-3], rtol=1e-6)


def test_weight_decay_is_l2_gradient():
    p = _param([2.0])
    opt = O.SGD([p], lr=0.1, weight_decay=0.5)
    p.grad = np.array([0.0])
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])


def test_state_dict_round_trip():
    p = _param([1.0])
    opt = O.Adam([p], lr=0.01)
    p.grad = np.array([1.0])
    opt.step()
    q = _param([1.0])
    opt2 = O.Adam([q], lr=0.5)
    opt2.load_state_dict(opt.state_dict())
    assert opt2.lr == 0.01 and opt2.steps == 1
    np.testing.assert_array_equal(opt2.state[0]["m"], opt.state[0]["m"])


class TestSchedule:
    def test_frozen_early(self):
        assert O.lr_schedule(1.0, [(2.5, 30.0), (3.0, 20.0)]) == 1.0

    def test_two_drops_after_freeze(self):
        assert O.lr_schedule(1.0, [(7.5, 30.0), (8.0, 29.0), (8.5, 28.0)]) == 0.25

    def test_improvement_keeps_rate(self):
        assert O.lr_schedule(1.0, [(7.0, 1.0), (7.5, 2.0), (8.0, 3.0)]) == 1.0

    def test_monotone(self):
        rng = np.random.default_rng(0)
        hist = [(0.5 * i, s) for i, s in enumerate(rng.normal(size=40))]
        lrs = [O.lr_schedule(1.0, hist[:n]) for n in range(len(hist) + 1)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        O.make_optimizer("rmsprop", [], 0.1)
