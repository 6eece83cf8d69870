import math

import numpy as np
import pytest

from routedistill import optim
from routedistill.optim import AdamWState, TrainSchedule, adamw_step, clip_grads, lr_at
from routedistill.tensor import NonFiniteError, Tensor


def test_zero_grad_zero_decay_is_fixed_point():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = AdamWState(weight_decay=0.0)
    adamw_step(state, [p], [np.zeros(2)], lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_zero_grad_decay_scales_params():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = AdamWState(weight_decay=0.01)
    adamw_step(state, [p], [np.zeros(2)], lr=0.1)
    np.testing.assert_allclose(p.data, [0.999, -1.998], rtol=0, atol=1e-15)


def test_descent_on_convex_quadratic():
    p = Tensor([1.0], requires_grad=True)
    state = AdamWState(weight_decay=0.0)
    adamw_step(state, [p], [2.0 * p.data.copy()], lr=0.1)
    assert abs(p.data[0]) < 1.0


def test_nonfinite_grad_rejects_step_without_mutation():
    p = Tensor([1.0], requires_grad=True)
    state = AdamWState()
    with pytest.raises(NonFiniteError):
        adamw_step(state, [p], [np.array([float("inf")])], lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0])
    assert state.step_count == 0


def test_step_counter_and_moment_shapes():
    p = Tensor(np.ones((2, 3)), requires_grad=True)
    state = AdamWState()
    for i in range(3):
        adamw_step(state, [p], [np.full((2, 3), 0.1)], lr=1e-3)
        assert state.step_count == i + 1
    assert state.m[0].shape == (2, 3)
    assert state.v[0].shape == (2, 3)


def test_grad_shape_mismatch_rejected():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        adamw_step(AdamWState(), [p], [np.ones(4)], lr=1e-3)


class TestClip:
    def test_norm_reduced_to_max(self):
        g = [np.array([3.0, 4.0])]
        norm = clip_grads(g, max_norm=1.0)
        assert norm == pytest.approx(5.0)
        assert optim.global_grad_norm(g) <= 1.0 + 1e-9

    def test_small_gradients_untouched(self):
        g = [np.array([0.1, 0.2])]
        clip_grads(g, max_norm=1.0)
        np.testing.assert_array_equal(g[0], [0.1, 0.2])


class TestSchedule:
    def sched(self, **kw):
        base = dict(epochs=2, batch=4, base_lr=1e-3, warmup=10, cosine=True, clip=1.0, seed=0)
        base.update(kw)
        return TrainSchedule(**base).resolve(100)

    def test_step_zero_is_zero(self):
        assert lr_at(0, self.sched()) == 0.0

    def test_warmup_end_hits_base(self):
        s = self.sched()
        assert lr_at(s.warmup, s) == pytest.approx(s.base_lr)

    def test_final_step_is_zero(self):
        s = self.sched()
        assert lr_at(s.total_steps, s) == pytest.approx(0.0, abs=1e-12)

    def test_constant_after_warmup_without_cosine(self):
        s = self.sched(cosine=False)
        assert lr_at(s.warmup + 7, s) == s.base_lr

    def test_warmup_longer_than_run_rejected(self):
        with pytest.raises(ValueError):
            TrainSchedule(
                epochs=1, batch=50, base_lr=1e-3, warmup=10, cosine=True, clip=1.0, seed=0
            ).resolve(50)
