import math

import numpy as np
import pytest

from speechvec.errors import ConfigError, ScheduleExhaustedError, TrainingDivergenceError
from speechvec.optim import AdamW, lr_schedule
from speechvec.tensor import ParamTensor


class TestLrSchedule:
    def test_warmup_start_is_zero(self):
        assert lr_schedule(0, 100, 1e-3) == 0.0

    def test_warmup_peak(self):
        assert lr_schedule(10, 100, 1e-3) == pytest.approx(1e-3)

    def test_decay_end_is_zero(self):
        assert lr_schedule(100, 100, 1e-3) == 0.0

    def test_peak_at_ceil_of_fraction(self):
        total = 73
        peak = math.ceil(0.1 * total)
        values = [lr_schedule(s, total, 1.0) for s in range(total + 1)]
        assert max(values) == values[peak]
        assert all(a < b for a, b in zip(values[:peak], values[1:peak + 1]))
        assert all(a > b for a, b in zip(values[peak:], values[peak + 1:]))

    def test_exhausted(self):
        with pytest.raises(ScheduleExhaustedError):
            lr_schedule(101, 100, 1e-3)

    def test_too_few_steps(self):
        with pytest.raises(ConfigError):
            lr_schedule(0, 9, 1e-3)

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            lr_schedule(0, 100, 1e-3, warmup_fraction=1.5)


class TestAdamW:
    def test_zero_grad_zero_decay_is_fixed_point(self):
        p = ParamTensor("w", np.array([[1.0, -2.0]], dtype=np.float32))
        before = p.value.copy()
        opt = AdamW([p], weight_decay=0.0)
        opt.step(lr=0.1)
        assert np.array_equal(p.value, before)

    def test_decoupled_decay_exact_factor(self):
        p = ParamTensor("w", np.array([[4.0, -8.0]], dtype=np.float32))
        before = p.value.copy()
        lr, wd = 0.1, 0.01
        opt = AdamW([p], weight_decay=wd)
        opt.step(lr=lr)
        assert np.array_equal(p.value, before * (1.0 - lr * wd))

    def test_three_step_recurrence_matches_hand_unrolled(self):
        grads = [0.3, -0.7, 1.1]
        lr, wd, b1, b2, eps = 0.05, 0.0, 0.9, 0.999, 1e-8
        p = ParamTensor("w", np.array([[2.0]]), dtype=np.float64)
        opt = AdamW([p], weight_decay=wd, beta1=b1, beta2=b2, eps=eps)

        # independent float64 unroll
        x, m, v = 2.0, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            x -= lr * m_hat / (math.sqrt(v_hat) + eps)

        for g in grads:
            p.zero_grad()
            p.accumulate(np.array([[g]], dtype=np.float64))
            opt.step(lr=lr)
        assert p.value[0, 0] == pytest.approx(x, abs=1e-14)

    def test_nan_gradient_names_parameter(self):
        p = ParamTensor("adapter.conv.w", np.ones((1, 1), dtype=np.float32))
        p.grad[0, 0] = np.nan
        opt = AdamW([p])
        with pytest.raises(TrainingDivergenceError, match="adapter.conv.w"):
            opt.step(lr=0.1)

    def test_frozen_parameter_untouched_including_moments(self):
        p = ParamTensor("w", np.array([[1.0]], dtype=np.float32))
        p.trainable = False
        opt = AdamW([p], weight_decay=0.01)
        # accumulate is gated, but even a manually poked grad must be ignored
        p.grad = np.array([[5.0]], dtype=np.float32)
        opt.step(lr=0.1)
        assert p.value[0, 0] == 1.0
        assert opt._m["w"][0, 0] == 0.0
        assert opt._v["w"][0, 0] == 0.0

    def test_descends_on_quadratic(self):
        p = ParamTensor("w", np.array([[3.0]], dtype=np.float32))
        opt = AdamW([p], weight_decay=0.0)
        for _ in range(200):
            p.zero_grad()
            p.accumulate(2.0 * p.value)  # d/dx of x^2
            opt.step(lr=0.05)
        assert abs(p.value[0, 0]) < 0.05
