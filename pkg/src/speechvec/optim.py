"""AdamW with decoupled weight decay and the linear warmup/decay schedule."""

import math

import numpy as np

from .errors import ConfigError, ScheduleExhaustedError, TrainingDivergenceError


def lr_schedule(step, total_steps, base_lr, warmup_fraction=0.10):
    """Linear 0 -> base_lr over the warmup leg, then linear base_lr -> 0.

    The peak sits at step ceil(warmup_fraction * total_steps); the schedule
    reaches exactly 0 at ``total_steps``.
    """
    if total_steps < 10:
        raise ConfigError(f"lr_schedule: total_steps must be >= 10, got {total_steps}")
    if not (0.0 < warmup_fraction < 1.0):
        raise ConfigError(f"lr_schedule: warmup_fraction must be in (0,1), got {warmup_fraction}")
    if step > total_steps:
        raise ScheduleExhaustedError(f"lr_schedule: step {step} > total {total_steps}")
    warmup = math.ceil(warmup_fraction * total_steps)
    if warmup >= total_steps:
        raise ConfigError("lr_schedule: warmup covers the whole run")
    if step <= warmup:
        return base_lr * step / warmup
    return base_lr * (total_steps - step) / (total_steps - warmup)


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list.

    Decay multiplies the value by (1 - lr * weight_decay) independently of the
    gradient term, so a zero-gradient step shrinks a parameter by exactly that
    factor. Frozen parameters are skipped entirely: their values and moment
    estimates never change.
    """

    def __init__(self, params, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.value) for p in self.params}
        self._v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self, lr):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise TrainingDivergenceError(f"non-finite gradient in {p.name}")
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay != 0.0:
                p.value *= 1.0 - lr * self.weight_decay
            m_hat = m / bc1
            v_hat = v / bc2
            p.value -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
