"""Adam with a stepped learning-rate decay schedule."""

from __future__ import annotations

import numpy as np


class LrSchedule:
    """base * factor^(number of decay epochs already passed)."""

    def __init__(self, base_lr=1e-4, decay_epochs=(26, 34, 40), factor=0.5):
        self.base_lr = float(base_lr)
        self.decay_epochs = tuple(sorted(decay_epochs))
        self.factor = float(factor)

    def at_epoch(self, epoch):
        passed = sum(1 for d in self.decay_epochs if epoch >= d)
        return self.base_lr * self.factor ** passed


class OptimizerState:
    """Per-parameter Adam moment buffers plus the step counter."""

    def __init__(self, params, schedule, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.schedule = schedule
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.lr = schedule.at_epoch(1)

    def set_epoch(self, epoch):
        self.lr = self.schedule.at_epoch(epoch)


def adam_step(state, params, grads):
    """One in-place Adam update with bias correction.

    ``params`` must be the tensors the state was built from; ``grads`` are
    plain arrays aligned with them.
    """
    if len(params) != len(state.params) or len(grads) != len(params):
        raise ValueError("adam_step: params/grads do not match optimizer state")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(
                f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Convenience wrapper: step() reads .grad from the owned parameters."""

    def __init__(self, params, schedule=None, **kw):
        schedule = schedule or LrSchedule()
        self.state = OptimizerState(params, schedule, **kw)

    @property
    def params(self):
        return self.state.params

    def set_epoch(self, epoch):
        self.state.set_epoch(epoch)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        adam_step(self.state, self.params, grads)

    def clip_global_norm(self, max_norm):
        """Scale all grads so their joint L2 norm is at most max_norm."""
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = np.sqrt(total)
        if norm > max_norm > 0:
            scale = max_norm / norm
            for p in self.params:
                if p.grad is not None:
                    p.grad *= scale
        return norm
