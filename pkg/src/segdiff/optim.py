"""AdamW with decoupled weight decay and a warm-up + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class ConfigError(ValueError):
    pass


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over ``warmup_steps``, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > total_steps:
        raise ConfigError(f"warmup_steps ({warmup_steps}) exceeds total_steps ({total_steps})")
    if warmup_steps < 0 or total_steps < 0:
        raise ConfigError("step counts must be non-negative")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    decay_span = total_steps - warmup_steps
    if decay_span == 0:
        return base_lr
    progress = (step - warmup_steps) / decay_span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


class AdamW:
    """AdamW over a fixed, ordered list of parameter tensors."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params: list[Tensor] = list(params)
        self.state = AdamWState(
            learning_rate=lr,
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
            weight_decay=weight_decay,
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        st = self.state
        if lr is not None:
            st.learning_rate = lr
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"AdamW step: parameter {i} with shape {p.shape} has no gradient")
            if p.grad.shape != p.data.shape:
                raise RuntimeError(f"AdamW step: gradient shape {p.grad.shape} != parameter shape {p.shape}")
        st.step_count += 1
        lr = st.learning_rate
        bc1 = 1.0 - st.beta1 ** st.step_count
        bc2 = 1.0 - st.beta2 ** st.step_count
        for p, m, v in zip(self.params, st.first_moment, st.second_moment):
            g = p.grad
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + st.eps)
            if st.weight_decay:
                update = update + st.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype, copy=False)
