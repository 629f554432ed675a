"""Optimizers and learning-rate schedules."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from ..errors import MissingGradient
from .tensor import Parameter


class ScheduleKind(enum.Enum):
    ONE_CYCLE = "one_cycle"
    COSINE_DECAY = "cosine_decay"


@dataclass(frozen=True)
class LrSchedule:
    """Learning rate as a function of the step index in ``[0, total_steps]``.

    ONE_CYCLE: linear warm-up from ``max_lr / div_factor`` to ``max_lr`` over
    ``warmup_fraction`` of the steps, then cosine annealing to
    ``max_lr / final_div_factor``.
    COSINE_DECAY: cosine from ``max_lr`` down to ``min_lr``.
    """

    kind: ScheduleKind
    max_lr: float
    total_steps: int
    warmup_fraction: float = 0.3
    min_lr: float = 1e-7
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    @classmethod
    def one_cycle(cls, max_lr=0.01, total_steps=100, warmup_fraction=0.3):
        return cls(ScheduleKind.ONE_CYCLE, max_lr, total_steps, warmup_fraction, min_lr=max_lr / 1e4)

    @classmethod
    def cosine_decay(cls, initial_lr=1e-4, total_steps=100, min_lr=1e-7):
        return cls(ScheduleKind.COSINE_DECAY, initial_lr, total_steps, 0.0, min_lr=min_lr)

    def __call__(self, step: int) -> float:
        total = max(int(self.total_steps), 1)
        step = min(max(int(step), 0), total)
        if self.kind is ScheduleKind.COSINE_DECAY:
            return self.min_lr + (self.max_lr - self.min_lr) * 0.5 * (1 + math.cos(math.pi * step / total))
        warmup = int(round(self.warmup_fraction * total))
        start = self.max_lr / self.div_factor
        if step <= warmup and warmup > 0:
            return start + (self.max_lr - start) * step / warmup
        final = self.max_lr / self.final_div_factor
        progress = (step - warmup) / max(total - warmup, 1)
        return final + (self.max_lr - final) * 0.5 * (1 + math.cos(math.pi * progress))


class OptimizerKind(enum.Enum):
    SGD_MOMENTUM = "sgd"
    ADAMW = "adamw"


class Optimizer:
    kind: OptimizerKind

    def __init__(self, params, schedule: LrSchedule, weight_decay: float):
        self.params = list(params)
        self.schedule = schedule
        self.weight_decay = weight_decay
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _grads(self):
        for p in self.params:
            if p.grad is None:
                raise MissingGradient(f"parameter {p.name!r} has no gradient")
        return [p.grad for p in self.params]

    def _decay(self, p: Parameter) -> float:
        return 0.0 if p.weight_decay_exempt else self.weight_decay

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"{name}.{key}": buf for name, bufs in self.state.items() for key, buf in bufs.items()}

    def load_state_dict(self, flat: dict[str, np.ndarray]):
        self.state = {}
        for key, value in flat.items():
            name, _, slot = key.rpartition(".")
            self.state.setdefault(name, {})[slot] = value.copy()


class SGD(Optimizer):
    """Heavy-ball SGD: ``v <- m v + g + wd theta``, ``theta <- theta - lr v``."""

    kind = OptimizerKind.SGD_MOMENTUM

    def __init__(self, params, schedule, momentum=0.9, weight_decay=5e-4):
        super().__init__(params, schedule, weight_decay)
        self.momentum = momentum

    def step(self, step_index: int) -> float:
        lr = self.schedule(step_index)
        for p, g in zip(self.params, self._grads()):
            d = g + self._decay(p) * p.data
            buf = self.state.setdefault(p.name, {}).get("momentum")
            buf = d.copy() if buf is None else self.momentum * buf + d
            self.state[p.name]["momentum"] = buf
            p.data = (p.data - lr * buf).astype(p.dtype)
        return lr


class AdamW(Optimizer):
    """Adam with decoupled weight decay."""

    kind = OptimizerKind.ADAMW

    def __init__(self, params, schedule, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, schedule, weight_decay)
        self.betas = betas
        self.eps = eps

    def step(self, step_index: int) -> float:
        lr = self.schedule(step_index)
        b1, b2 = self.betas
        for p, g in zip(self.params, self._grads()):
            st = self.state.setdefault(p.name, {})
            t = int(st["t"][0]) + 1 if "t" in st else 1
            m = b1 * st.get("exp_avg", np.zeros_like(p.data)) + (1 - b1) * g
            v = b2 * st.get("exp_avg_sq", np.zeros_like(p.data)) + (1 - b2) * g * g
            st.update(exp_avg=m, exp_avg_sq=v, t=np.array([t], dtype=np.float32))
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            data = p.data * (1 - lr * self._decay(p))
            p.data = (data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
        return lr
