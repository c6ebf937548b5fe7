"""AdamW, learning-rate schedules, global-norm clipping and early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .layers import Parameter


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamWState:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class AdamW:
    """Adam with weight decay applied directly to the weights.

    One update::

        p <- p - lr * wd * p
        m <- b1 m + (1 - b1) g;   v <- b2 v + (1 - b2) g^2
        p <- p - lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 3e-4, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, names: Sequence[str] | None = None):
        self.params = list(params)
        self.names = list(names) if names is not None else [f"param[{i}]" for i in range(len(self.params))]
        self.state = AdamWState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps,
                                m=[np.zeros_like(p.data) for p in self.params],
                                v=[np.zeros_like(p.data) for p in self.params])

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[np.ndarray | None] | None = None) -> None:
        adamw_step(self.state, self.params, grads if grads is not None else [p.grad for p in self.params],
                   self.names)


def adamw_step(state: AdamWState, params: Sequence[Parameter], grads: Sequence[np.ndarray | None],
               names: Sequence[str] | None = None) -> None:
    """Apply one AdamW update in place; parameters with ``None`` grad get decay only."""
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            name = names[i] if names is not None else f"param[{i}]"
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.weight_decay:
            # subtractive form: the factor (1 - lr*wd) rounds to 1 in float32
            p.data -= p.data * p.data.dtype.type(state.lr * state.weight_decay)
        if g is None:
            continue
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2) + state.eps
        p.data -= ((state.lr / bc1) * m / denom).astype(p.data.dtype, copy=False)


@dataclass
class OneCycleSchedule:
    """Cosine warm-up from ``max_lr/div_initial`` to ``max_lr``, then cosine decay.

    The peak sits at integer step ``round(pct_start * total_steps) - 1`` so the
    maximum is hit exactly; the last step reaches
    ``max_lr / div_initial / div_final``.
    """

    total_steps: int
    max_lr: float = 5e-4
    pct_start: float = 0.3
    div_initial: float = 25.0
    div_final: float = 1e4

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 < self.pct_start <= 1.0:
            raise ValueError("pct_start must lie in (0, 1]")
        if self.max_lr <= 0 or self.div_initial <= 0 or self.div_final <= 0:
            raise ValueError("max_lr and div factors must be positive")

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_initial

    @property
    def final_lr(self) -> float:
        return self.initial_lr / self.div_final

    @property
    def peak_step(self) -> int:
        return min(self.total_steps - 1, max(0, int(round(self.pct_start * self.total_steps)) - 1))

    def lr_at(self, step: int) -> float:
        return onecycle_lr_at(self, step)


def _cos_anneal(start: float, end: float, frac: float) -> float:
    return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * frac))


def onecycle_lr_at(schedule: OneCycleSchedule, step: int) -> float:
    if not 0 <= step < schedule.total_steps:
        raise IndexError(f"step {step} outside [0, {schedule.total_steps})")
    peak = schedule.peak_step
    if step <= peak:
        if peak == 0:
            return schedule.max_lr
        return _cos_anneal(schedule.initial_lr, schedule.max_lr, step / peak)
    last = schedule.total_steps - 1
    return _cos_anneal(schedule.max_lr, schedule.final_lr, (step - peak) / (last - peak))


@dataclass
class ExponentialSchedule:
    """``lr = base_lr * gamma ** epoch`` with ``steps_per_epoch`` steps per epoch."""

    total_steps: int
    steps_per_epoch: int
    base_lr: float = 5e-4
    gamma: float = 0.96

    def lr_at(self, step: int) -> float:
        if not 0 <= step < self.total_steps:
            raise IndexError(f"step {step} outside [0, {self.total_steps})")
        return self.base_lr * self.gamma ** (step // self.steps_per_epoch)


def clip_grad_global_norm(grads: Sequence[np.ndarray | None], max_norm: float = 1.0) -> tuple[list, float]:
    """Scale all gradients by ``max_norm / norm`` when their joint L2 norm exceeds ``max_norm``.

    Returns the (possibly new) gradient list and the norm observed before clipping.
    """
    sq = 0.0
    for g in grads:
        if g is not None:
            sq += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(sq)
    if norm <= max_norm or norm == 0.0:
        return list(grads), norm
    scale = max_norm / norm
    return [None if g is None else g * g.dtype.type(scale) for g in grads], norm


@dataclass
class EarlyStopping:
    """Stop after ``patience`` epochs without a ``min_delta`` improvement in validation loss."""

    patience: int = 10
    min_delta: float = 1e-4
    best: float = math.inf
    bad_epochs: int = 0
    best_epoch: int = -1
    epoch: int = 0

    def update(self, val_loss: float) -> bool:
        return early_stop_update(self, val_loss)


def early_stop_update(state: EarlyStopping, val_loss: float) -> bool:
    """Record one epoch's validation loss; ``True`` means stop."""
    state.epoch += 1
    if val_loss < state.best - state.min_delta:
        state.best = val_loss
        state.best_epoch = state.epoch
        state.bad_epochs = 0
        return False
    state.bad_epochs += 1
    return state.bad_epochs >= state.patience
