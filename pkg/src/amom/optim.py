"""Adam with bias correction, gradient clipping, inverse-sqrt LR schedule."""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float) -> None:
    """One in-place Adam update; moment buffers allocate lazily on first use."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params vs {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient in adam_step")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale grads in place so the global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads:
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= g.dtype.type(scale)
    return norm


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_steps: int

    def __post_init__(self):
        if self.base_lr <= 0 or self.warmup_steps < 1:
            raise ValueError(f"bad schedule: base_lr={self.base_lr}, warmup={self.warmup_steps}")


def lr_at_step(sched: LrSchedule, step: int) -> float:
    """Linear warmup to base_lr at `warmup_steps`, then step^-0.5 decay."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return sched.base_lr * min(step**-0.5 * sched.warmup_steps**0.5, step / sched.warmup_steps)
