"""SGD / AdamW with decoupled weight decay, learning-rate schedules, SWA averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

SCHEDULES = ("constant", "cosine", "cosine_restarts", "multistep", "linear")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "cosine"
    gamma0: float = 0.1
    gamma_min: float = 1e-4
    total_steps: int = 1
    period: int = 0
    milestones: tuple = ()
    factor: float = 0.1

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}")
        if not self.gamma0 >= self.gamma_min > 0:
            raise ValueError("schedule requires gamma0 >= gamma_min > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.kind == "cosine_restarts" and self.period < 1:
            raise ValueError("cosine_restarts needs a positive period")


def _cosine(g0, gmin, t, total):
    return gmin + 0.5 * (g0 - gmin) * (1.0 + math.cos(math.pi * t / total))


def lr_at(schedule: ScheduleSpec, step: int) -> float:
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if s.kind == "constant":
        return s.gamma0
    if s.kind == "cosine":
        return _cosine(s.gamma0, s.gamma_min, step, s.total_steps)
    if s.kind == "cosine_restarts":
        t = step % s.period
        if step == s.total_steps and t == 0:
            t = s.period
        return _cosine(s.gamma0, s.gamma_min, t, s.period)
    if s.kind == "multistep":
        passed = sum(1 for m in s.milestones if step >= m)
        return s.gamma0 * s.factor**passed
    # linear
    return s.gamma0 + (s.gamma_min - s.gamma0) * step / s.total_steps


@dataclass
class OptimState:
    """Per-member optimizer state; buffers follow the network manifest layout.

    ``mask`` selects entries that receive weight decay (batch-norm running
    statistics are excluded). Gradients of running statistics are always
    zero, so their moment buffers stay at zero.
    """

    kind: str
    n_params: int
    weight_decay: float = 1e-4
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    mask: Optional[np.ndarray] = None
    step: int = 0
    buf: Optional[np.ndarray] = None
    exp_avg: Optional[np.ndarray] = None
    exp_avg_sq: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.mask is not None and self.mask.all():
            self.mask = None

    def _decay(self, params, gamma):
        if self.weight_decay == 0 or gamma == 0:
            return
        shrink = gamma * self.weight_decay
        if self.mask is None:
            params -= (shrink * params).astype(params.dtype)
        else:
            params -= (shrink * params * self.mask).astype(params.dtype)


def make_optimizer(kind, params: np.ndarray, mask=None, **kw) -> OptimState:
    return OptimState(kind=kind, n_params=params.size, mask=mask, **kw)


def _check(params, grads, state):
    if grads.shape != params.shape or params.size != state.n_params:
        raise ValueError("parameter / gradient / state sizes differ")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient")


def sgd_step(params: np.ndarray, grads: np.ndarray, state: OptimState, gamma: float) -> np.ndarray:
    """theta <- theta - gamma*wd*theta; v <- m*v + g; theta <- theta - gamma*v (in place)."""
    _check(params, grads, state)
    state._decay(params, gamma)
    if state.momentum:
        if state.buf is None:
            state.buf = np.zeros_like(params)
        state.buf *= state.momentum
        state.buf += grads
        direction = state.buf
    else:
        direction = grads
    if gamma:
        params -= (gamma * direction).astype(params.dtype)
    state.step += 1
    return params


def adamw_step(params: np.ndarray, grads: np.ndarray, state: OptimState, gamma: float) -> np.ndarray:
    _check(params, grads, state)
    b1, b2 = state.betas
    if state.exp_avg is None:
        state.exp_avg = np.zeros_like(params)
        state.exp_avg_sq = np.zeros_like(params)
    state.step += 1
    state._decay(params, gamma)
    state.exp_avg *= b1
    state.exp_avg += (1 - b1) * grads
    state.exp_avg_sq *= b2
    state.exp_avg_sq += (1 - b2) * grads * grads
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    update = (state.exp_avg / c1) / (np.sqrt(state.exp_avg_sq / c2) + state.eps)
    params -= (gamma * update).astype(params.dtype)
    return params


def optimizer_step(params, grads, state: OptimState, gamma: float):
    if state.kind == "sgd":
        return sgd_step(params, grads, state, gamma)
    return adamw_step(params, grads, state, gamma)


@dataclass
class SwaState:
    mean: Optional[np.ndarray] = None
    n: int = 0


def swa_accumulate(swa: SwaState, params: np.ndarray) -> SwaState:
    """Running arithmetic mean of parameter snapshots (float64)."""
    params = np.asarray(params, dtype=np.float64)
    if swa.mean is None:
        return SwaState(params.copy(), 1)
    if swa.mean.shape != params.shape:
        raise ValueError("SWA snapshot length mismatch")
    mean = (swa.n * swa.mean + params) / (swa.n + 1)
    return SwaState(mean, swa.n + 1)
