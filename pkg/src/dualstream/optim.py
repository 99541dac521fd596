"""Class-weighted focal loss, AdamW, cosine learning-rate schedule, gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, StateError
from .tensor import Tensor

PROB_FLOOR = 1e-12


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights N / (K * N_c)."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigError("class counts must be a non-empty vector")
    if np.any(counts < 1):
        raise ConfigError(f"every class needs at least one training sample, got counts {counts.tolist()}")
    return counts.sum() / (counts.size * counts)


def focal_loss(
    logits: Tensor,
    labels: Sequence[int],
    alpha: Sequence[float] | np.ndarray | None = None,
    gamma: float = 2.0,
) -> Tensor:
    """Mean of -alpha_y (1 - p_y)^gamma log p_y over the batch; logits are (B, K)."""
    if gamma < 0:
        raise ConfigError(f"focal gamma must be >= 0, got {gamma}")
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (b,):
        raise DataError(f"{labels.size} labels for a batch of {b}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise DataError(f"labels must lie in [0, {k - 1}], got {labels.tolist()}")
    alpha = np.ones(k) if alpha is None else np.asarray(alpha, dtype=np.float64)
    p_true = T.clamp_min(T.pick(T.softmax(logits, axis=-1), labels), PROB_FLOOR)
    modulating = T.power(T.sub(1.0, p_true), gamma)
    per_sample = T.mul(T.mul(modulating, T.log(p_true)), -alpha[labels])
    return T.mean(per_sample)


@dataclass
class ScheduleConfig:
    eta_max: float = 1e-4
    eta_min: float = 1e-6
    t_max: int = 50

    def __post_init__(self):
        if not self.eta_min < self.eta_max:
            raise ConfigError("eta_min must be below eta_max")
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")


def cosine_lr(t: float, cfg: ScheduleConfig | None = None) -> float:
    cfg = cfg or ScheduleConfig()
    if not 0 <= t <= cfg.t_max:
        raise ConfigError(f"schedule step {t} outside [0, {cfg.t_max}]")
    return cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + math.cos(t * math.pi / cfg.t_max))


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_gradients(params: Sequence[Tensor], max_norm: float = 1.0) -> float:
    """Rescale all gradients jointly so their global l2 norm is at most max_norm.

    Returns the scale factor applied (1.0 when untouched).
    """
    norm = global_grad_norm(params)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * scale
    return scale


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    lr: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Sequence[Tensor], state: OptimState, lr: float | None = None) -> None:
    """One AdamW update with decay decoupled from the gradient moments."""
    if any(p.grad is None for p in params):
        raise StateError("adamw_step called before gradients were populated")
    if lr is not None:
        state.lr = lr
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for i, p in enumerate(params):
        g = p.grad
        m = state.m.get(i)
        v = state.v.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[i], state.v[i] = m, v
        p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
