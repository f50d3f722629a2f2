"""Inner-loop SGD and outer-loop Adam."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("SGD learning rate must be non-negative")


def sgd_step(params, grads, cfg: SgdConfig | float):
    """``params - lr * grads`` as a new (differentiable) value."""
    lr = cfg.learning_rate if isinstance(cfg, SgdConfig) else float(cfg)
    if ad.shape_of(params) != ad.shape_of(grads):
        raise ad.ShapeError(f"sgd_step: params {ad.shape_of(params)} vs grads {ad.shape_of(grads)}")
    return ad.sub(params, ad.mul(grads, lr))


@dataclass(frozen=True)
class AdamState:
    learning_rate: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int, learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(learning_rate, np.zeros(n), np.zeros(n), 0, **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ad.ShapeError(
            f"adam_step: params {params.shape}, grads {grads.shape}, moments {state.m.shape}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return replace(state, m=m, v=v, step=t), new


def weight_decay_grad(params, coefficient: float) -> np.ndarray:
    """Gradient of ``coefficient * ||params||^2``."""
    if coefficient < 0:
        raise ValueError("weight decay coefficient must be non-negative")
    return 2.0 * coefficient * np.asarray(params, dtype=np.float64)


def global_norm(vec) -> float:
    """Euclidean norm that does not overflow for huge finite entries."""
    vec = np.asarray(vec, dtype=np.float64)
    peak = float(np.max(np.abs(vec))) if vec.size else 0.0
    if peak == 0.0:
        return 0.0
    return peak * float(np.linalg.norm(vec / peak))


def clip_by_global_norm(vec, max_norm: float):
    """``vec`` rescaled to norm ``max_norm`` when longer; ``max_norm <= 0`` disables clipping.

    Returns ``(clipped, norm_before)``.
    """
    norm = global_norm(vec)
    if max_norm <= 0 or norm <= max_norm:
        return np.asarray(vec, dtype=np.float64), norm
    return np.asarray(vec, dtype=np.float64) * (max_norm / norm), norm
