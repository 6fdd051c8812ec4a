"""Single-step optimizer updates shared by parallel and local training.

All updates are elementwise, so an ``OptimizerState`` may hold a stack of
per-worker buffers with shape ``(K, d)`` as long as ``theta`` and ``g`` have
the same shape. ``clip_gradient`` normalizes over the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NumericError, ParameterError, ShapeError


@dataclass
class OptimizerState:
    kind: str
    momentum: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: Optional[float] = None
    buf: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ParameterError(f"unknown optimizer kind {self.kind!r}")
        if self.clip is not None and not self.clip > 0:
            raise ParameterError("clip threshold must be > 0 or absent")

    def copy(self) -> "OptimizerState":
        out = OptimizerState(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        for name in ("buf", "m", "v"):
            arr = getattr(self, name)
            if arr is not None:
                setattr(out, name, arr.copy())
        return out

    def hyperparams(self) -> dict:
        keys = ("kind", "momentum", "weight_decay", "beta1", "beta2", "eps", "clip")
        return {k: getattr(self, k) for k in keys}


def make_state(kind="sgd", **hp) -> OptimizerState:
    return OptimizerState(kind=kind, **hp)


def _check(state_buf, theta, g):
    if theta.shape != g.shape:
        raise ShapeError(f"theta {theta.shape} vs gradient {g.shape}")
    if state_buf is not None and state_buf.shape != theta.shape:
        raise ShapeError(f"optimizer buffer {state_buf.shape} vs theta {theta.shape}")
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(g))):
        raise NumericError("non-finite parameters or gradient")


def clip_gradient(g: np.ndarray, threshold: Optional[float]) -> np.ndarray:
    """Rescale ``g`` to norm ``threshold`` if it is longer; identity when absent."""
    if threshold is None:
        return g
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    scale = np.where(norm > threshold, threshold / np.where(norm > 0, norm, 1.0), 1.0)
    return g * scale


def sgd_step(state: OptimizerState, theta: np.ndarray, eta: float, g: np.ndarray) -> np.ndarray:
    """Heavy-ball SGD with L2 weight decay folded into the momentum buffer."""
    _check(state.buf, theta, g)
    if eta < 0:
        raise ParameterError("learning rate must be >= 0")
    g = clip_gradient(g, state.clip)
    if state.buf is None:
        state.buf = np.zeros_like(theta)
    d = g + state.weight_decay * theta if state.weight_decay else g
    state.buf = state.momentum * state.buf + d
    state.step += 1
    return theta - eta * state.buf


def adamw_step(state: OptimizerState, theta: np.ndarray, eta: float, g: np.ndarray) -> np.ndarray:
    """Bias-corrected Adam with decoupled weight decay."""
    _check(state.m, theta, g)
    g = clip_gradient(g, state.clip)
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    update = m_hat / (np.sqrt(v_hat) + state.eps)
    if state.weight_decay:
        update = update + state.weight_decay * theta
    return theta - eta * update


def step(state: OptimizerState, theta, eta, g):
    if state.kind == "sgd":
        return sgd_step(state, theta, eta, g)
    return adamw_step(state, theta, eta, g)
