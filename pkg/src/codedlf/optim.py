"""Adam optimizer with bias correction and an exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """First/second moment accumulators plus hyperparameters.

    ``m`` and ``v`` mirror the parameter dict; ``t`` counts completed steps.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update; returns the new parameter dict.

    Parameters missing a gradient are passed through unchanged. A zero
    gradient (or ``lr == 0``) leaves a parameter exactly unchanged.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p, dtype=np.float64)
            v = np.zeros_like(p, dtype=np.float64)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = (p - step).astype(p.dtype, copy=False)
    return out


def adam_step_array(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """Single-array convenience wrapper around :func:`adam_step`."""
    return adam_step({"p": param}, {"p": grad}, state)["p"]


def exp_decay_lr(lr0: float, epoch: int, rate: float = 0.98) -> float:
    """Exponentially decaying schedule lr0 * rate**epoch."""
    return lr0 * rate**epoch
