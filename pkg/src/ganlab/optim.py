"""Adam optimizer over named model parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .autodiff import Array
from .models import ModelParams


@dataclass
class AdamState:
    """First/second moments per parameter plus hyperparameters."""

    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, Array] = field(default_factory=dict)
    v: Dict[str, Array] = field(default_factory=dict)


def init_adam(params: ModelParams, lr: float = 2e-4, beta1: float = 0.5,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    named = params.named_arrays()
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
        m={k: np.zeros_like(a) for k, a in named.items()},
        v={k: np.zeros_like(a) for k, a in named.items()},
    )


def adam_step(params: ModelParams, grads: Dict[str, Array],
              state: AdamState) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    named = params.named_arrays()
    missing = sorted(set(named) - set(grads))
    if missing:
        raise KeyError(f"adam_step: missing gradients for {missing}")

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_named: Dict[str, Array] = {}
    new_m: Dict[str, Array] = {}
    new_v: Dict[str, Array] = {}
    for name, theta in named.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(
                f"adam_step: gradient shape {g.shape} for {name!r} "
                f"does not match parameter shape {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"adam_step: non-finite gradient for parameter {name!r}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        new_named[name] = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v

    new_state = AdamState(lr=state.lr, beta1=b1, beta2=b2, eps=state.eps,
                          t=t, m=new_m, v=new_v)
    return params.with_arrays(new_named), new_state
