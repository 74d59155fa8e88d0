"""Adam optimizer over named parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(params: Mapping[str, Tensor], lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
        m={k: np.zeros_like(p.values) for k, p in params.items()},
        v={k: np.zeros_like(p.values) for k, p in params.items()},
    )


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.

    Pure function: inputs are not mutated; returns the new parameter values
    and a fresh state. Same inputs give bit-identical outputs.
    """
    t = state.t + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_vals: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.values.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} vs param {p.values.shape} for {name}")
        if state.m[name].shape != p.values.shape:
            raise ShapeError(f"adam_step: stale state shape for {name}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        new_vals[name] = p.values - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_vals, AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                               eps=state.eps, t=t, m=new_m, v=new_v)


def apply_update(params: Mapping[str, Tensor], new_vals: Mapping[str, np.ndarray]) -> None:
    for name, p in params.items():
        p.values[...] = new_vals[name]
