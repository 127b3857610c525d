"""Adam with bias correction over named parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update; returns new parameter and state objects.

    The inputs are not modified.
    """
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameter(s): {', '.join(missing)}")
    t = state.step + 1
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - BETA1) * g if m is None else BETA1 * m + (1 - BETA1) * g
        v = (1 - BETA2) * g * g if v is None else BETA2 * v + (1 - BETA2) * g * g
        m = m.astype(p.dtype, copy=False)
        v = v.astype(p.dtype, copy=False)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + EPS)
        new_params[name] = (p - update).astype(p.dtype, copy=False)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, step=t)
