"""Adam with bias correction, over named parameter dicts.

Parameters are replaced, not mutated: each step returns a fresh
``{name: Tensor}`` so tensor data stays immutable after creation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor, parameter


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def init(params: dict[str, Tensor]) -> "AdamState":
        return AdamState(
            step=0,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params: dict[str, Tensor], state: AdamState,
              config: AdamConfig) -> dict[str, Tensor]:
    """One update from the accumulated grads. Mutates state, returns new params."""
    if set(state.m) != set(params):
        raise ContractError("optimizer state does not match parameter names")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = p.grad_or_zeros()
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / bias1
        v_hat = v / bias2
        step = config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        out[name] = parameter(p.data - step.astype(p.data.dtype))
    return out
