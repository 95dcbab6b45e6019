"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import NonFiniteError


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamWState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adamw_step(param, grad, state: AdamWState, lr, beta1=0.9, beta2=0.999,
               eps=1e-8, weight_decay=0.0):
    """One AdamW update; returns ``(new_param, new_state)``.

    ``p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps)``
    """
    param = np.asarray(param)
    grad = np.asarray(grad, dtype=param.dtype)
    if param.shape != grad.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise ValueError(
            f"adamw_step: shape mismatch param {param.shape}, grad {grad.shape}, "
            f"m {state.m.shape}, v {state.v.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("adamw_step: non-finite gradient")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * (grad * grad)
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    new = param - lr * weight_decay * param - lr * m_hat / (np.sqrt(v_hat) + eps)
    dt = param.dtype
    return new.astype(dt, copy=False), AdamWState(m.astype(dt, copy=False), v.astype(dt, copy=False), t)


@dataclass
class AdamW:
    """AdamW over a dict of named numpy parameters.

    ``lr_scale`` and ``decay`` map parameter names to a per-group learning
    rate multiplier and a weight-decay switch.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    lr_scale: dict[str, float] = field(default_factory=dict)
    decay: dict[str, bool] = field(default_factory=dict)
    state: dict[str, AdamWState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name in sorted(params):
            if name not in grads:
                continue
            st = self.state.get(name)
            if st is None:
                st = AdamWState.zeros_like(params[name])
            wd = self.weight_decay if self.decay.get(name, True) else 0.0
            try:
                params[name], self.state[name] = adamw_step(
                    params[name], grads[name], st, lr * self.lr_scale.get(name, 1.0),
                    self.beta1, self.beta2, self.eps, wd,
                )
            except NonFiniteError as e:
                raise NonFiniteError(f"{e} for parameter {name!r}") from None
