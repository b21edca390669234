"""Bias-corrected Adam.

Moment buffers live in a plain dict keyed by parameter name so they survive
freezing/unfreezing and can be inspected by tests.  Frozen parameters are
skipped entirely: no moment update, no data change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Parameter, UsageError


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for label, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{label} must lie in [0, 1), got {b}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def adam_step(params, states: dict, cfg: OptimizerConfig, t: int) -> None:
    """Apply one Adam update at step index ``t`` (1-based)."""
    if t <= 0:
        raise UsageError(f"Adam step index must be >= 1, got {t}")
    b1, b2 = cfg.beta1, cfg.beta2
    for p in params:
        if p.frozen or p.tensor.grad is None:
            continue
        g = p.tensor.grad
        st = states.get(p.name)
        if st is None:
            st = states[p.name] = {
                "m": np.zeros_like(p.data),
                "v": np.zeros_like(p.data),
            }
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * (g * g)
        m_hat = st["m"] / (1.0 - b1 ** t)
        v_hat = st["v"] / (1.0 - b2 ** t)
        p.tensor.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


class Adam:
    """Stateful wrapper around :func:`adam_step` for training loops."""

    def __init__(self, params, cfg: OptimizerConfig | None = None):
        self.params = list(params)
        self.cfg = cfg if cfg is not None else OptimizerConfig()
        self.states: dict = {}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.states, self.cfg, self.t)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None
