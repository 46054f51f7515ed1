"""AdamW with a cosine learning-rate schedule."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


def cosine_lr(step: int, total_steps: int, lr: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr - lr_min)·(1 + cos(π·step/total))/2, held at lr_min past the end."""
    if total_steps <= 0:
        return lr
    frac = min(step, total_steps) / total_steps
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay on matrices (names ending in ``.W``).

    ``step`` replaces the arrays in ``params`` with updated ones.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 1e-3,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        total_steps: int = 0,
        lr_min: float = 0.0,
    ):
        self.betas = betas
        self.eps = eps
        self.base_lr = lr
        self.lr_min = lr_min
        self.total_steps = total_steps
        self.state = OptimizerState(
            lr=lr,
            weight_decay=weight_decay,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        st = self.state
        b1, b2 = self.betas
        st.lr = cosine_lr(st.step, self.total_steps, self.base_lr, self.lr_min)
        st.step += 1
        for name, g in grads.items():
            m = st.m[name] = b1 * st.m[name] + (1 - b1) * g
            v = st.v[name] = b2 * st.v[name] + (1 - b2) * g * g
            m_hat = m / (1 - b1**st.step)
            v_hat = v / (1 - b2**st.step)
            p = params[name]
            if st.weight_decay and name.endswith(".W"):
                p = p * (1.0 - st.lr * st.weight_decay)
            params[name] = p - st.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return st.lr


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients together so their global L2 norm is at most max_norm.

    Returns the norm before clipping. ``max_norm <= 0`` disables clipping.
    """
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return total
