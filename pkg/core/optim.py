"""
Text GAN Toolkit - Optimizer

Adam with bias correction and global-norm gradient clipping. Parameters are
updated in place so parameter dataclasses keep their storage.
"""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from config.settings import ADAM_EPS, BETA1, BETA2, CLIP_NORM, LEARNING_RATE


@dataclass
class AdamState:
    """First/second moments shaped like the parameters, plus the step counter"""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float
                        ) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Scale all gradients by min(1, max_norm / norm).

    Returns:
        (clipped gradients, norm before clipping)
    """
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class Adam:
    """
    Adam optimizer over a name -> array mapping.

    Args:
        lr, beta1, beta2, eps: usual Adam constants (defaults from settings)
        clip_norm: global-norm clip applied before the moment update (None disables)
    """

    def __init__(self, lr: float = LEARNING_RATE, beta1: float = BETA1, beta2: float = BETA2,
                 eps: float = ADAM_EPS, clip_norm: float = CLIP_NORM):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = AdamState()
        self.last_norm = 0.0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> float:
        """
        Update params in place.

        Returns:
            global gradient norm before clipping
        """
        missing = set(params) - set(grads)
        if missing:
            raise KeyError(f"no gradient for parameters: {sorted(missing)}")
        grads, norm = clip_by_global_norm({k: grads[k] for k in params}, self.clip_norm)
        self.state.step += 1
        t = self.state.step
        for name, p in params.items():
            g = grads[name]
            m = self.state.m.setdefault(name, np.zeros_like(p))
            v = self.state.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.last_norm = norm
        return norm
