"""
Text GAN Toolkit - Spectral Norm

Power iteration with persistent singular-vector estimates, exposed as a
differentiable node: d sigma / d W = u v^T at the current estimates.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, ShapeError, Tensor

_EPS = 1e-12


def _unit(x: Tensor) -> Tensor:
    norm = np.linalg.norm(x)
    return x / norm if norm > _EPS else x


@dataclass
class PowerIterState:
    """Left/right singular vector estimates of one weight matrix (unit norm)"""
    u: Tensor
    v: Tensor

    @classmethod
    def init(cls, rows: int, cols: int, rng: np.random.Generator) -> "PowerIterState":
        return cls(u=_unit(rng.standard_normal(rows)), v=_unit(rng.standard_normal(cols)))

    def copy(self) -> "PowerIterState":
        return PowerIterState(self.u.copy(), self.v.copy())


def power_iterate(w: Tensor, state: PowerIterState, iters: int) -> float:
    """
    Run `iters` power iterations in place on state.

    Returns:
        sigma = u^T W v at the updated vectors (0 for a zero matrix)
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    for _ in range(iters):
        v = w.T @ state.u
        if np.linalg.norm(v) <= _EPS:
            return 0.0
        state.v = v / np.linalg.norm(v)
        u = w @ state.v
        if np.linalg.norm(u) <= _EPS:
            return 0.0
        state.u = u / np.linalg.norm(u)
    return float(state.u @ w @ state.v)


def spectral_norm(w: Node, state: PowerIterState, iters: int = 1,
                  update: bool = True) -> Node:
    """
    Largest singular value of a rank-2 weight node.

    Args:
        w: (rows, cols) node; reshape higher-rank kernels first
        state: persistent vectors, updated in place when update is True
        iters: power iterations this call

    Returns:
        scalar node; its adjoint w.r.t. w is u v^T (zero for a zero matrix)
    """
    if w.value.ndim != 2:
        raise ShapeError(f"spectral_norm needs a rank-2 weight, got {w.value.shape}")
    work = state if update else state.copy()
    sigma = power_iterate(w.value, work, iters)
    u = work.u.copy()
    v = work.v.copy()
    zero = sigma == 0.0

    def fwd(a):
        return np.asarray(0.0) if zero else u @ a @ v

    def bwd(g, a, out):
        if zero:
            return (np.zeros_like(a),)
        return (g * np.outer(u, v),)

    return w.graph.record("spectral_norm", (w,), fwd, bwd)


def reference_singular_value(w: Tensor) -> float:
    """Largest singular value from a dense eigensolve of W^T W"""
    w = np.asarray(w, dtype=np.float64)
    gram = w.T @ w if w.shape[0] >= w.shape[1] else w @ w.T
    return float(np.sqrt(max(np.linalg.eigvalsh(gram)[-1], 0.0)))


def matrix_view(kernel: Tensor) -> Tensor:
    """(out, in, k) kernels as (out, in*k); rank-2 weights unchanged"""
    kernel = np.asarray(kernel)
    if kernel.ndim == 2:
        return kernel
    return kernel.reshape(kernel.shape[0], -1)
