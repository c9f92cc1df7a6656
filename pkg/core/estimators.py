"""
Text GAN Toolkit - Generator Gradient Estimators

Every estimator is a surrogate scalar recorded on the rollout's graph; its
autodiff gradient w.r.t. the generator parameters is the estimate. Anything
that must not carry gradient (rewards, advantages, delta_E, the kernel)
enters the graph as a numpy constant.

Surrogates are maximized. They take optional per-sample weights (default
1/N), which lets the oracle form exact expectations as pi(x)-weighted sums.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from config.settings import (BANDWIDTH, BASELINE_DECAY, ENTROPY_WEIGHT, ESTIMATOR,
                             GUMBEL_TAU_END, GUMBEL_TAU_START)
from . import autodiff as ad
from .autodiff import Graph, Node
from .discriminator import DiscriminatorParams, RewardBundle, reward_from_embedding
from .generator import GeneratorParams, PolicyRollout, relaxed_rollout
from .vocab import EOS_ID

logger = logging.getLogger("Estimators")

ESTIMATOR_KINDS = ("taylor", "reinforce", "straight_through", "gumbel_softmax", "mle")


@dataclass
class EstimatorConfig:
    """
    Generator update rule.

    bandwidth is read only by taylor; the gumbel_* schedule only by gumbel_softmax.
    """
    kind: str = ESTIMATOR
    bandwidth: float = BANDWIDTH
    entropy_weight: float = ENTROPY_WEIGHT
    baseline_decay: float = BASELINE_DECAY
    gumbel_tau_start: float = GUMBEL_TAU_START
    gumbel_tau_end: float = GUMBEL_TAU_END

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator '{self.kind}', expected one of {ESTIMATOR_KINDS}")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.entropy_weight < 0:
            raise ValueError("entropy_weight must be non-negative")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("baseline_decay must lie in [0, 1)")
        if self.gumbel_tau_start <= 0 or self.gumbel_tau_end <= 0:
            raise ValueError("gumbel temperatures must be positive")


# ---------------------------------------------------------------------------
# Baseline
# ---------------------------------------------------------------------------

@dataclass
class BaselineState:
    b: float = 0.0
    initialized: bool = False
    decay: float = BASELINE_DECAY


def update_baseline(state: BaselineState, batch_rewards: np.ndarray) -> float:
    """b <- decay*b + (1-decay)*mean(rewards); the first call sets b to the mean"""
    batch_rewards = np.asarray(batch_rewards, dtype=np.float64)
    if batch_rewards.size == 0:
        raise ValueError("update_baseline needs a non-empty batch")
    mean = float(batch_rewards.mean())
    if state.initialized:
        state.b = state.decay * state.b + (1.0 - state.decay) * mean
    else:
        state.b = mean
        state.initialized = True
    return state.b


# ---------------------------------------------------------------------------
# Hamming kernel
# ---------------------------------------------------------------------------

@dataclass
class KernelMatrix:
    """
    log_k[u, v] = log K(u|v); rows of masked tokens are -inf, so every
    column sums to one over the candidate tokens.
    """
    log_k: np.ndarray
    mask: np.ndarray
    bandwidth: float

    @property
    def matrix(self) -> np.ndarray:
        return np.exp(self.log_k)

    def column_sums(self) -> np.ndarray:
        return self.matrix[:, self.mask].sum(axis=0)


def hamming_kernel(embedding: np.ndarray, bandwidth: float,
                   mask: Optional[np.ndarray] = None) -> KernelMatrix:
    """
    Column-normalized Gaussian kernel K(u|v) = C(v) exp(-|e_u - e_v|^2 / 2 bandwidth^2).

    Args:
        embedding: (V, d_E), the discriminator's W_E (read, never differentiated)
        mask: candidate tokens (default: all)
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    embedding = np.asarray(embedding, dtype=np.float64)
    vocab_size = embedding.shape[0]
    mask = np.ones(vocab_size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("kernel mask selects no tokens")
    # pairwise squared distances; clip the rounding negatives
    sq_norms = np.einsum("vd,vd->v", embedding, embedding)
    sq_dist = np.maximum(sq_norms[:, None] + sq_norms[None, :] - 2.0 * embedding @ embedding.T, 0.0)
    np.fill_diagonal(sq_dist, 0.0)
    log_unnorm = -sq_dist / (2.0 * bandwidth ** 2)
    log_unnorm[~mask, :] = -np.inf
    # normalize each column v over the candidate rows u
    log_k = log_unnorm - logsumexp(log_unnorm[mask, :], axis=0)[None, :]
    log_k[:, ~mask] = -np.inf
    return KernelMatrix(log_k, mask, bandwidth)


def _log_proposal(log_pi: np.ndarray, kernel: KernelMatrix) -> np.ndarray:
    """
    log sum_u K(v|u) pi(u) for rows log_pi (M, V) -> (M, V).

    Max-shifted matmul; rows where a candidate underflows are redone with
    an exact logsumexp.
    """
    log_kv = kernel.log_k                                        # [v, u] = log K(v|u)
    # shift both factors so the matmul cannot overflow
    m_pi = log_pi.max(axis=1, keepdims=True)
    m_k = log_kv.max(axis=1)
    m_k = np.where(np.isfinite(m_k), m_k, 0.0)
    with np.errstate(divide="ignore", under="ignore"):
        prod = np.exp(log_pi - m_pi) @ np.exp(log_kv - m_k[:, None]).T
        out = np.log(prod) + m_pi + m_k[None, :]
        # a candidate column hit log(0): recompute that row exactly
        bad = np.flatnonzero((kernel.mask[None, :] & ~np.isfinite(out)).any(axis=1))
        for row in bad:
            out[row] = logsumexp(log_kv + log_pi[row][None, :], axis=1)
    return out


def _log_dists(rollout: PolicyRollout) -> np.ndarray:
    if rollout.log_dists is not None:
        return rollout.log_dists.value
    with np.errstate(divide="ignore"):
        return np.log(rollout.step_dists)


def importance_weights(rollout: PolicyRollout, kernel: KernelMatrix) -> np.ndarray:
    """
    w[n, v, t] = K(v|x_t) pi(v|x<t) / sum_u K(v|u) pi(u|x<t), zero for masked v.

    Returns:
        (N, V, T), not masked by length
    """
    log_pi = _log_dists(rollout)                                 # (N, T, V)
    n, t, v = log_pi.shape
    if kernel.log_k.shape != (v, v):
        raise ad.ShapeError(f"kernel {kernel.log_k.shape} does not match vocabulary {v}")
    tokens = rollout.tokens.ids
    log_denom = _log_proposal(log_pi.reshape(-1, v), kernel).reshape(n, t, v)
    # w = K(v|x_t) pi(v) / q(v), all in log space
    log_k_to = np.moveaxis(kernel.log_k[:, tokens], 0, -1)        # [n, t, v] = log K(v|x_t)
    with np.errstate(invalid="ignore", over="ignore"):
        log_w = log_k_to + log_pi - log_denom
        weights = np.where(kernel.mask[None, None, :], np.exp(log_w), 0.0)
    # masked entries give NaN from -inf - -inf
    weights = np.nan_to_num(weights, nan=0.0, posinf=0.0)
    return np.transpose(weights, (0, 2, 1))


def taylor_advantages(rollout: PolicyRollout, bundle: RewardBundle, kernel: KernelMatrix,
                      baseline: float) -> np.ndarray:
    """A~[n, v, t] = w[n, v, t] (R~[n, v, t] - b), zero past each length; plain numpy (detached)"""
    if bundle.taylor_matrix is None:
        raise ValueError("reward bundle carries no taylor matrix")
    weights = importance_weights(rollout, kernel)
    if weights.shape != bundle.taylor_matrix.shape:
        raise ad.ShapeError(f"advantages: weights {weights.shape} vs taylor matrix "
                            f"{bundle.taylor_matrix.shape}")
    return weights * (bundle.taylor_matrix - baseline) * rollout.mask[:, None, :]


# ---------------------------------------------------------------------------
# Surrogates
# ---------------------------------------------------------------------------

def _sample_weights(n: int, weights: Optional[np.ndarray]) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ad.ShapeError(f"sample weights {weights.shape} for {n} samples")
    return weights


def _graph_dists(rollout: PolicyRollout) -> Node:
    if rollout.log_dists is None:
        raise ValueError("rollout was not recorded on a graph")
    return rollout.log_dists


def taylor_surrogate(rollout: PolicyRollout, advantages: np.ndarray,
                     weights: Optional[np.ndarray] = None) -> Node:
    """sum_n c_n sum_t sum_v A~[n, v, t] log pi(v|x<t)"""
    log_dists = _graph_dists(rollout)
    c = _sample_weights(log_dists.shape[0], weights)
    # advantages are constants; only log pi carries gradient
    coef = np.transpose(advantages, (0, 2, 1)) * c[:, None, None]
    return ad.sum(log_dists * coef)


def reinforce_surrogate(rollout: PolicyRollout, rewards: np.ndarray, baseline: float,
                        weights: Optional[np.ndarray] = None) -> Node:
    """sum_n c_n (R_n - b) log pi(x_n)"""
    log_dists = _graph_dists(rollout)
    c = _sample_weights(log_dists.shape[0], weights)
    coef = ((np.asarray(rewards, dtype=np.float64) - baseline) * c)[:, None] * rollout.mask
    picked = ad.one_hot_gather(log_dists, rollout.tokens.ids)
    return ad.sum(picked * coef)


def straight_through_surrogate(rollout: PolicyRollout, bundle: RewardBundle,
                               embedding: np.ndarray,
                               weights: Optional[np.ndarray] = None) -> Node:
    """sum_n c_n sum_t (sum_v pi(v|x<t) e_v) . dE_t with W_E and dE held constant"""
    log_dists = _graph_dists(rollout)
    graph = log_dists.graph
    c = _sample_weights(log_dists.shape[0], weights)
    expected = ad.exp(log_dists) @ graph.constant(embedding, name="st/embedding")   # (N, T, d)
    # dE is the tapped embedding gradient, detached
    delta = np.transpose(bundle.delta_E, (0, 2, 1)) * (rollout.mask * c[:, None])[..., None]
    return ad.sum(expected * delta)


def step_entropies(rollout: PolicyRollout) -> Node:
    """(N, T) node of next-token entropies, zero past each length"""
    log_dists = _graph_dists(rollout)
    plogp = ad.exp(log_dists) * log_dists
    return -(ad.sum(plogp, axis=2) * rollout.mask)


def entropy_bonus(rollout: PolicyRollout, entropy_weight: float = ENTROPY_WEIGHT,
                  weights: Optional[np.ndarray] = None) -> Node:
    """entropy_weight * sum_n c_n sum_t H(pi(.|x<t))"""
    entropies = step_entropies(rollout)
    c = _sample_weights(entropies.shape[0], weights)
    return ad.sum(entropies * c[:, None]) * entropy_weight


def greedy_entropy_surrogate(rollout: PolicyRollout,
                             weights: Optional[np.ndarray] = None) -> Node:
    """sum_n c_n sum_t r_t log pi(x_t|x<t) with the greedy reward r_t = -log pi(x_t|x<t) held constant"""
    log_dists = _graph_dists(rollout)
    c = _sample_weights(log_dists.shape[0], weights)
    coef = -rollout.step_logprobs * c[:, None] * rollout.mask
    return ad.sum(ad.one_hot_gather(log_dists, rollout.tokens.ids) * coef)


def generator_objective(config: EstimatorConfig, rollout: PolicyRollout, bundle: RewardBundle,
                        baseline: float, embedding: np.ndarray,
                        kernel: Optional[KernelMatrix] = None,
                        weights: Optional[np.ndarray] = None) -> Node:
    """
    Surrogate plus entropy bonus for the score-function style estimators.

    Args:
        embedding: discriminator W_E (kernel and straight-through proxy)
        kernel: reuse a precomputed kernel (taylor only)

    Returns:
        scalar node to maximize
    """
    if config.kind == "taylor":
        if kernel is None:
            kernel = hamming_kernel(embedding, config.bandwidth, rollout_mask(rollout))
        advantages = taylor_advantages(rollout, bundle, kernel, baseline)
        objective = taylor_surrogate(rollout, advantages, weights)
    elif config.kind == "reinforce":
        objective = reinforce_surrogate(rollout, bundle.rewards, baseline, weights)
    elif config.kind == "straight_through":
        objective = straight_through_surrogate(rollout, bundle, embedding, weights)
    else:
        raise ValueError(f"'{config.kind}' has no score-function surrogate")
    # entropy regularizer is shared by all three surrogates
    if config.entropy_weight > 0:
        objective = objective + entropy_bonus(rollout, config.entropy_weight, weights)
    return objective


def rollout_mask(rollout: PolicyRollout) -> np.ndarray:
    """Tokens the policy can emit (finite log-probability at the first step)"""
    return _log_dists(rollout)[0, 0] > -1e8


# ---------------------------------------------------------------------------
# Gumbel-Softmax
# ---------------------------------------------------------------------------

def gumbel_temperature(step: int, total: int, start: float = GUMBEL_TAU_START,
                       end: float = GUMBEL_TAU_END) -> float:
    """Exponential anneal from start (step 0) to end (step total)"""
    if total <= 0:
        return end
    frac = min(max(step / total, 0.0), 1.0)
    return float(start * (end / start) ** frac)


def relaxed_lengths(soft: np.ndarray) -> np.ndarray:
    """Lengths of the argmax sequences: first EOS inclusive, T if none"""
    hard = soft.argmax(axis=-1)
    is_eos = hard == EOS_ID
    first = is_eos.argmax(axis=1) + 1
    return np.where(is_eos.any(axis=1), first, hard.shape[1]).astype(np.int64)


def gumbel_softmax_step(gen: GeneratorParams, disc: DiscriminatorParams, tau: float,
                        rng: np.random.Generator, n: int, max_len: int,
                        graph: Optional[Graph] = None) -> Node:
    """
    -mean R(soft sequence): relaxed one-hots embedded by the discriminator's W_E
    (held constant) and scored with the argmax lengths.
    """
    graph = Graph() if graph is None else graph
    soft = relaxed_rollout(graph, gen, n, max_len, tau, rng)
    w = disc.nodes(graph, trainable=False)
    embedded = soft @ w["embedding"]
    rewards = reward_from_embedding(disc, w, embedded, relaxed_lengths(soft.value))
    return -ad.mean(rewards)
