"""
Text GAN Toolkit - Enumeration Oracle

Exact expectations over every fixed-length sequence of a tiny vocabulary,
and the verification suite built on them. EOS is an ordinary token here,
so each space holds exactly tokens^T sequences.

Checks never raise: a failed identity (or an exception inside a check)
becomes an OracleReport with passed=False.
"""

import itertools
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import (BANDWIDTH, ORACLE_MAX_LEN, ORACLE_MAX_TOKENS,
                             VERIFY_POWER_ITERS)
from . import autodiff as ad
from .autodiff import GradientMap, Graph, numerical_gradient, relative_error
from .discriminator import (DiscriminatorParams, RewardBundle, d_loss_terms, reward,
                            reward_bundle, taylor_remainder)
from .estimators import (EstimatorConfig, KernelMatrix, entropy_bonus, generator_objective,
                         greedy_entropy_surrogate, hamming_kernel, reinforce_surrogate,
                         straight_through_surrogate, taylor_advantages, taylor_surrogate)
from .generator import GeneratorParams, mle_loss, rollout, sequence_log_prob, teacher_forced
from .metrics import BleuConfig, bleu, smoothed_precision
from .spectral import PowerIterState, power_iterate, reference_singular_value
from .vocab import SOS_ID, SequenceBatch

logger = logging.getLogger("Oracle")

FAULTS = ("kernel",)
TINY_DISC_LAYERS = "conv2-6,gmp,dense6"
MASKING_DISC_LAYERS = "conv3-4,conv2-4,pool2,conv2-4,gmp,dense4"
ENUMERABLE = ("taylor", "reinforce", "straight_through")

ABS_TOL = 1e-9
LIMIT_TOL = 1e-5
FD_TOL = 1e-4
SVD_TOL = 1e-3


class SpaceTooLargeError(ValueError):
    """Enumeration space beyond the token / length caps"""


@dataclass
class EnumerationSpace:
    """
    All sequences of length max_len over the emittable tokens of a
    vocabulary whose ids 0 and 1 are PAD and SOS.
    """
    vocab_size: int
    max_len: int

    def __post_init__(self):
        n_tokens = self.vocab_size - (SOS_ID + 1)
        if not 1 <= n_tokens <= ORACLE_MAX_TOKENS or not 1 <= self.max_len <= ORACLE_MAX_LEN:
            raise SpaceTooLargeError(
                f"space of {n_tokens} tokens x length {self.max_len} exceeds "
                f"{ORACLE_MAX_TOKENS} tokens x length {ORACLE_MAX_LEN}")
        self.tokens = np.arange(SOS_ID + 1, self.vocab_size)
        self.sequences = np.array(list(itertools.product(self.tokens, repeat=self.max_len)),
                                  dtype=np.int64)

    @classmethod
    def for_tokens(cls, n_tokens: int, max_len: int) -> "EnumerationSpace":
        return cls(n_tokens + SOS_ID + 1, max_len)

    @property
    def size(self) -> int:
        return self.sequences.shape[0]

    @property
    def batch(self) -> SequenceBatch:
        return SequenceBatch(self.sequences, np.full(self.size, self.max_len))

    def probabilities(self, gen: GeneratorParams) -> np.ndarray:
        return np.exp(sequence_log_prob(Graph(), gen, self.batch).value)


@dataclass
class OracleReport:
    name: str
    max_abs_error: float
    max_rel_error: float
    tolerance: float
    passed: bool
    space_size: int = 0
    runtime: float = 0.0
    informational: bool = False
    note: str = ""


# ---------------------------------------------------------------------------
# Exact quantities
# ---------------------------------------------------------------------------

def exact_objective_gradient(gen: GeneratorParams, space: EnumerationSpace,
                             rewards: np.ndarray) -> GradientMap:
    """Gradient of sum_x pi(x) R(x) w.r.t. the generator parameters"""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != (space.size,):
        raise ad.ShapeError(f"{rewards.shape[0]} rewards for {space.size} sequences")
    graph = Graph()
    logp = sequence_log_prob(graph, gen, space.batch)
    return graph.backward(ad.sum(ad.exp(logp) * rewards))


def make_kernel(embedding: np.ndarray, bandwidth: float, mask: np.ndarray,
                fault: Optional[str] = None) -> KernelMatrix:
    kernel = hamming_kernel(embedding, bandwidth, mask)
    if fault == "kernel":
        kernel.log_k = kernel.log_k + np.log(1.1)
    return kernel


def estimator_expectation(kind: str, gen: GeneratorParams, disc: Optional[DiscriminatorParams],
                          space: EnumerationSpace, baseline: float = 0.0,
                          bandwidth: float = BANDWIDTH, bundle: Optional[RewardBundle] = None,
                          fault: Optional[str] = None) -> GradientMap:
    """
    sum_x pi(x) g(x) for a single-sample estimator g.

    Args:
        bundle: rewards for the whole space (computed from disc when omitted);
            a bundle with a substituted taylor matrix drives the Q check
    """
    if kind not in ENUMERABLE:
        raise ValueError(f"no enumerable expectation for estimator '{kind}'")
    batch = space.batch
    if bundle is None:
        bundle = reward_bundle(disc, batch, with_taylor=(kind == "taylor"))
    embedding = disc.embedding if disc is not None else np.zeros((space.vocab_size, 1))
    graph = Graph()
    forced = teacher_forced(graph, gen, batch)
    # pi(x) as per-sample weights turns the surrogate into the exact expectation
    weights = np.exp(forced.sequence_log_probs())
    kernel = make_kernel(embedding, bandwidth, gen.emittable, fault) if kind == "taylor" else None
    config = EstimatorConfig(kind=kind, bandwidth=bandwidth, entropy_weight=0.0)
    objective = generator_objective(config, forced, bundle, baseline, embedding, kernel, weights)
    return graph.backward(objective)


def q_value_matrix(gen: GeneratorParams, space: EnumerationSpace,
                   rewards: np.ndarray) -> np.ndarray:
    """
    Q[s, v, t] = E[R | x_<t of sequence s, x_t = v], exact by backward recursion.
    Zero for non-emittable v.
    """
    forced = teacher_forced(Graph(), gen, space.batch)
    dists = forced.step_dists
    # values[prefix] = E[R | prefix]; full sequences start at their reward
    seqs = [tuple(row) for row in space.sequences.tolist()]
    values: Dict[Tuple[int, ...], float] = {seq: float(r) for seq, r in zip(seqs, rewards)}
    holder: Dict[Tuple[int, ...], int] = {}
    # any sequence that starts with the prefix holds its next-step distribution
    for s, seq in enumerate(seqs):
        for k in range(space.max_len):
            holder.setdefault(seq[:k], s)
    # longest prefixes first
    for k in range(space.max_len - 1, 0, -1):
        for prefix, s in holder.items():
            if len(prefix) == k:
                values[prefix] = sum(dists[s, k, u] * values[prefix + (u,)] for u in space.tokens)
    q = np.zeros((space.size, space.vocab_size, space.max_len))
    # Q at step t extends the sequence prefix with u
    for s, seq in enumerate(seqs):
        for t in range(space.max_len):
            for u in space.tokens:
                q[s, u, t] = values[seq[:t] + (u,)]
    return q


# ---------------------------------------------------------------------------
# Tiny models
# ---------------------------------------------------------------------------

def tiny_generator(n_tokens: int, rng: np.random.Generator, embedding_dim: int = 4,
                   hidden_dim: int = 6) -> GeneratorParams:
    vocab_size = n_tokens + SOS_ID + 1
    return GeneratorParams.init(vocab_size, embedding_dim, hidden_dim, rng,
                                embedding=rng.normal(0.0, 1.0, size=(vocab_size, embedding_dim)),
                                scale=2.0)


def tiny_discriminator(n_tokens: int, rng: np.random.Generator, activation: str = "elu",
                       layers: str = TINY_DISC_LAYERS, embedding_dim: int = 8,
                       embedding_std: float = 0.5) -> DiscriminatorParams:
    vocab_size = n_tokens + SOS_ID + 1
    embedding = rng.normal(0.0, embedding_std, size=(vocab_size, embedding_dim))
    return DiscriminatorParams.init(vocab_size, embedding_dim, rng, layers=layers,
                                    embedding=embedding, activation=activation, scale=1.5)


def _report(name: str, pairs: Sequence[Tuple[np.ndarray, np.ndarray]], tolerance: float,
            relative: bool = False, space_size: int = 0) -> OracleReport:
    abs_err = max(float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0))
                  for a, b in pairs)
    rel_err = max(relative_error(a, b) for a, b in pairs)
    err = rel_err if relative else abs_err
    return OracleReport(name, abs_err, rel_err, tolerance, bool(err <= tolerance), space_size)


def _per_sample(n: int, surrogate: Callable[[np.ndarray], ad.Node]) -> List[np.ndarray]:
    """Gradient of surrogate(one-hot weights) for every sample"""
    grads = []
    for i in range(n):
        weights = np.zeros(n)
        weights[i] = 1.0
        node = surrogate(weights)
        grads.append(node.graph.backward(node).flat())
    return grads


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def check_policy_normalization(rng, fault):
    gen = tiny_generator(4, rng)
    space = EnumerationSpace.for_tokens(4, 3)
    total = space.probabilities(gen).sum()
    return _report("policy_normalization", [(np.array([total]), np.ones(1))], ABS_TOL,
                   space_size=space.size)


def check_kernel_normalization(rng, fault):
    gen = tiny_generator(4, rng)
    disc = tiny_discriminator(4, rng)
    pairs = []
    for bandwidth in (1e-8, BANDWIDTH, 1e8):
        sums = make_kernel(disc.embedding, bandwidth, gen.emittable, fault).column_sums()
        pairs.append((sums, np.ones_like(sums)))
    return _report("kernel_normalization", pairs, ABS_TOL)


def check_reinforce_unbiasedness(rng, fault):
    gen = tiny_generator(4, rng)
    disc = tiny_discriminator(4, rng)
    space = EnumerationSpace.for_tokens(4, 3)
    exact = exact_objective_gradient(gen, space, reward(disc, space.batch)).flat()
    expected = estimator_expectation("reinforce", gen, disc, space, 0.0).flat()
    return _report("reinforce_unbiasedness", [(expected, exact)], ABS_TOL, space_size=space.size)


def _baseline_invariance(kind: str, rng, fault):
    gen = tiny_generator(4, rng)
    disc = tiny_discriminator(4, rng)
    space = EnumerationSpace.for_tokens(4, 3)
    bundle = reward_bundle(disc, space.batch, with_taylor=(kind == "taylor"))
    grads = [estimator_expectation(kind, gen, disc, space, b, bundle=bundle, fault=fault).flat()
             for b in (0.0, -3.0, 7.0)]
    return _report(f"baseline_invariance_{kind}", [(g, grads[0]) for g in grads[1:]], ABS_TOL,
                   space_size=space.size)


def check_baseline_invariance_reinforce(rng, fault):
    return _baseline_invariance("reinforce", rng, fault)


def check_baseline_invariance_taylor(rng, fault):
    return _baseline_invariance("taylor", rng, fault)


def _limit_setup(rng, fault, bandwidth: float, n: int = 20):
    gen = tiny_generator(4, rng)
    disc = tiny_discriminator(4, rng)
    graph = Graph()
    sampled = rollout(gen, n, 3, 1.0, rng, graph)
    bundle = reward_bundle(disc, sampled.tokens)
    kernel = make_kernel(disc.embedding, bandwidth, gen.emittable, fault)
    return disc, sampled, bundle, kernel


def check_taylor_reinforce_limit(rng, fault):
    _, sampled, bundle, kernel = _limit_setup(rng, fault, 1e-8)
    b = 0.7
    adv = taylor_advantages(sampled, bundle, kernel, b)
    n = sampled.tokens.size
    taylor = _per_sample(n, lambda w: taylor_surrogate(sampled, adv, w))
    reinforce = _per_sample(n, lambda w: reinforce_surrogate(sampled, bundle.rewards, b, w))
    return _report("taylor_reinforce_limit", list(zip(taylor, reinforce)), LIMIT_TOL, relative=True)


def check_taylor_st_limit(rng, fault):
    disc, sampled, bundle, kernel = _limit_setup(rng, fault, 1e8)
    adv = taylor_advantages(sampled, bundle, kernel, 3.0)
    n = sampled.tokens.size
    taylor = _per_sample(n, lambda w: taylor_surrogate(sampled, adv, w))
    st = _per_sample(n, lambda w: straight_through_surrogate(sampled, bundle, disc.embedding, w))
    return _report("taylor_st_limit", list(zip(taylor, st)), LIMIT_TOL, relative=True)


def check_st_baseline_independence(rng, fault):
    _, sampled, bundle, kernel = _limit_setup(rng, fault, 1e8)
    n = sampled.tokens.size
    grads = {}
    for b in (0.0, 7.0):
        adv = taylor_advantages(sampled, bundle, kernel, b)
        grads[b] = _per_sample(n, lambda w, adv=adv: taylor_surrogate(sampled, adv, w))
    return _report("st_baseline_independence", list(zip(grads[7.0], grads[0.0])), LIMIT_TOL,
                   relative=True)


def check_entropy_identity(rng, fault):
    gen = tiny_generator(3, rng)
    space = EnumerationSpace.for_tokens(3, 2)
    graph = Graph()
    forced = teacher_forced(graph, gen, space.batch)
    weights = np.exp(forced.sequence_log_probs())
    dense = entropy_bonus(forced, 1.0, weights)
    greedy = greedy_entropy_surrogate(forced, weights)
    pairs = [(graph.backward(greedy).flat(), graph.backward(dense).flat())]
    return _report("entropy_identity", pairs, ABS_TOL, space_size=space.size)


def check_q_substitution(rng, fault):
    gen = tiny_generator(4, rng)
    disc = tiny_discriminator(4, rng)
    space = EnumerationSpace.for_tokens(4, 3)
    rewards = reward(disc, space.batch)
    # the true Q in place of the first-order matrix makes the Taylor estimator exact
    bundle = RewardBundle(rewards, np.zeros((space.size, disc.embedding_dim, space.max_len)),
                          np.full(space.size, space.max_len),
                          taylor_matrix=q_value_matrix(gen, space, rewards))
    exact = exact_objective_gradient(gen, space, rewards).flat()
    expected = estimator_expectation("taylor", gen, disc, space, 1.5, bundle=bundle,
                                     fault=fault).flat()
    return _report("q_substitution", [(expected, exact)], ABS_TOL, space_size=space.size)


def check_linear_single_step(rng, fault):
    gen = tiny_generator(4, rng)
    disc = tiny_discriminator(4, rng, activation="linear")
    space = EnumerationSpace.for_tokens(4, 1)
    exact = exact_objective_gradient(gen, space, reward(disc, space.batch)).flat()
    expected = estimator_expectation("taylor", gen, disc, space, 0.3, fault=fault).flat()
    return _report("linear_single_step_exactness", [(expected, exact)], ABS_TOL,
                   space_size=space.size)


def check_taylor_matrix_linear(rng, fault):
    disc = tiny_discriminator(4, rng, activation="linear")
    space = EnumerationSpace.for_tokens(4, 3)
    batch = space.batch
    matrix = reward_bundle(disc, batch).taylor_matrix
    pairs = []
    for t in range(space.max_len):
        for v in space.tokens:
            ids = batch.ids.copy()
            ids[:, t] = v
            pairs.append((matrix[:, v, t], reward(disc, SequenceBatch(ids, batch.lengths))))
    return _report("taylor_matrix_linear", pairs, ABS_TOL, space_size=space.size)


def _smooth_discriminator(rng) -> DiscriminatorParams:
    """ELU network with negative biases, so the first layer stays in the exponential branch"""
    disc = tiny_discriminator(4, rng, embedding_std=0.3)
    for name, w in disc.weights.items():
        if name.endswith("/bias"):
            w[...] = rng.uniform(-2.0, -1.0, size=w.shape)
    return disc


def check_taylor_remainder(rng, fault):
    disc = _smooth_discriminator(rng)
    space = EnumerationSpace.for_tokens(4, 3)
    rows = rng.choice(space.size, size=32, replace=False)
    batch = SequenceBatch(space.sequences[rows], np.full(32, space.max_len))
    # one substitution per row at a random step
    target_ids = batch.ids.copy()
    for n in range(batch.size):
        t = rng.integers(space.max_len)
        choices = [v for v in space.tokens if v != target_ids[n, t]]
        target_ids[n, t] = rng.choice(choices)
    remainders = taylor_remainder(disc, batch, SequenceBatch(target_ids, batch.lengths))
    keep = np.abs(remainders[1]) > 1e-12
    # halving the step should shrink a second-order remainder about fourfold
    ratio = float(np.median(remainders[0][keep] / remainders[1][keep])) if keep.any() else 0.0
    report = _report("taylor_remainder_ratio", [(np.array([ratio]), np.array([4.0]))], 1.0)
    report.note = f"median ratio {ratio:.3f}"
    return report


def check_masking_invariance(rng, fault):
    disc = tiny_discriminator(4, rng, layers=MASKING_DISC_LAYERS)
    space = EnumerationSpace.for_tokens(4, 4)
    lengths = rng.integers(1, 7, size=12)
    ids = rng.choice(space.tokens, size=(12, 6))
    short = SequenceBatch(ids, lengths).pad_to(6)
    long = short.pad_to(13)
    # same rows under two paddings; nothing past a length may leak
    a = reward_bundle(disc, short)
    b = reward_bundle(disc, long)
    pairs = [(a.rewards, b.rewards), (a.delta_E, b.delta_E[:, :, :6]),
             (a.taylor_matrix, b.taylor_matrix[:, :, :6]),
             (np.zeros(1), np.abs(b.taylor_matrix[:, :, 6:]).max(initial=0.0)[None])]
    return _report("masking_invariance", pairs, ABS_TOL)


def check_spectral_norm(rng, fault):
    pairs = []
    for _ in range(20):
        rows, cols = rng.integers(2, 65, size=2)
        w = rng.standard_normal((rows, cols))
        state = PowerIterState.init(rows, cols, rng)
        sigma = power_iterate(w, state, VERIFY_POWER_ITERS)
        pairs.append((np.array([sigma]), np.array([reference_singular_value(w)])))
    return _report("spectral_norm_svd", pairs, SVD_TOL, relative=True)


def _fd_pairs(params: Dict[str, np.ndarray], names: Sequence[str],
              loss_fn: Callable[[], float], grads: Dict[str, np.ndarray]):
    pairs = []
    for name in names:
        target = params[name]

        def at(x, target=target):
            saved = target.copy()
            target[...] = x
            try:
                return loss_fn()
            finally:
                target[...] = saved

        pairs.append((grads[name], numerical_gradient(at, target.copy())))
    return pairs


def check_fd_discriminator(rng, fault):
    disc = tiny_discriminator(4, rng, layers=MASKING_DISC_LAYERS)
    real = SequenceBatch(rng.choice(np.arange(2, 6), size=(4, 5)), rng.integers(1, 6, size=4)).pad_to(5)
    fake = SequenceBatch(rng.choice(np.arange(2, 6), size=(4, 5)), rng.integers(1, 6, size=4)).pad_to(5)
    for name, w in disc.weights.items():
        if name.endswith("/kernel"):
            power_iterate(w.reshape(w.shape[0], -1), disc.power[name], VERIFY_POWER_ITERS)

    def loss():
        return d_loss_terms(Graph(), disc, real, fake, VERIFY_POWER_ITERS, update=False).total.item()

    graph = Graph()
    total = d_loss_terms(graph, disc, real, fake, VERIFY_POWER_ITERS, update=False).total
    grads = {k[len("disc/"):]: g for k, g in graph.backward(total).params().items()}
    names = ("embedding", "conv0/kernel", "conv2/bias", "dense0/kernel", "out/kernel")
    return _report("finite_difference_discriminator",
                   _fd_pairs(disc.tensors(), names, loss, grads), FD_TOL, relative=True)


def check_fd_generator(rng, fault):
    gen = tiny_generator(4, rng)
    batch = SequenceBatch.from_sentences([[3, 4, 5], [5], [2, 3], [4, 4, 4, 4]], 5)

    def loss():
        return mle_loss(Graph(), gen, batch).item()

    graph = Graph()
    grads = {k[len("gen/"):]: g for k, g in graph.backward(mle_loss(graph, gen, batch)).params().items()}
    names = ("embedding", "w_h", "u_z", "b_r", "proj", "proj_b")
    return _report("finite_difference_generator",
                   _fd_pairs(gen.tensors(), names, loss, grads), FD_TOL, relative=True)


def check_bleu_smoothing(rng, fault):
    no_bp = BleuConfig(brevity_penalty=False)
    got = np.array([
        smoothed_precision([["a", "b", "c", "d", "e"]], [["v", "w", "x", "y", "z"]], 2, 0.1),
        smoothed_precision([["a", "b", "c"]], [["a", "b", "c"]], 2, 0.1),
        smoothed_precision([["a", "a", "a"]], [["a", "b"]], 1, 0.1),
        bleu([["a", "b", "c", "d"]], [["w", "x", "y", "z"]], 1, no_bp),
        bleu([["a", "b", "c"]], [["a", "b", "c"]], 3),
    ])
    want = np.array([0.025, 1.0, 1.0 / 3.0, 0.025, 1.0])
    return _report("bleu_smoothing", [(got, want)], 1e-12)


def check_taylor_bias_monitor(rng, fault):
    gen = tiny_generator(4, rng)
    disc = tiny_discriminator(4, rng)
    space = EnumerationSpace.for_tokens(4, 3)
    exact = exact_objective_gradient(gen, space, reward(disc, space.batch)).flat()
    expected = estimator_expectation("taylor", gen, disc, space, 0.0, BANDWIDTH).flat()
    report = _report("taylor_bias_monitor", [(expected, exact)], float("inf"), relative=True,
                     space_size=space.size)
    report.informational = True
    report.note = f"relative bias at bandwidth {BANDWIDTH}"
    return report


CHECKS: List[Callable] = [
    check_policy_normalization,
    check_kernel_normalization,
    check_reinforce_unbiasedness,
    check_baseline_invariance_reinforce,
    check_baseline_invariance_taylor,
    check_taylor_reinforce_limit,
    check_taylor_st_limit,
    check_st_baseline_independence,
    check_entropy_identity,
    check_q_substitution,
    check_linear_single_step,
    check_taylor_matrix_linear,
    check_taylor_remainder,
    check_masking_invariance,
    check_spectral_norm,
    check_fd_discriminator,
    check_fd_generator,
    check_bleu_smoothing,
    check_taylor_bias_monitor,
]


def run_suite(seed: int = 0, fault: Optional[str] = None) -> List[OracleReport]:
    """
    Run every check with its own seeded generator.

    Args:
        fault: test hook that corrupts one component ("kernel")
    """
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault '{fault}', expected one of {FAULTS}")
    reports = []
    for index, check in enumerate(CHECKS):
        name = check.__name__[len("check_"):]
        rng = np.random.default_rng([seed, index])
        start = time.perf_counter()
        try:
            report = check(rng, fault)
        except Exception as e:  # reported, never raised
            logger.exception(f"check {name} raised")
            report = OracleReport(name, float("nan"), float("nan"), 0.0, False, note=repr(e))
        report.runtime = time.perf_counter() - start
        logger.info(f"{report.name}: {'PASS' if report.passed else 'FAIL'} "
                    f"(abs {report.max_abs_error:.2e}, rel {report.max_rel_error:.2e})")
        reports.append(report)
    return reports


def all_passed(reports: Sequence[OracleReport]) -> bool:
    return all(r.passed for r in reports if not r.informational)


def format_report(reports: Sequence[OracleReport]) -> str:
    """Fixed-width table: check, max abs error, max rel error, tolerance, status"""
    header = f"{'check':<32} {'max_abs':>10} {'max_rel':>10} {'tol':>9} {'space':>6} {'sec':>6}  status"
    lines = [header, "-" * len(header)]
    for r in reports:
        status = "INFO" if r.informational else ("PASS" if r.passed else "FAIL")
        lines.append(f"{r.name:<32} {r.max_abs_error:>10.2e} {r.max_rel_error:>10.2e} "
                     f"{r.tolerance:>9.1e} {r.space_size:>6d} {r.runtime:>6.2f}  {status}"
                     + (f"  {r.note}" if r.note else ""))
    return "\n".join(lines)
