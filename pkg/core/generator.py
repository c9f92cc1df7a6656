"""
Text GAN Toolkit - Generator

Autoregressive GRU policy with a tied output projection:
logits_t = (h_t P + p) W_G^T, so the embedding matrix W_G is read both by
the input lookup and by the output layer.

The same step code serves sampling, teacher forcing, MLE training and the
relaxed (Gumbel-Softmax) rollout; every call builds its ops on a Graph.
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from config.settings import MASKED_LOGIT
from . import autodiff as ad
from .autodiff import Graph, Node
from .vocab import EOS_ID, PAD_ID, SOS_ID, Corpus, SequenceBatch, batch_iter

GRU_WEIGHTS = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")
TENSOR_NAMES = ("embedding",) + GRU_WEIGHTS + ("proj", "proj_b")


class ZeroProbabilityError(ValueError):
    """A sequence holds a token the policy can never emit"""


def logit_mask(emittable: np.ndarray) -> np.ndarray:
    return np.where(emittable, 0.0, MASKED_LOGIT)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, scale: float = 1.0):
    bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


@dataclass
class GeneratorParams:
    """
    theta: embedding (V, d_E), GRU gates, projection (d_h, d_E) and its bias.

    logit_mask is not trained: 0 for emittable tokens, MASKED_LOGIT for PAD/SOS.
    """
    embedding: np.ndarray
    w_z: np.ndarray
    w_r: np.ndarray
    w_h: np.ndarray
    u_z: np.ndarray
    u_r: np.ndarray
    u_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray
    proj: np.ndarray
    proj_b: np.ndarray
    logit_mask: np.ndarray

    @classmethod
    def init(cls, vocab_size: int, embedding_dim: int, hidden_dim: int,
             rng: np.random.Generator, emittable: Optional[np.ndarray] = None,
             embedding: Optional[np.ndarray] = None, scale: float = 1.0) -> "GeneratorParams":
        if emittable is None:
            emittable = np.ones(vocab_size, dtype=bool)
            emittable[[PAD_ID, SOS_ID]] = False
        if embedding is None:
            embedding = rng.normal(0.0, 0.1, size=(vocab_size, embedding_dim))
        d_e, d_h = embedding_dim, hidden_dim
        return cls(
            embedding=np.array(embedding, dtype=np.float64),
            w_z=glorot(rng, d_e, d_h, scale=scale),
            w_r=glorot(rng, d_e, d_h, scale=scale),
            w_h=glorot(rng, d_e, d_h, scale=scale),
            u_z=glorot(rng, d_h, d_h, scale=scale),
            u_r=glorot(rng, d_h, d_h, scale=scale),
            u_h=glorot(rng, d_h, d_h, scale=scale),
            b_z=np.zeros(d_h), b_r=np.zeros(d_h), b_h=np.zeros(d_h),
            proj=glorot(rng, d_h, d_e, scale=scale),
            proj_b=np.zeros(d_e),
            logit_mask=logit_mask(emittable),
        )

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.u_z.shape[0]

    @property
    def emittable(self) -> np.ndarray:
        return self.logit_mask == 0.0

    def tensors(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by name (shared storage, not copies)"""
        return OrderedDict((name, getattr(self, name)) for name in TENSOR_NAMES)

    def nodes(self, graph: Graph, prefix: str = "gen/") -> Dict[str, Node]:
        return {name: graph.param(prefix + name, arr) for name, arr in self.tensors().items()}

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(**{k: np.array(v) for k, v in self.__dict__.items()})


@dataclass
class PolicyRollout:
    """
    Sampled sequences with per-step next-token distributions.

    step_dists covers all T_max steps (rows after EOS are kept, masked downstream);
    step_logprobs and step_entropies are zero past each sequence's length.
    log_dists is the graph node behind step_dists (log space) when the rollout
    was recorded on a caller's graph.
    """
    tokens: SequenceBatch
    step_dists: np.ndarray
    step_logprobs: np.ndarray
    step_entropies: np.ndarray
    temperature: float
    log_dists: Optional[Node] = None

    @property
    def mask(self) -> np.ndarray:
        return self.tokens.mask()

    def sequence_log_probs(self) -> np.ndarray:
        return self.step_logprobs.sum(axis=1)


class _Policy:
    """Per-graph view of the parameters used by the step functions"""

    def __init__(self, graph: Graph, params: GeneratorParams, prefix: str = "gen/"):
        self.graph = graph
        self.w = params.nodes(graph, prefix)
        self.mask = graph.constant(params.logit_mask, name="logit_mask")
        self.hidden_dim = params.hidden_dim
        self.embedding_t = ad.transpose(self.w["embedding"])

    def initial_state(self, n: int) -> Node:
        return self.graph.constant(np.zeros((n, self.hidden_dim)))

    def embed(self, ids: np.ndarray) -> Node:
        return ad.take_rows(self.w["embedding"], ids)

    def step(self, x: Node, h: Node):
        h = ad.gru_cell(x, h, self.w)
        logits = (h @ self.w["proj"] + self.w["proj_b"]) @ self.embedding_t + self.mask
        return h, logits


def _sample(probs: np.ndarray, rng: np.random.Generator, fallback: int) -> np.ndarray:
    """Inverse-CDF draw, one uniform per row"""
    u = rng.random(probs.shape[0])
    # first index whose CDF exceeds u; zero-mass tokens are skipped even at u = 0
    idx = (np.cumsum(probs, axis=1) <= u[:, None]).sum(axis=1)
    return np.minimum(idx, fallback)


def _entropy(log_dists: np.ndarray) -> np.ndarray:
    return -(np.exp(log_dists) * log_dists).sum(axis=-1)


def rollout(params: GeneratorParams, n: int, max_len: int, temperature: float,
            rng: np.random.Generator, graph: Optional[Graph] = None) -> PolicyRollout:
    """
    Sample n sequences; each stops at its first EOS (later tokens are PAD).

    Args:
        temperature: divides the logits before the softmax; step_dists stores
            the tempered distribution actually sampled from
        graph: record the forward on this graph so log_dists carries gradients
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    graph = Graph() if graph is None else graph
    policy = _Policy(graph, params)
    fallback = int(np.flatnonzero(params.emittable).max())

    h = policy.initial_state(n)
    prev = np.full(n, SOS_ID, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    tokens = np.full((n, max_len), PAD_ID, dtype=np.int64)
    lengths = np.full(n, max_len, dtype=np.int64)
    steps = []
    for t in range(max_len):
        h, logits = policy.step(policy.embed(prev), h)
        log_dist = ad.log_softmax_with_temperature(logits, temperature)
        steps.append(log_dist)
        drawn = np.where(done, PAD_ID, _sample(np.exp(log_dist.value), rng, fallback))
        tokens[:, t] = drawn
        ended = ~done & (drawn == EOS_ID)
        lengths[ended] = t + 1
        done |= ended
        prev = drawn

    log_dists = ad.stack(steps, axis=1)
    batch = SequenceBatch(tokens, lengths)
    mask = batch.mask()
    logprobs = np.take_along_axis(log_dists.value, tokens[..., None], axis=-1)[..., 0] * mask
    return PolicyRollout(
        tokens=batch,
        step_dists=np.exp(log_dists.value),
        step_logprobs=logprobs,
        step_entropies=_entropy(log_dists.value) * mask,
        temperature=temperature,
        log_dists=log_dists,
    )


def teacher_forced(graph: Graph, params: GeneratorParams, batch: SequenceBatch,
                   temperature: float = 1.0) -> PolicyRollout:
    """
    Next-token distributions along given sequences (SOS, then x_1..x_{T-1} as inputs).
    EOS does not stop the recurrence, so fixed-length sequences are scored as-is.
    """
    policy = _Policy(graph, params)
    n, max_len = batch.ids.shape
    h = policy.initial_state(n)
    prev = np.full(n, SOS_ID, dtype=np.int64)
    steps = []
    for t in range(max_len):
        h, logits = policy.step(policy.embed(prev), h)
        steps.append(ad.log_softmax_with_temperature(logits, temperature))
        prev = batch.ids[:, t]
    log_dists = ad.stack(steps, axis=1)
    mask = batch.mask()
    logprobs = np.take_along_axis(log_dists.value, batch.ids[..., None], axis=-1)[..., 0] * mask
    return PolicyRollout(batch, np.exp(log_dists.value), logprobs,
                         _entropy(log_dists.value) * mask, temperature, log_dists)


def _check_emittable(params: GeneratorParams, batch: SequenceBatch):
    valid = batch.mask().astype(bool)
    if not np.all(params.emittable[batch.ids[valid]]):
        raise ZeroProbabilityError("sequence contains a token with zero probability (PAD/SOS)")


def sequence_log_prob(graph: Graph, params: GeneratorParams, batch: SequenceBatch,
                      temperature: float = 1.0) -> Node:
    """(N,) node of log pi(x): step log-probs summed up to and including EOS"""
    _check_emittable(params, batch)
    forced = teacher_forced(graph, params, batch, temperature)
    picked = ad.one_hot_gather(forced.log_dists, batch.ids)
    return ad.sum(picked * batch.mask(), axis=1)


def log_prob(params: GeneratorParams, batch: SequenceBatch) -> np.ndarray:
    return sequence_log_prob(Graph(), params, batch).value.copy()


def _corpus_batches(corpus: Corpus, max_len: int, batch_size: int):
    for start in range(0, len(corpus), batch_size):
        yield SequenceBatch.from_sentences(corpus.sentences[start:start + batch_size], max_len)


def perplexity(params: GeneratorParams, corpus: Corpus, max_len: int,
               batch_size: int = 64) -> float:
    """
    exp(-sum log pi / token count), EOS counted as a token.

    PAD and SOS carry zero probability, so a uniform policy spreads its mass
    over the emittable tokens only and scores V - 2, not V.
    """
    if len(corpus) == 0:
        raise ValueError("perplexity needs a non-empty corpus")
    total_logp = 0.0
    total_tokens = 0
    for batch in _corpus_batches(corpus, max_len, batch_size):
        total_logp += float(log_prob(params, batch).sum())
        total_tokens += int(batch.lengths.sum())
    return float(np.exp(-total_logp / total_tokens))


def nll_per_word(params: GeneratorParams, batch: SequenceBatch) -> np.ndarray:
    """Per-sequence negative log-likelihood divided by its token count"""
    return -log_prob(params, batch) / np.maximum(batch.lengths, 1)


def mle_loss(graph: Graph, params: GeneratorParams, batch: SequenceBatch) -> Node:
    """Mean per-token negative log-likelihood"""
    logp = sequence_log_prob(graph, params, batch)
    return ad.sum(logp) * (-1.0 / max(int(batch.lengths.sum()), 1))


def mle_step(params: GeneratorParams, batch: SequenceBatch, optimizer) -> float:
    """One optimizer step on mle_loss; returns the loss before the step"""
    graph = Graph()
    loss = mle_loss(graph, params, batch)
    grads = graph.backward(loss)
    optimizer.step(params.tensors(), strip_prefix(grads.params(), "gen/"))
    return loss.item()


def train_mle(params: GeneratorParams, corpus: Corpus, max_len: int, batch_size: int,
              epochs: int, optimizer, seed: int) -> float:
    """MLE epochs over a corpus; returns the last batch loss"""
    loss = float("nan")
    for batch in batch_iter(corpus, batch_size, max_len, seed, epochs=epochs):
        loss = mle_step(params, batch, optimizer)
    return loss


def generate(params: GeneratorParams, n: int, max_len: int, temperature: float,
             rng: np.random.Generator, batch_size: int = 256) -> SequenceBatch:
    """Sample n sequences in chunks, no gradients kept"""
    chunks = []
    for start in range(0, n, batch_size):
        size = min(batch_size, n - start)
        chunks.extend(rollout(params, size, max_len, temperature, rng).tokens.sequences())
    return SequenceBatch.from_sequences(chunks, max_len)


def relaxed_rollout(graph: Graph, params: GeneratorParams, n: int, max_len: int,
                    tau: float, rng: np.random.Generator) -> Node:
    """
    Gumbel-Softmax relaxation: y_t = softmax((logits_t + g_t) / tau).
    The soft vector's embedding y_t W_G is the next GRU input.

    Returns:
        (N, T, V) node of relaxed one-hot vectors
    """
    if tau <= 0:
        raise ValueError("gumbel temperature must be positive")
    policy = _Policy(graph, params)
    h = policy.initial_state(n)
    x = policy.embed(np.full(n, SOS_ID, dtype=np.int64))
    soft = []
    for t in range(max_len):
        h, logits = policy.step(x, h)
        noise = rng.gumbel(size=logits.value.shape)
        y = ad.softmax_with_temperature(logits + noise, tau)
        soft.append(y)
        x = y @ policy.w["embedding"]
    return ad.stack(soft, axis=1)


def strip_prefix(grads: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in grads.items() if k.startswith(prefix)}
