"""
Text GAN Toolkit - Metrics

Smoothed corpus BLEU, leave-one-out Self-BLEU, and the LM / RLM scores
(negative log-likelihood per word under a GRU language model of the
generator's architecture).

Sentences are token sequences of any hashable type (ids or strings),
without EOS.
"""

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import (BATCH_SIZE, BLEU_MAX_ORDER, BLEU_SMOOTHING, EMBEDDING_DIM,
                             GEN_HIDDEN, LM_LEARNING_RATE, MAX_LEN, RLM_EPOCHS,
                             RLM_MIN_SAMPLES, SELF_BLEU_SAMPLES)
from .generator import GeneratorParams, nll_per_word, train_mle
from .optim import Adam
from .vocab import EOS_ID, Corpus, SequenceBatch

logger = logging.getLogger("Metrics")

Sentence = Sequence[Hashable]


class InsufficientSamplesError(ValueError):
    """Too few sentences for the requested metric"""


@dataclass
class BleuConfig:
    max_order: int = BLEU_MAX_ORDER
    smoothing: float = BLEU_SMOOTHING
    brevity_penalty: bool = True

    def __post_init__(self):
        if self.max_order < 1:
            raise ValueError("max_order must be >= 1")
        if self.smoothing <= 0:
            raise ValueError("smoothing must be positive")


@dataclass
class NGramTable:
    """n-gram -> count for orders 1..max_order"""
    counts: Dict[int, Counter] = field(default_factory=dict)

    @classmethod
    def from_sentence(cls, sentence: Sentence, max_order: int) -> "NGramTable":
        tokens = tuple(sentence)
        return cls({n: Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))
                    for n in range(1, max_order + 1)})

    def total(self, n: int) -> int:
        return sum(self.counts.get(n, {}).values())


@dataclass
class MetricResult:
    """One run-log metric record"""
    metric: str
    value: float
    temperature: float
    sample_size: int
    seed: int
    step: Optional[int] = None

    def to_dict(self) -> Dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _max_reference_counts(references: Sequence[Sentence], n: int) -> Counter:
    best: Counter = Counter()
    for ref in references:
        for gram, count in NGramTable.from_sentence(ref, n).counts[n].items():
            if count > best[gram]:
                best[gram] = count
    return best


def _clipped(candidates: Sequence[Sentence], best: Counter, n: int) -> Tuple[int, int]:
    """(clipped matches, candidate n-gram count) summed over the candidates"""
    matches = total = 0
    for cand in candidates:
        counts = NGramTable.from_sentence(cand, n).counts[n]
        matches += sum(min(count, best.get(gram, 0)) for gram, count in counts.items())
        total += sum(counts.values())
    return matches, total


def _floor(matches: int, total: int, smoothing: float) -> float:
    """max(precision, eps / Count); an order with no candidate n-grams scores eps"""
    if total == 0:
        return smoothing
    return max(matches / total, smoothing / total)


def smoothed_precision(candidates: Sequence[Sentence], references: Sequence[Sentence],
                       n: int, smoothing: float = BLEU_SMOOTHING) -> float:
    """Clipped n-gram precision, micro-averaged over the candidates, floored at eps/Count"""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not candidates:
        raise ValueError("smoothed_precision needs at least one candidate")
    matches, total = _clipped(candidates, _max_reference_counts(references, n), n)
    return _floor(matches, total, smoothing)


def _closest_length(length: int, ref_lengths: np.ndarray) -> int:
    """Closest reference length, ties to the shorter; ref_lengths sorted"""
    diffs = np.abs(ref_lengths - length)
    return int(ref_lengths[np.flatnonzero(diffs == diffs.min())[0]])


def brevity_penalty(candidate_length: int, reference_length: int) -> float:
    if candidate_length > reference_length:
        return 1.0
    return float(np.exp(1.0 - reference_length / max(candidate_length, 1)))


def bleu(candidates: Sequence[Sentence], references: Sequence[Sentence],
         max_order: Optional[int] = None, config: Optional[BleuConfig] = None) -> float:
    """
    Corpus BLEU: brevity penalty x geometric mean of smoothed precisions 1..k.

    Every candidate is scored against the whole reference set.
    """
    config = BleuConfig() if config is None else config
    k = max_order or config.max_order
    if not candidates:
        raise ValueError("bleu needs at least one candidate")
    if not references:
        raise ValueError("bleu needs at least one reference")
    log_sum = 0.0
    for n in range(1, k + 1):
        matches, total = _clipped(candidates, _max_reference_counts(references, n), n)
        log_sum += np.log(_floor(matches, total, config.smoothing))
    score = float(np.exp(log_sum / k))
    if config.brevity_penalty:
        ref_lengths = np.array(sorted({len(r) for r in references}))
        c = sum(len(cand) for cand in candidates)
        r = sum(_closest_length(len(cand), ref_lengths) for cand in candidates)
        score *= brevity_penalty(c, r)
    return score


class _LeaveOneOut:
    """
    Max reference counts of a sample with one sentence held out.

    Per n-gram keeps the largest count, how many sentences reach it, and the
    runner-up, which is enough to drop any single sentence.
    """

    def __init__(self, tables: List[NGramTable], lengths: List[int], max_order: int):
        self.top: Dict[int, Dict[Tuple, Tuple[int, int, int]]] = {}
        for n in range(1, max_order + 1):
            stats: Dict[Tuple, List[int]] = {}
            for table in tables:
                for gram, count in table.counts[n].items():
                    best = stats.setdefault(gram, [0, 0, 0])
                    if count > best[0]:
                        best[2], best[0], best[1] = best[0], count, 1
                    elif count == best[0]:
                        best[1] += 1
                    elif count > best[2]:
                        best[2] = count
            self.top[n] = {gram: tuple(v) for gram, v in stats.items()}
        self.length_counts = Counter(lengths)

    def max_count(self, n: int, gram: Tuple, own: int) -> int:
        first, holders, second = self.top[n][gram]
        if own == first and holders == 1:
            return second
        return first

    def closest_length(self, own: int) -> int:
        if self.length_counts[own] > 1:
            return own
        others = np.array(sorted(l for l, c in self.length_counts.items() if l != own))
        return _closest_length(own, others) if others.size else own


def self_bleu(corpus: Sequence[Sentence], max_order: Optional[int] = None,
              sample_size: int = SELF_BLEU_SAMPLES, seed: int = 0,
              config: Optional[BleuConfig] = None) -> float:
    """
    Mean sentence BLEU of each sampled sentence against all other sampled sentences.

    Args:
        sample_size: capped at the corpus size; a random subset is drawn with seed
    """
    config = BleuConfig() if config is None else config
    k = max_order or config.max_order
    size = min(sample_size, len(corpus))
    if size < 2:
        raise InsufficientSamplesError(f"self_bleu needs at least 2 sentences, got {size}")
    if size < len(corpus):
        picked = np.random.default_rng(seed).choice(len(corpus), size=size, replace=False)
        sample = [corpus[i] for i in sorted(picked)]
    else:
        sample = list(corpus)
    tables = [NGramTable.from_sentence(s, k) for s in sample]
    loo = _LeaveOneOut(tables, [len(s) for s in sample], k)

    scores = np.empty(size)
    for i, (sent, table) in enumerate(zip(sample, tables)):
        log_sum = 0.0
        for n in range(1, k + 1):
            counts = table.counts[n]
            matches = sum(min(c, loo.max_count(n, g, c)) for g, c in counts.items())
            log_sum += np.log(_floor(matches, sum(counts.values()), config.smoothing))
        score = np.exp(log_sum / k)
        if config.brevity_penalty:
            score *= brevity_penalty(len(sent), loo.closest_length(len(sent)))
        scores[i] = score
    return float(scores.mean())


# ---------------------------------------------------------------------------
# LM / RLM
# ---------------------------------------------------------------------------

@dataclass
class LanguageModelConfig:
    """Hyperparameters of the MLE language models behind lm_score / rlm_score"""
    embedding_dim: int = EMBEDDING_DIM
    hidden_dim: int = GEN_HIDDEN
    epochs: int = RLM_EPOCHS
    batch_size: int = BATCH_SIZE
    learning_rate: float = LM_LEARNING_RATE
    max_len: int = MAX_LEN
    min_samples: int = RLM_MIN_SAMPLES
    seed: int = 0


def samples_to_corpus(samples: SequenceBatch, split: str = "generated") -> Corpus:
    """Generated sequences as a Corpus (trailing EOS removed)"""
    sentences = []
    for seq in samples.sequences():
        sentences.append(seq[:-1] if seq and seq[-1] == EOS_ID else seq)
    return Corpus(sentences, split)


def train_language_model(corpus: Corpus, vocab_size: int, config: LanguageModelConfig,
                         emittable: Optional[np.ndarray] = None) -> GeneratorParams:
    """Fresh GRU language model fitted by MLE"""
    rng = np.random.default_rng(config.seed)
    params = GeneratorParams.init(vocab_size, config.embedding_dim, config.hidden_dim, rng,
                                  emittable=emittable)
    optimizer = Adam(lr=config.learning_rate)
    loss = train_mle(params, corpus, config.max_len, config.batch_size, config.epochs,
                     optimizer, config.seed)
    logger.info(f"Language model trained on {len(corpus)} sentences, last loss {loss:.4f}")
    return params


def lm_score(lm_params: GeneratorParams, samples: SequenceBatch, batch_size: int = 256) -> float:
    """Mean over samples of -log p_LM(x) / token count (EOS counted)"""
    if samples.size == 0:
        raise InsufficientSamplesError("lm_score needs at least one sample")
    scores = []
    for start in range(0, samples.size, batch_size):
        chunk = SequenceBatch(samples.ids[start:start + batch_size],
                              samples.lengths[start:start + batch_size])
        scores.append(nll_per_word(lm_params, chunk))
    return float(np.concatenate(scores).mean())


def corpus_batch(corpus: Corpus, max_len: int) -> SequenceBatch:
    return SequenceBatch.from_sentences(corpus.sentences, max_len)


def rlm_score(generated: Corpus, real_eval: Corpus, vocab_size: int,
              config: Optional[LanguageModelConfig] = None,
              emittable: Optional[np.ndarray] = None) -> float:
    """Train a language model on generated text, score real text with it"""
    config = LanguageModelConfig() if config is None else config
    if len(generated) < config.min_samples:
        raise InsufficientSamplesError(
            f"rlm_score needs at least {config.min_samples} generated sentences, got {len(generated)}")
    if len(real_eval) == 0:
        raise ValueError("rlm_score needs a non-empty evaluation corpus")
    lm = train_language_model(generated, vocab_size, config, emittable)
    return lm_score(lm, corpus_batch(real_eval, config.max_len))
