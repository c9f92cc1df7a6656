"""
Text GAN Toolkit - Vocabulary and Corpus

Whitespace tokenization, frequency-ranked vocabulary with reserved ids,
padded id batches and textual word-vector loading.

Reserved ids: PAD = 0, SOS = 1, EOS = 2. SOS is an input convention of the
generator and never stored inside a sequence.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import EOS_TOKEN, PAD_TOKEN, SOS_TOKEN, WORD_VECTOR_INIT_STD

logger = logging.getLogger("Vocab")

PAD_ID = 0
SOS_ID = 1
EOS_ID = 2
RESERVED_TOKENS = (PAD_TOKEN, SOS_TOKEN, EOS_TOKEN)


class VocabularyError(ValueError):
    """Empty corpus, bad cap or id out of range"""


class WordVectorFormatError(ValueError):
    """Malformed word-vector line or dimension mismatch"""


def tokenize(line: str) -> List[str]:
    return line.lower().split()


@dataclass
class Vocabulary:
    """Token <-> id maps. Reserved tokens occupy ids 0..2."""
    tokens: List[str]
    token_to_id: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED_TOKENS:
            raise VocabularyError("vocabulary must start with the reserved tokens")
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def size(self) -> int:
        return len(self.tokens)

    def emittable_mask(self) -> np.ndarray:
        """Tokens a generator may produce and the kernel may propose: all but PAD and SOS"""
        mask = np.ones(len(self.tokens), dtype=bool)
        mask[[PAD_ID, SOS_ID]] = False
        return mask

    def encode(self, text: str) -> List[int]:
        """Lowercased in-vocabulary tokens followed by EOS; OOV tokens are dropped"""
        ids = [self.token_to_id[tok] for tok in tokenize(text)
               if tok in self.token_to_id and self.token_to_id[tok] > EOS_ID]
        return ids + [EOS_ID]

    def decode(self, ids: Iterable[int]) -> str:
        """Tokens up to the first EOS, with PAD and SOS stripped"""
        words = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"id {i} out of range for vocabulary of size {len(self.tokens)}")
            if i == EOS_ID:
                break
            if i in (PAD_ID, SOS_ID):
                continue
            words.append(self.tokens[i])
        return " ".join(words)


def build_vocab(lines: Iterable[str], max_size: int) -> Vocabulary:
    """
    Build a vocabulary from raw lines.

    Args:
        lines: whitespace-tokenizable text
        max_size: cap on content (non-reserved) tokens

    Returns:
        Vocabulary ranked by frequency, ties broken lexicographically
    """
    if max_size < 1:
        raise VocabularyError("max_size must allow at least one content token")
    counts = Counter()
    for line in lines:
        counts.update(tokenize(line))
    for tok in RESERVED_TOKENS:
        counts.pop(tok, None)
    if not counts:
        raise VocabularyError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    vocab = Vocabulary(list(RESERVED_TOKENS) + [tok for tok, _ in ranked])
    logger.info(f"Built vocabulary: {len(vocab)} entries ({len(counts)} distinct tokens seen)")
    return vocab


def encode(vocab: Vocabulary, text: str) -> List[int]:
    return vocab.encode(text)


def decode(vocab: Vocabulary, ids: Iterable[int]) -> str:
    return vocab.decode(ids)


@dataclass
class SequenceBatch:
    """Padded ids (N, T_max) and true lengths (EOS position inclusive)"""
    ids: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.ids.ndim != 2 or self.lengths.shape != (self.ids.shape[0],):
            raise ValueError(f"bad batch shapes ids={self.ids.shape} lengths={self.lengths.shape}")
        if np.any(self.lengths > self.ids.shape[1]) or np.any(self.lengths < 0):
            raise ValueError("lengths must lie in [0, T_max]")

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def max_len(self) -> int:
        return self.ids.shape[1]

    def mask(self) -> np.ndarray:
        """(N, T_max) float mask, 1 on valid positions"""
        return (np.arange(self.max_len)[None, :] < self.lengths[:, None]).astype(np.float64)

    def pad_to(self, max_len: int) -> "SequenceBatch":
        if max_len < int(self.lengths.max(initial=0)):
            raise ValueError("cannot pad below the longest sequence")
        ids = np.full((self.size, max_len), PAD_ID, dtype=np.int64)
        width = min(max_len, self.max_len)
        ids[:, :width] = self.ids[:, :width] * self.mask()[:, :width].astype(np.int64)
        return SequenceBatch(ids, self.lengths.copy())

    def sequences(self) -> List[List[int]]:
        return [row[:length].tolist() for row, length in zip(self.ids, self.lengths)]

    @classmethod
    def from_sentences(cls, sentences: Sequence[Sequence[int]], max_len: int) -> "SequenceBatch":
        """Truncate content ids to max_len - 1, then append EOS"""
        ids = np.full((len(sentences), max_len), PAD_ID, dtype=np.int64)
        lengths = np.zeros(len(sentences), dtype=np.int64)
        for n, sent in enumerate(sentences):
            body = [i for i in sent if i != EOS_ID][:max_len - 1]
            row = body + [EOS_ID]
            ids[n, :len(row)] = row
            lengths[n] = len(row)
        return cls(ids, lengths)

    @classmethod
    def from_sequences(cls, sequences: Sequence[Sequence[int]], max_len: int) -> "SequenceBatch":
        """Store sequences as given (already ending with EOS or exactly max_len long)"""
        ids = np.full((len(sequences), max_len), PAD_ID, dtype=np.int64)
        lengths = np.zeros(len(sequences), dtype=np.int64)
        for n, seq in enumerate(sequences):
            if len(seq) > max_len:
                raise ValueError(f"sequence of length {len(seq)} exceeds {max_len}")
            ids[n, :len(seq)] = seq
            lengths[n] = len(seq)
        return cls(ids, lengths)


@dataclass
class Corpus:
    """Encoded sentences (content ids, no EOS) with a split tag"""
    sentences: List[List[int]]
    split: str = "train"

    def __len__(self):
        return len(self.sentences)

    def __post_init__(self):
        for sent in self.sentences:
            if EOS_ID in sent or PAD_ID in sent or SOS_ID in sent:
                raise VocabularyError("corpus sentences hold content ids only")

    def check_ids(self, vocab: Vocabulary):
        for sent in self.sentences:
            if sent and max(sent) >= len(vocab):
                raise VocabularyError("corpus id outside the vocabulary")

    def split_off(self, fraction: float, seed: int) -> Tuple["Corpus", "Corpus"]:
        """Seeded shuffle, then the last `fraction` becomes the validation corpus"""
        order = np.random.default_rng(seed).permutation(len(self.sentences))
        n_valid = int(round(len(order) * fraction))
        n_valid = min(max(n_valid, 1), len(order) - 1) if len(order) > 1 else 0
        train = [self.sentences[i] for i in order[:len(order) - n_valid]]
        valid = [self.sentences[i] for i in order[len(order) - n_valid:]]
        return Corpus(train, "train"), Corpus(valid, "valid")


def read_lines(path: str) -> List[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def encode_corpus(vocab: Vocabulary, lines: Iterable[str], split: str = "train") -> Corpus:
    return Corpus([vocab.encode(line)[:-1] for line in lines], split)


def load_corpus(path: str, vocab: Vocabulary, split: str = "train") -> Corpus:
    corpus = encode_corpus(vocab, read_lines(path), split)
    logger.info(f"Loaded {split} corpus: {len(corpus)} sentences from {path}")
    return corpus


def batch_iter(corpus: Corpus, batch_size: int, max_len: int, seed: int,
               epochs: Optional[int] = 1) -> Iterator[SequenceBatch]:
    """
    Shuffled batches, reshuffled every epoch from one seeded generator.

    Args:
        epochs: number of passes; None streams forever
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not corpus.sentences:
        return
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(corpus.sentences))
        for start in range(0, len(order), batch_size):
            chunk = [corpus.sentences[i] for i in order[start:start + batch_size]]
            yield SequenceBatch.from_sentences(chunk, max_len)
        epoch += 1


def load_word_vectors(path: str, vocab: Vocabulary, dim: int,
                      rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, int]:
    """
    Initialize a |V| x dim matrix from a textual vector file.

    File format: one "token v1 ... v_dim" line per word; a leading
    "count dim" header line (fastText .vec) is skipped.

    Returns:
        (matrix, hit count). Missing and reserved rows are drawn from N(0, 0.01^2).
    """
    rng = rng or np.random.default_rng(0)
    matrix = rng.normal(0.0, WORD_VECTOR_INIT_STD, size=(len(vocab), dim))
    hits = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if line_no == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise WordVectorFormatError(
                    f"{path}:{line_no}: expected {dim} values for '{token}', got {len(values)}")
            try:
                vector = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as e:
                raise WordVectorFormatError(f"{path}:{line_no}: {e}") from e
            idx = vocab.token_to_id.get(token)
            if idx is None or idx <= EOS_ID:
                continue
            matrix[idx] = vector
            hits.add(idx)
    logger.info(f"Word vectors: {len(hits)}/{len(vocab) - len(RESERVED_TOKENS)} tokens found in {path}")
    return matrix, len(hits)
