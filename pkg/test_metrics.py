"""
BLEU, Self-BLEU and the language-model scores.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from core.generator import GeneratorParams
from core.metrics import (BleuConfig, InsufficientSamplesError, LanguageModelConfig, bleu,
                          brevity_penalty, lm_score, rlm_score, samples_to_corpus, self_bleu,
                          smoothed_precision)
from core.vocab import EOS_ID, Corpus, SequenceBatch

NO_BP = BleuConfig(brevity_penalty=False)

sentences = st.lists(st.lists(st.sampled_from("abcd"), min_size=1, max_size=6), min_size=2, max_size=8)


class TestSmoothedPrecision:

    def test_zero_matches_hit_the_floor(self):
        p = smoothed_precision([list("abcde")], [list("vwxyz")], 2, 0.1)
        assert p == pytest.approx(0.1 / 4)

    def test_identical_corpora(self):
        assert smoothed_precision([list("abc")], [list("abc")], 2) == 1.0

    def test_counts_are_clipped(self):
        assert smoothed_precision([list("aaa")], [list("ab")], 1, 0.1) == pytest.approx(1.0 / 3.0)

    def test_clip_uses_best_single_reference(self):
        p = smoothed_precision([list("aaa")], [list("ab"), list("aab")], 1, 0.1)
        assert p == pytest.approx(2.0 / 3.0)

    def test_requires_candidates(self):
        with pytest.raises(ValueError):
            smoothed_precision([], [list("ab")], 1)


class TestBleu:

    def test_floor_without_brevity_penalty(self):
        assert bleu([list("abcd")], [list("wxyz")], 1, NO_BP) == pytest.approx(0.025)

    def test_no_match_two_orders(self):
        score = bleu([list("abcd")], [list("wxyz")], 2)
        assert score == pytest.approx(np.sqrt((0.1 / 4) * (0.1 / 3)))

    def test_identical(self):
        assert bleu([list("abc")], [list("abc")], 3) == pytest.approx(1.0)

    def test_hand_computed(self):
        # p1 = 2/3, p2 = 1/2, equal lengths
        assert bleu([list("abc")], [list("abd")], 2) == pytest.approx(np.sqrt(1.0 / 3.0))

    def test_brevity_penalty(self):
        assert bleu([list("ab")], [list("abcd")], 2) == pytest.approx(np.exp(1.0 - 4.0 / 2.0))
        assert brevity_penalty(5, 4) == 1.0
        assert brevity_penalty(4, 4) == 1.0

    def test_closest_reference_length(self):
        # references of length 2 and 6; the 3-token candidate is closest to 2, so no penalty
        assert bleu([list("abc")], [list("ab"), list("abcxyz")], 1) == pytest.approx(1.0)

    @given(sentences)
    @settings(max_examples=50, deadline=None)
    def test_bounded(self, corpus):
        score = bleu(corpus[:1], corpus[1:], 3)
        assert 0.0 < score <= 1.0

    def test_empty_inputs(self):
        with pytest.raises(ValueError):
            bleu([], [list("a")])
        with pytest.raises(ValueError):
            bleu([list("a")], [])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BleuConfig(max_order=0)
        with pytest.raises(ValueError):
            BleuConfig(smoothing=0.0)


class TestSelfBleu:

    def test_identical_sentences(self):
        assert self_bleu([list("abc")] * 3, 3) == pytest.approx(1.0)

    def test_disjoint_sentences(self):
        corpus = [list("ab"), list("cd"), list("ef")]
        assert self_bleu(corpus, 2) == pytest.approx(np.sqrt(0.05 * 0.1))

    def test_needs_two_sentences(self):
        with pytest.raises(InsufficientSamplesError):
            self_bleu([list("abc")])

    @given(sentences, st.randoms(use_true_random=False))
    @settings(max_examples=50, deadline=None)
    def test_permutation_invariant(self, corpus, random):
        shuffled = list(corpus)
        random.shuffle(shuffled)
        assert self_bleu(shuffled, 3) == pytest.approx(self_bleu(corpus, 3), abs=1e-12)

    @given(sentences)
    @settings(max_examples=50, deadline=None)
    def test_matches_leave_one_out_bleu(self, corpus):
        brute = np.mean([bleu([s], corpus[:i] + corpus[i + 1:], 3) for i, s in enumerate(corpus)])
        assert self_bleu(corpus, 3) == pytest.approx(brute, abs=1e-12)

    def test_subsample_is_seeded(self):
        rng = np.random.default_rng(0)
        corpus = [list(rng.choice(list("abcdef"), size=4)) for _ in range(40)]
        first = self_bleu(corpus, 2, sample_size=10, seed=3)
        assert self_bleu(corpus, 2, sample_size=10, seed=3) == first


V = 7
TINY_LM = LanguageModelConfig(embedding_dim=4, hidden_dim=5, epochs=1, batch_size=4,
                              learning_rate=1e-2, max_len=5, min_samples=4, seed=0)


class TestLanguageModelScores:

    def test_uniform_model_scores_log_vocab(self):
        params = GeneratorParams.init(V, 4, 5, np.random.default_rng(0))
        params.proj[...] = 0.0
        params.proj_b[...] = 0.0
        samples = SequenceBatch.from_sentences([[3, 4], [5], [6, 6, 3]], 5)
        assert lm_score(params, samples) == pytest.approx(np.log(V - 2))

    def test_lm_needs_samples(self):
        params = GeneratorParams.init(V, 4, 5, np.random.default_rng(0))
        empty = SequenceBatch(np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64))
        with pytest.raises(InsufficientSamplesError):
            lm_score(params, empty)

    def test_samples_to_corpus_strips_eos(self):
        samples = SequenceBatch.from_sentences([[3, 4], []], 4)
        assert samples_to_corpus(samples).sentences == [[3, 4], []]
        assert EOS_ID not in sum(samples_to_corpus(samples).sentences, [])

    def test_rlm_is_deterministic(self):
        generated = Corpus([[3, 4], [4, 5], [5, 6], [6, 3], [3, 3]])
        real = Corpus([[3, 4, 5], [6]])
        first = rlm_score(generated, real, V, TINY_LM)
        assert np.isfinite(first)
        assert rlm_score(generated, real, V, TINY_LM) == first

    def test_rlm_needs_enough_samples(self):
        with pytest.raises(InsufficientSamplesError):
            rlm_score(Corpus([[3], [4]]), Corpus([[3]]), V, TINY_LM)
