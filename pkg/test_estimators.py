"""
Generator gradient estimators: kernel, importance weights, baseline,
surrogates and the Gumbel-Softmax relaxation.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from core.autodiff import Graph, relative_error
from core.discriminator import DiscriminatorParams, reward, reward_bundle
from core.estimators import (BaselineState, EstimatorConfig, entropy_bonus, generator_objective,
                             gumbel_softmax_step, gumbel_temperature, hamming_kernel,
                             importance_weights, reinforce_surrogate, relaxed_lengths,
                             rollout_mask, step_entropies, taylor_advantages, taylor_surrogate,
                             update_baseline)
from core.generator import GeneratorParams, rollout, strip_prefix, teacher_forced
from core.vocab import EOS_ID, SequenceBatch

V = 7
EMITTABLE = np.arange(2, V)


def _gen(seed=0, scale=2.0):
    rng = np.random.default_rng(seed)
    return GeneratorParams.init(V, 4, 5, rng, embedding=rng.normal(size=(V, 4)), scale=scale)


def _disc(seed=0):
    rng = np.random.default_rng(seed)
    return DiscriminatorParams.init(V, 6, rng, layers="conv2-6,gmp,dense6",
                                    embedding=rng.normal(0.0, 0.5, size=(V, 6)), scale=1.5)


class TestHammingKernel:

    @given(seed=st.integers(0, 2 ** 16), log_bandwidth=st.floats(-8.0, 8.0))
    @settings(max_examples=60, deadline=None)
    def test_columns_sum_to_one(self, seed, log_bandwidth):
        rng = np.random.default_rng(seed)
        mask = np.ones(V, dtype=bool)
        mask[:2] = False
        kernel = hamming_kernel(rng.normal(size=(V, 3)), 10.0 ** log_bandwidth, mask)
        np.testing.assert_allclose(kernel.column_sums(), 1.0, atol=1e-9)
        assert np.all(kernel.matrix[~mask, :] == 0.0)
        assert np.all(kernel.matrix[:, ~mask] == 0.0)

    def test_narrow_bandwidth_is_identity(self):
        kernel = hamming_kernel(np.random.default_rng(1).normal(size=(V, 3)), 1e-8)
        np.testing.assert_allclose(kernel.matrix, np.eye(V), atol=1e-12)

    def test_wide_bandwidth_is_uniform(self):
        mask = np.isin(np.arange(V), EMITTABLE)
        kernel = hamming_kernel(np.random.default_rng(2).normal(size=(V, 3)), 1e8, mask)
        np.testing.assert_allclose(kernel.matrix[np.ix_(mask, mask)], 1.0 / len(EMITTABLE), atol=1e-12)

    def test_nearer_tokens_weigh_more(self):
        embedding = np.array([[0.0], [5.0], [10.0]])
        k = hamming_kernel(embedding, 1.0).matrix
        assert k[1, 0] > k[2, 0]

    @pytest.mark.parametrize("bandwidth", [0.0, -1.0])
    def test_rejects_non_positive_bandwidth(self, bandwidth):
        with pytest.raises(ValueError):
            hamming_kernel(np.ones((3, 2)), bandwidth)


class TestImportanceWeights:

    def test_expected_weights_recover_policy(self):
        gen = _gen(seed=3)
        batch = SequenceBatch(EMITTABLE[:, None], np.ones(len(EMITTABLE)))
        forced = teacher_forced(Graph(), gen, batch)
        kernel = hamming_kernel(np.random.default_rng(3).normal(size=(V, 3)), 1.0, gen.emittable)
        weights = importance_weights(forced, kernel)[:, :, 0]           # (N, V)
        probs = np.exp(forced.step_logprobs[:, 0])
        np.testing.assert_allclose(probs @ weights, forced.step_dists[0, 0], atol=1e-12)

    def test_masked_tokens_get_zero_weight(self):
        gen = _gen(seed=4)
        out = rollout(gen, 6, 4, 1.0, np.random.default_rng(4), Graph())
        kernel = hamming_kernel(gen.embedding, 0.5, rollout_mask(out))
        weights = importance_weights(out, kernel)
        assert np.all(weights[:, :2, :] == 0.0)
        assert np.all(np.isfinite(weights))

    def test_advantages_are_masked_by_length(self):
        gen, disc = _gen(seed=5), _disc(seed=5)
        out = rollout(gen, 12, 5, 1.0, np.random.default_rng(5), Graph())
        bundle = reward_bundle(disc, out.tokens)
        advantages = taylor_advantages(out, bundle, hamming_kernel(disc.embedding, 0.5, gen.emittable), 0.3)
        assert isinstance(advantages, np.ndarray)
        for n, length in enumerate(out.tokens.lengths):
            assert np.all(advantages[n, :, length:] == 0.0)

    def test_requires_taylor_matrix(self):
        gen, disc = _gen(), _disc()
        out = rollout(gen, 2, 3, 1.0, np.random.default_rng(0), Graph())
        bundle = reward_bundle(disc, out.tokens, with_taylor=False)
        with pytest.raises(ValueError):
            taylor_advantages(out, bundle, hamming_kernel(disc.embedding, 0.5), 0.0)


class TestBaseline:

    def test_first_batch_sets_the_mean(self):
        state = BaselineState(decay=0.9)
        assert update_baseline(state, [1.0, 3.0]) == pytest.approx(2.0)
        assert state.initialized

    def test_moving_average(self):
        state = BaselineState(decay=0.9)
        update_baseline(state, [2.0])
        assert update_baseline(state, [3.0]) == pytest.approx(2.1)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            update_baseline(BaselineState(), [])


class TestSurrogates:

    def test_gradients_reach_only_the_generator(self):
        gen, disc = _gen(seed=6), _disc(seed=6)
        graph = Graph()
        out = rollout(gen, 5, 4, 1.0, np.random.default_rng(6), graph)
        bundle = reward_bundle(disc, out.tokens)
        for kind in ("taylor", "reinforce", "straight_through"):
            objective = generator_objective(EstimatorConfig(kind=kind), out, bundle, 0.1, disc.embedding)
            grads = graph.backward(objective).params()
            assert grads
            assert all(name.startswith("gen/") for name in grads)
            assert np.all(np.isfinite(np.concatenate([g.ravel() for g in grads.values()])))

    def test_narrow_kernel_reduces_to_reinforce(self):
        gen, disc = _gen(seed=7), _disc(seed=7)
        graph = Graph()
        out = rollout(gen, 8, 4, 1.0, np.random.default_rng(7), graph)
        bundle = reward_bundle(disc, out.tokens)
        kernel = hamming_kernel(disc.embedding, 1e-8, gen.emittable)
        taylor = graph.backward(taylor_surrogate(out, taylor_advantages(out, bundle, kernel, 0.5))).flat()
        reinforce = graph.backward(reinforce_surrogate(out, bundle.rewards, 0.5)).flat()
        assert relative_error(taylor, reinforce) < 1e-5

    def test_uniform_policy_entropy(self):
        gen = _gen(seed=8)
        gen.proj[...] = 0.0
        gen.proj_b[...] = 0.0
        batch = SequenceBatch.from_sentences([[3, 4], [5]], 4)
        entropies = step_entropies(teacher_forced(Graph(), gen, batch)).value
        np.testing.assert_allclose(entropies[batch.mask().astype(bool)], np.log(len(EMITTABLE)))
        assert np.all(entropies[~batch.mask().astype(bool)] == 0.0)

    def test_entropy_bonus_scales_with_weight(self):
        gen = _gen(seed=9)
        forced = teacher_forced(Graph(), gen, SequenceBatch.from_sentences([[3, 4]], 3))
        assert entropy_bonus(forced, 0.2).item() == pytest.approx(2.0 * entropy_bonus(forced, 0.1).item())

    def test_gumbel_has_no_score_surrogate(self):
        gen, disc = _gen(), _disc()
        out = rollout(gen, 2, 3, 1.0, np.random.default_rng(0), Graph())
        with pytest.raises(ValueError):
            generator_objective(EstimatorConfig(kind="gumbel_softmax"), out, reward_bundle(disc, out.tokens),
                                0.0, disc.embedding)

    def test_unrecorded_rollout(self):
        gen, disc = _gen(), _disc()
        out = rollout(gen, 2, 3, 1.0, np.random.default_rng(0))
        out.log_dists = None
        with pytest.raises(ValueError):
            reinforce_surrogate(out, reward(disc, out.tokens), 0.0)


class TestEstimatorConfig:

    @pytest.mark.parametrize("changes", [{"kind": "ppo"}, {"bandwidth": 0.0}, {"entropy_weight": -1.0},
                                         {"baseline_decay": 1.0}, {"gumbel_tau_end": 0.0}])
    def test_rejects_invalid(self, changes):
        with pytest.raises(ValueError):
            EstimatorConfig(**changes)


class TestGumbelSoftmax:

    def test_temperature_schedule(self):
        assert gumbel_temperature(0, 100, 1.0, 0.1) == pytest.approx(1.0)
        assert gumbel_temperature(100, 100, 1.0, 0.1) == pytest.approx(0.1)
        taus = [gumbel_temperature(s, 100, 1.0, 0.1) for s in range(0, 101, 10)]
        assert all(a > b for a, b in zip(taus, taus[1:]))
        assert gumbel_temperature(5, 0, 1.0, 0.1) == 0.1

    def test_relaxed_lengths(self):
        soft = np.zeros((2, 4, V))
        soft[0, :, 3] = 1.0
        soft[0, 1, EOS_ID] = 2.0
        soft[1, :, 4] = 1.0
        np.testing.assert_array_equal(relaxed_lengths(soft), [2, 4])

    def test_step_differentiates_generator_only(self):
        gen, disc = _gen(seed=10), _disc(seed=10)
        graph = Graph()
        loss = gumbel_softmax_step(gen, disc, 0.5, np.random.default_rng(10), 4, 5, graph)
        grads = graph.backward(loss).params()
        assert set(grads) == {f"gen/{name}" for name in gen.tensors()}
        assert np.abs(strip_prefix(grads, "gen/")["proj"]).sum() > 0.0

    def test_step_records_on_the_given_graph(self):
        graph = Graph()
        loss = gumbel_softmax_step(_gen(seed=11), _disc(seed=11), 0.5,
                                   np.random.default_rng(11), 3, 4, graph)
        assert loss.graph is graph
        assert len(graph) > 0
