"""
Text GAN Toolkit - Trainer

Runs adversarial training without any UI, suitable for background jobs.
Alternates one discriminator step and one generator step per training
step, writes the run log, checkpoints and metric snapshots, and offers the
checkpoint-level entry points: sample, evaluate, sweep and verify.
"""

import logging
import math
import os
import signal
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.run_config import RunConfig
from config.settings import SWEEP_TEMPERATURES
from .autodiff import Graph, NonFiniteError
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .discriminator import DiscriminatorLoss, DiscriminatorParams, d_step, reward_bundle
from .estimators import (BaselineState, EstimatorConfig, generator_objective, gumbel_softmax_step,
                         gumbel_temperature, update_baseline)
from .generator import (GeneratorParams, PolicyRollout, generate, mle_step, perplexity, rollout,
                        strip_prefix)
from .metrics import (BleuConfig, InsufficientSamplesError, LanguageModelConfig, MetricResult,
                      bleu, lm_score, rlm_score, samples_to_corpus, self_bleu)
from .optim import Adam
from .oracle import all_passed, format_report, run_suite
from .run_log import RunLogger, append_records, write_sweep_csv
from .vocab import Corpus, Vocabulary, batch_iter, build_vocab, encode_corpus, load_word_vectors, read_lines

logger = logging.getLogger("Trainer")
status_logger = logging.getLogger("Status")

SWEEP_METRICS = ("bleu", "self_bleu", "lm", "rlm", "perplexity")


class TrainingDivergedError(RuntimeError):
    """A loss or gradient became non-finite"""


@dataclass
class TrainingData:
    vocab: Vocabulary
    train: Corpus
    valid: Corpus


def prepare_data(config: RunConfig) -> TrainingData:
    """
    Vocabulary from the training file, plus the validation corpus: the
    valid_path file if set, otherwise a seeded held-out split.
    """
    lines = read_lines(config.corpus_path)
    vocab = build_vocab(lines, config.vocab_size)
    corpus = encode_corpus(vocab, lines, "train")
    if config.valid_path:
        valid = encode_corpus(vocab, read_lines(config.valid_path), "valid")
        train = corpus
    else:
        train, valid = corpus.split_off(config.valid_fraction, config.seed)
    if len(train) == 0:
        raise ValueError(f"training corpus {config.corpus_path} has no sentences")
    logger.info(f"Data: |V| = {len(vocab)}, {len(train)} train / {len(valid)} valid sentences")
    return TrainingData(vocab, train, valid)


def init_models(config: RunConfig, vocab: Vocabulary, rng: np.random.Generator
                ) -> Tuple[GeneratorParams, Optional[DiscriminatorParams]]:
    """
    Generator and discriminator start from the same embedding matrix (word
    vectors if configured) but own separate copies.
    """
    if config.vectors_path:
        embedding, _ = load_word_vectors(config.vectors_path, vocab, config.embedding_dim, rng)
    else:
        embedding = rng.normal(0.0, 1.0 / np.sqrt(config.embedding_dim),
                               size=(len(vocab), config.embedding_dim))
    gen = GeneratorParams.init(len(vocab), config.embedding_dim, config.gen_hidden, rng,
                               emittable=vocab.emittable_mask(), embedding=embedding.copy(),
                               scale=config.init_scale)
    if config.estimator == "mle":
        return gen, None
    disc = DiscriminatorParams.init(len(vocab), config.embedding_dim, rng, layers=config.disc_layers,
                                    embedding=embedding.copy(), activation=config.disc_activation,
                                    sn_weight=config.sn_weight,
                                    embedding_weight=config.embedding_weight,
                                    max_norm=config.embedding_max_norm, scale=config.init_scale)
    return gen, disc


def _adam(config: RunConfig, lr: Optional[float] = None) -> Adam:
    return Adam(lr=lr or config.learning_rate, beta1=config.beta1, beta2=config.beta2,
                eps=config.adam_eps, clip_norm=config.clip_norm)


def _finite(value: float) -> bool:
    return bool(np.isfinite(value))


class GANTrainer:
    """
    Headless training session.

    start() loads data and builds models, run() loops until the configured
    step count or a stop request, stop() closes the run log.
    """

    def __init__(self, config: RunConfig, handle_signals: bool = True):
        self.config = config
        self.estimator = EstimatorConfig(config.estimator, config.bandwidth, config.entropy_weight,
                                         config.baseline_decay, config.gumbel_tau_start,
                                         config.gumbel_tau_end)
        self.run_logger = RunLogger(config.output_dir)
        self.running = False
        self.step = 0
        self.start_time = 0.0
        self.best_score = math.inf
        self.baseline = BaselineState(decay=config.baseline_decay)
        self.data: Optional[TrainingData] = None
        self.gen: Optional[GeneratorParams] = None
        self.disc: Optional[DiscriminatorParams] = None
        self.lm: Optional[GeneratorParams] = None
        self._recent_rewards: List[float] = []
        self._last_d: Dict[str, float] = {}

        if handle_signals:
            signal.signal(signal.SIGINT, self._signal_handler)
            signal.signal(signal.SIGTERM, self._signal_handler)

    @property
    def role(self) -> str:
        return "lm" if self.config.estimator == "mle" else "gan"

    def start(self):
        config = self.config
        logger.info(f"Starting {config.estimator} run '{config.run_name}'")
        self.data = prepare_data(config)
        self.gen, self.disc = init_models(config, self.data.vocab, np.random.default_rng([config.seed, 0]))
        if config.lm_checkpoint:
            self.lm = load_checkpoint(config.lm_checkpoint, self.data.vocab).generator
        self.sample_rng = np.random.default_rng([config.seed, 1])
        self.eval_seed = config.seed
        lm_lr = config.lm_learning_rate if config.estimator == "mle" else None
        self.gen_optimizer = _adam(config, lm_lr)
        self.disc_optimizer = _adam(config)
        self.real_batches = batch_iter(self.data.train, config.batch_size, config.max_len,
                                       config.seed, epochs=None)
        self.steps_per_epoch = max(1, math.ceil(len(self.data.train) / config.batch_size))
        self.run_logger.start_session(config.run_name, config.to_dict())
        self.running = True
        self.start_time = time.time()

    def stop(self):
        self.running = False
        if self.run_logger.is_recording:
            logger.info("Stopping...")
            self.run_logger.stop_session()

    def run(self) -> str:
        """
        Train until config.steps (or a stop request).

        Returns:
            path of last.ckpt
        """
        config = self.config
        logger.info(f"Running {config.steps} steps "
                    f"({self.steps_per_epoch} steps per epoch, batch {config.batch_size})")
        while self.running and self.step < config.steps:
            self.step += 1
            self.train_step(self.step)
            if self.step % config.log_every == 0:
                self._print_status()
            if self.step % config.eval_every == 0:
                self.evaluate_snapshot(self.step)
            if self.step % self.steps_per_epoch == 0:
                self.select_model(self.step)
            if self.step % config.checkpoint_every == 0:
                self.save(f"step_{self.step}.ckpt")
        if not self.running:
            logger.info(f"Stopped early at step {self.step}")
        return self.save("last.ckpt")

    # Steps

    def train_step(self, step: int):
        """One D record and one G record (G only for estimator = mle)"""
        real = next(self.real_batches)
        if self.config.estimator == "mle":
            self._guard(step, "G", lambda: self._mle_step(step, real))
            return
        graph = Graph()
        policy = self._guard(step, "rollout", lambda: rollout(
            self.gen, self.config.batch_size, self.config.max_len, 1.0, self.sample_rng, graph))
        self._guard(step, "D", lambda: self._d_step(step, real, policy))
        self._guard(step, "G", lambda: self._g_step(step, graph, policy))

    def _guard(self, step: int, phase: str, fn: Callable):
        try:
            return fn()
        except NonFiniteError as e:
            self._abort(step, f"{phase}: {e}")

    def _abort(self, step: int, reason: str, **diagnostics):
        logger.error(f"Training diverged at step {step}: {reason}")
        diagnostics.setdefault("baseline", self.baseline.b)
        self.run_logger.abort(step, reason, **diagnostics)
        self.stop()
        raise TrainingDivergedError(f"step {step}: {reason}")

    def _d_step(self, step: int, real, policy: PolicyRollout):
        terms: DiscriminatorLoss = d_step(self.disc, real, policy.tokens, self.disc_optimizer,
                                          self.config.power_iters)
        record = {
            "loss": terms.total.item(),
            "classification": terms.classification.item(),
            "reg": terms.reg.item(),
            "real_reward": float(terms.real_rewards.mean()),
            "fake_reward": float(terms.fake_rewards.mean()),
            "sigmas": terms.sigmas,
            "grad_norm": self.disc_optimizer.last_norm,
        }
        if not (_finite(record["loss"]) and _finite(record["grad_norm"])):
            self._abort(step, "non-finite discriminator loss", **record)
        self.run_logger.write("D", step, **record)
        self._last_d = record

    def _g_step(self, step: int, graph: Graph, policy: PolicyRollout):
        config = self.config
        if config.estimator == "gumbel_softmax":
            tau = gumbel_temperature(step - 1, config.steps, config.gumbel_tau_start,
                                     config.gumbel_tau_end)
            g_graph = Graph()
            loss = gumbel_softmax_step(self.gen, self.disc, tau, self.sample_rng,
                                       config.batch_size, config.max_len, g_graph)
            rewards = reward_bundle(self.disc, policy.tokens, with_taylor=False).rewards
            update_baseline(self.baseline, rewards)
            grads = g_graph.backward(loss)
            extra = {"tau": tau}
        else:
            bundle = reward_bundle(self.disc, policy.tokens, with_taylor=config.estimator == "taylor")
            rewards = bundle.rewards
            update_baseline(self.baseline, rewards)
            objective = generator_objective(self.estimator, policy, bundle, self.baseline.b,
                                            self.disc.embedding)
            loss = -objective
            grads = graph.backward(loss)
            extra = {}
        norm = self.gen_optimizer.step(self.gen.tensors(), strip_prefix(grads.params(), "gen/"))
        record = {
            "loss": loss.item(),
            "reward": float(np.mean(rewards)),
            "baseline": self.baseline.b,
            "entropy": float(policy.step_entropies.sum() / max(policy.mask.sum(), 1.0)),
            "length": float(policy.tokens.lengths.mean()),
            "grad_norm": norm,
            **extra,
        }
        if not (_finite(record["loss"]) and _finite(norm) and _finite(record["reward"])):
            self._abort(step, "non-finite generator loss", **record)
        self.run_logger.write("G", step, **record)
        self._recent_rewards.append(record["reward"])

    def _mle_step(self, step: int, real):
        loss = mle_step(self.gen, real, self.gen_optimizer)
        norm = self.gen_optimizer.last_norm
        if not (_finite(loss) and _finite(norm)):
            self._abort(step, "non-finite MLE loss", loss=loss, grad_norm=norm)
        self.run_logger.write("G", step, loss=loss, grad_norm=norm)

    # Evaluation and checkpoints

    def evaluate_snapshot(self, step: int) -> List[MetricResult]:
        """BLEU, Self-BLEU and validation perplexity, written as eval records"""
        config = self.config
        if len(self.data.valid) == 0:
            return []
        metrics = ["bleu", "self_bleu", "perplexity"] + (["lm"] if self.lm is not None else [])
        results = score_generator(self.gen, self.data.vocab, self.data.valid, config,
                                  config.eval_temperature, metrics, self.eval_seed, self.lm, step)
        for result in results:
            fields = result.to_dict()
            fields.pop("step")
            self.run_logger.write("eval", step, **fields)
        return results

    def selection_score(self) -> float:
        """Lower is better: LM score of samples if an LM is loaded, else validation perplexity"""
        config = self.config
        if self.lm is not None:
            rng = np.random.default_rng([config.seed, 2])
            samples = generate(self.gen, config.eval_samples, config.max_len,
                               config.eval_temperature, rng)
            return lm_score(self.lm, samples)
        return perplexity(self.gen, self.data.valid, config.max_len, config.batch_size)

    def select_model(self, step: int):
        if len(self.data.valid) == 0:
            return
        score = self.selection_score()
        if score < self.best_score:
            self.best_score = score
            self.save("best.ckpt")
            logger.info(f"New best model at step {step}: selection score {score:.4f}")

    def checkpoint(self) -> Checkpoint:
        state = {
            "config": self.config.to_dict(),
            "baseline": self.baseline.b,
            "baseline_initialized": self.baseline.initialized,
            "gen_adam_steps": self.gen_optimizer.state.step,
        }
        return Checkpoint(self.role, self.data.vocab, self.gen, self.disc, self.step, state)

    def save(self, name: str) -> str:
        path = self.run_logger.run_file(name)
        try:
            save_checkpoint(path, self.checkpoint())
        except CheckpointError:
            self.stop()
            raise
        self.run_logger.write("checkpoint", self.step, path=os.path.basename(path))
        return path

    def _print_status(self):
        elapsed = int(time.time() - self.start_time)
        recent = self._recent_rewards[-self.config.log_every:]
        reward = f"{np.mean(recent):.4f}" if recent else "--"
        d_loss = f"{self._last_d['loss']:.4f}" if self._last_d else "--"
        status_logger.info(f"Step: {self.step}/{self.config.steps} | Elapsed: {elapsed}s | "
                           f"D loss: {d_loss} | G reward: {reward} | b: {self.baseline.b:.4f}")

    def _signal_handler(self, signum, frame):
        logger.info(f"Received signal {signum}")
        self.running = False


def train(config: RunConfig, handle_signals: bool = True) -> str:
    """Run a full training session; returns the final checkpoint path"""
    trainer = GANTrainer(config, handle_signals=handle_signals)
    try:
        trainer.start()
        return trainer.run()
    finally:
        trainer.stop()


# ---------------------------------------------------------------------------
# Checkpoint-level operations
# ---------------------------------------------------------------------------

def _checkpoint_config(ckpt: Checkpoint) -> RunConfig:
    stored = ckpt.state.get("config")
    return RunConfig(**stored) if stored else RunConfig()


def temperature_rng(seed: int, temperature: float) -> np.random.Generator:
    """Sampling stream keyed by (seed, temperature) so sweeps and evaluate agree"""
    return np.random.default_rng([seed, int(round(temperature * 1e6))])


def sample(ckpt_path: str, n: int, temperature: float, seed: int,
           max_len: Optional[int] = None) -> List[str]:
    """n decoded sentences from a checkpoint's generator"""
    if n < 1:
        raise ValueError("n must be >= 1")
    ckpt = load_checkpoint(ckpt_path)
    max_len = max_len or _checkpoint_config(ckpt).max_len
    batch = generate(ckpt.generator, n, max_len, temperature, np.random.default_rng(seed))
    return [ckpt.vocab.decode(seq) for seq in batch.sequences()]


def reference_corpus(ckpt: Checkpoint, path: Optional[str] = None) -> Corpus:
    """Real evaluation text: path if given, else the run's validation split"""
    if path:
        return encode_corpus(ckpt.vocab, read_lines(path), "valid")
    config = _checkpoint_config(ckpt)
    if config.valid_path:
        return encode_corpus(ckpt.vocab, read_lines(config.valid_path), "valid")
    corpus = encode_corpus(ckpt.vocab, read_lines(config.corpus_path), "train")
    return corpus.split_off(config.valid_fraction, config.seed)[1]


def score_generator(gen: GeneratorParams, vocab: Vocabulary, references: Corpus, config: RunConfig,
                    temperature: float, metrics: Sequence[str], seed: int,
                    lm: Optional[GeneratorParams] = None, step: Optional[int] = None
                    ) -> List[MetricResult]:
    """
    Score one temperature. bleu is reported negated (lower is better, as
    every other column); metrics that cannot be computed are skipped.
    """
    unknown = set(metrics) - set(SWEEP_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}, expected a subset of {SWEEP_METRICS}")
    samples = generate(gen, config.eval_samples, config.max_len, temperature,
                       temperature_rng(seed, temperature))
    generated = samples_to_corpus(samples)
    bleu_config = BleuConfig(config.bleu_max_order, config.bleu_smoothing)
    results = []

    def add(metric: str, value: float, size: int):
        results.append(MetricResult(metric, float(value), temperature, size, seed, step))

    for metric in metrics:
        if metric == "bleu":
            add("neg_bleu", -bleu(generated.sentences, references.sentences, config=bleu_config),
                len(generated))
        elif metric == "self_bleu":
            add("self_bleu", self_bleu(generated.sentences, sample_size=config.self_bleu_samples,
                                       seed=seed, config=bleu_config),
                min(config.self_bleu_samples, len(generated)))
        elif metric == "lm":
            if lm is None:
                logger.warning("No language model given; skipping lm score")
                continue
            add("lm", lm_score(lm, samples), samples.size)
        elif metric == "rlm":
            lm_config = LanguageModelConfig(config.embedding_dim, config.gen_hidden, config.rlm_epochs,
                                            config.batch_size, config.lm_learning_rate,
                                            config.max_len, config.rlm_min_samples, seed)
            try:
                add("rlm", rlm_score(generated, references, len(vocab), lm_config,
                                     vocab.emittable_mask()), len(generated))
            except InsufficientSamplesError as e:
                logger.warning(f"Skipping rlm score: {e}")
        elif metric == "perplexity":
            add("perplexity", perplexity(gen, references, config.max_len, config.batch_size),
                len(references))
    return results


def evaluate(ckpt_path: str, temperature: float, lm_ckpt: Optional[str] = None,
             references: Optional[str] = None, seed: int = 0,
             metrics: Sequence[str] = SWEEP_METRICS, log_path: Optional[str] = None
             ) -> List[MetricResult]:
    """
    Score a checkpoint at one temperature and append the results to a run log
    (default: run.jsonl next to the checkpoint).
    """
    ckpt = load_checkpoint(ckpt_path)
    config = _checkpoint_config(ckpt)
    lm = load_checkpoint(lm_ckpt, ckpt.vocab).generator if lm_ckpt else None
    results = score_generator(ckpt.generator, ckpt.vocab, reference_corpus(ckpt, references), config,
                              temperature, metrics, seed, lm, ckpt.step)
    log_path = log_path or os.path.join(os.path.dirname(os.path.abspath(ckpt_path)), "run.jsonl")
    append_records(log_path, [{"kind": "eval", **r.to_dict()} for r in results])
    return results


def parse_temperatures(text: str = SWEEP_TEMPERATURES) -> List[float]:
    try:
        temps = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise ValueError(f"bad temperature list '{text}'") from e
    if not temps or any(t <= 0 for t in temps):
        raise ValueError("temperatures must be a non-empty list of positive numbers")
    return temps


def sweep(ckpt_path: str, temperatures: Sequence[float], output: Optional[str] = None,
          lm_ckpt: Optional[str] = None, references: Optional[str] = None, seed: int = 0,
          metrics: Sequence[str] = SWEEP_METRICS) -> List[Dict[str, float]]:
    """
    One row per temperature (temperature, neg_bleu, self_bleu, lm, rlm,
    perplexity), written as CSV when output is given.
    """
    ckpt = load_checkpoint(ckpt_path)
    config = _checkpoint_config(ckpt)
    lm = load_checkpoint(lm_ckpt, ckpt.vocab).generator if lm_ckpt else None
    refs = reference_corpus(ckpt, references)
    rows = []
    for temperature in temperatures:
        results = score_generator(ckpt.generator, ckpt.vocab, refs, config, temperature,
                                  metrics, seed, lm, ckpt.step)
        row = {"temperature": temperature}
        row.update({r.metric: r.value for r in results})
        rows.append(row)
        logger.info("Sweep " + " | ".join(f"{k}: {v:.4f}" for k, v in row.items()))
    if output:
        write_sweep_csv(output, rows)
    return rows


def verify(seed: int = 0, fault: Optional[str] = None, out: Callable[[str], None] = print) -> int:
    """Run the oracle suite, print the report table; 0 iff every check passes"""
    reports = run_suite(seed=seed, fault=fault)
    out(format_report(reports))
    return 0 if all_passed(reports) else 1
