"""
Training sessions, checkpoint-level commands and the command line.

Fast tests run a few steps of every estimator on a toy corpus. The
desk-scale runs are marked slow and only run with `pytest -m slow`.
"""

import csv
import logging
import os

import numpy as np
import pytest
from scipy.stats import spearmanr

import core.trainer as trainer_module
import main as cli
from config.run_config import RunConfig
from core.checkpoint import load_checkpoint
from core.estimators import ESTIMATOR_KINDS
from core.generator import perplexity
from core.run_log import read_run_log
from core.trainer import (GANTrainer, TrainingDivergedError, evaluate, parse_temperatures,
                          prepare_data, reference_corpus, sample, score_generator, sweep, train,
                          verify)

SUBJECTS = ["the cat", "a dog", "the bird", "my friend", "the old man", "a child"]
VERBS = ["sat", "ran", "slept", "sang", "waited", "laughed"]
PLACES = ["", "on the mat", "in the park", "at home", "by the river", "near the door"]


def write_corpus(path, n, seed=0):
    rng = np.random.default_rng(seed)
    lines = [" ".join(w for w in (rng.choice(SUBJECTS), rng.choice(VERBS), rng.choice(PLACES)) if w)
             for _ in range(n)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def tiny_config(tmp_path, **changes) -> RunConfig:
    corpus = tmp_path / "train.txt"
    if not corpus.exists():
        write_corpus(corpus, 40)
    values = dict(corpus_path=str(corpus), output_dir=str(tmp_path / "runs"), run_name="toy",
                  vocab_size=50, max_len=8, valid_fraction=0.2, embedding_dim=6, gen_hidden=8,
                  disc_layers="conv2-6,pool2,conv2-6,gmp,dense6", batch_size=8, learning_rate=1e-3,
                  steps=6, log_every=2, eval_every=3, checkpoint_every=3, eval_samples=24,
                  self_bleu_samples=24, rlm_min_samples=10, rlm_epochs=1)
    values.update(changes)
    return RunConfig(**values)


def records(config: RunConfig, kind=None):
    rows = read_run_log(os.path.join(config.output_dir, config.run_name, "run.jsonl"))
    return [r for r in rows if kind is None or r["kind"] == kind]


@pytest.fixture
def trained(tmp_path):
    config = tiny_config(tmp_path)
    return config, train(config, handle_signals=False)


class TestTraining:

    @pytest.mark.parametrize("estimator", ESTIMATOR_KINDS)
    def test_every_estimator_completes(self, tmp_path, estimator):
        config = tiny_config(tmp_path, estimator=estimator)
        path = train(config, handle_signals=False)
        assert os.path.basename(path) == "last.ckpt"

        log = records(config)
        assert log[0]["kind"] == "header"
        assert log[0]["config"]["estimator"] == estimator
        g = records(config, "G")
        assert [r["step"] for r in g] == list(range(1, 7))
        assert all(np.isfinite(r["loss"]) and np.isfinite(r["grad_norm"]) for r in g)
        d = records(config, "D")
        if estimator == "mle":
            assert d == []
            assert load_checkpoint(path).discriminator is None
        else:
            assert [r["step"] for r in d] == list(range(1, 7))
            assert all(np.isfinite(r["loss"]) for r in d)
            assert set(d[0]["sigmas"]) >= {"conv0/kernel", "out/kernel"}
        if estimator == "gumbel_softmax":
            assert g[0]["tau"] == pytest.approx(config.gumbel_tau_start)
            assert g[-1]["tau"] < g[0]["tau"]

    def test_session_artefacts(self, trained):
        config, path = trained
        run_dir = os.path.dirname(path)
        for name in ("step_3.ckpt", "step_6.ckpt", "best.ckpt", "last.ckpt"):
            assert os.path.exists(os.path.join(run_dir, name))
        saved = [r["path"] for r in records(config, "checkpoint")]
        assert saved == ["step_3.ckpt", "best.ckpt", "step_6.ckpt", "last.ckpt"]
        evals = records(config, "eval")
        assert sorted({r["step"] for r in evals}) == [3, 6]
        assert {r["metric"] for r in evals} == {"neg_bleu", "self_bleu", "perplexity"}

    def test_steps_never_decrease(self, trained):
        config, _ = trained
        for kind in ("D", "G", "eval", "checkpoint"):
            steps = [r["step"] for r in records(config, kind)]
            assert steps == sorted(steps)

    def test_checkpoint_carries_training_state(self, trained):
        config, path = trained
        ckpt = load_checkpoint(path)
        assert ckpt.step == 6
        assert ckpt.role == "gan"
        assert ckpt.state["config"] == config.to_dict()
        assert ckpt.state["gen_adam_steps"] == 6
        assert ckpt.state["baseline_initialized"]

    def test_same_seed_same_run(self, tmp_path):
        first = tiny_config(tmp_path, run_name="a", estimator="reinforce")
        second = tiny_config(tmp_path, run_name="b", estimator="reinforce")
        a = load_checkpoint(train(first, handle_signals=False))
        b = load_checkpoint(train(second, handle_signals=False))
        for name, value in a.generator.tensors().items():
            np.testing.assert_array_equal(value, b.generator.tensors()[name])
        assert [r["loss"] for r in records(first, "G")] == [r["loss"] for r in records(second, "G")]

    def test_seed_changes_the_run(self, tmp_path):
        first = tiny_config(tmp_path, run_name="a", estimator="reinforce", seed=1)
        second = tiny_config(tmp_path, run_name="b", estimator="reinforce", seed=2)
        train(first, handle_signals=False)
        train(second, handle_signals=False)
        assert [r["loss"] for r in records(first, "G")] != [r["loss"] for r in records(second, "G")]

    def test_status_lines(self, tmp_path, caplog):
        config = tiny_config(tmp_path, estimator="straight_through")
        with caplog.at_level(logging.INFO, logger="Status"):
            train(config, handle_signals=False)
        status = [r.getMessage() for r in caplog.records if r.name == "Status"]
        assert len(status) == 3
        assert status[0].startswith("Step: 2/6 | Elapsed: ")

    def test_stop_request_saves_last_checkpoint(self, tmp_path):
        trainer = GANTrainer(tiny_config(tmp_path), handle_signals=False)
        trainer.start()
        trainer.running = False
        path = trainer.run()
        trainer.stop()
        assert load_checkpoint(path).step == 0
        assert not trainer.run_logger.is_recording

    def test_divergence_writes_abort_record(self, tmp_path, monkeypatch):
        original = trainer_module.reward_bundle

        def poisoned(*args, **kwargs):
            bundle = original(*args, **kwargs)
            bundle.rewards = np.full_like(bundle.rewards, np.nan)
            return bundle

        monkeypatch.setattr(trainer_module, "reward_bundle", poisoned)
        config = tiny_config(tmp_path, estimator="reinforce")
        with pytest.raises(TrainingDivergedError):
            train(config, handle_signals=False)
        last = records(config)[-1]
        assert last["kind"] == "abort"
        assert last["step"] == 1

    def test_validation_file(self, tmp_path):
        valid = write_corpus(tmp_path / "valid.txt", 7, seed=5)
        data = prepare_data(tiny_config(tmp_path, valid_path=valid))
        assert len(data.valid) == 7
        assert len(data.train) == 40

    def test_held_out_split(self, tmp_path):
        data = prepare_data(tiny_config(tmp_path))
        assert (len(data.train), len(data.valid)) == (32, 8)


class TestCheckpointCommands:

    def test_sample(self, trained):
        _, path = trained
        lines = sample(path, 5, 1.0, seed=3)
        assert len(lines) == 5
        tokens = set(load_checkpoint(path).vocab.tokens)
        assert all(word in tokens for line in lines for word in line.split())
        assert sample(path, 5, 1.0, seed=3) == lines

    def test_sample_count(self, trained):
        with pytest.raises(ValueError):
            sample(trained[1], 0, 1.0, seed=0)

    def test_evaluate_appends_to_run_log(self, trained):
        config, path = trained
        before = len(records(config))
        results = evaluate(path, 1.0, seed=1, metrics=["bleu", "self_bleu", "rlm", "perplexity", "lm"])
        assert [r.metric for r in results] == ["neg_bleu", "self_bleu", "rlm", "perplexity"]
        assert all(np.isfinite(r.value) for r in results)
        assert -1.0 <= results[0].value < 0.0
        added = records(config)[before:]
        assert [r["metric"] for r in added] == [r.metric for r in results]
        assert all(r["kind"] == "eval" and r["temperature"] == 1.0 for r in added)

    def test_evaluate_with_language_model(self, tmp_path, trained):
        _, path = trained
        lm_path = train(tiny_config(tmp_path, run_name="lm", estimator="mle"), handle_signals=False)
        results = evaluate(path, 1.0, lm_ckpt=lm_path, metrics=["lm"])
        assert results[0].metric == "lm"
        assert results[0].value > 0.0

    def test_rlm_skipped_below_minimum(self, trained):
        config, path = trained
        ckpt = load_checkpoint(path)
        small = config.replace(eval_samples=5)
        results = score_generator(ckpt.generator, ckpt.vocab, reference_corpus(ckpt), small, 1.0,
                                  ["rlm", "perplexity"], seed=0)
        assert [r.metric for r in results] == ["perplexity"]

    def test_unknown_metric(self, trained):
        config, path = trained
        ckpt = load_checkpoint(path)
        with pytest.raises(ValueError):
            score_generator(ckpt.generator, ckpt.vocab, reference_corpus(ckpt), config, 1.0,
                            ["fed"], seed=0)

    def test_sweep_rows_match_evaluate(self, tmp_path, trained):
        _, path = trained
        output = str(tmp_path / "sweep.csv")
        rows = sweep(path, [0.5, 1.0], output, seed=2, metrics=["bleu", "self_bleu"])
        assert [row["temperature"] for row in rows] == [0.5, 1.0]
        single = evaluate(path, 1.0, seed=2, metrics=["bleu", "self_bleu"],
                          log_path=str(tmp_path / "eval.jsonl"))
        assert rows[1]["neg_bleu"] == single[0].value
        assert rows[1]["self_bleu"] == single[1].value
        with open(output, newline="", encoding="utf-8") as f:
            table = list(csv.DictReader(f))
        assert list(table[0]) == ["temperature", "neg_bleu", "self_bleu"]
        assert len(table) == 2

    def test_parse_temperatures(self):
        assert parse_temperatures("0.5, 1.0,1.5") == [0.5, 1.0, 1.5]
        for bad in ("", "0.5,-1", "warm"):
            with pytest.raises(ValueError):
                parse_temperatures(bad)

    def test_verify_detects_fault(self):
        out = []
        assert verify(seed=0, fault="kernel", out=out.append) == 1
        assert "FAIL" in out[0]


class TestCommandLine:

    def test_sample(self, trained, capsys):
        _, path = trained
        with pytest.raises(SystemExit) as exit_info:
            cli.main(["sample", "--ckpt", path, "-n", "3", "--seed", "4"])
        assert exit_info.value.code == 0
        assert capsys.readouterr().out.splitlines() == sample(path, 3, 1.0, 4)

    def test_missing_checkpoint(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exit_info:
            cli.main(["sample", "--ckpt", str(tmp_path / "absent.ckpt")])
        assert exit_info.value.code == 1
        assert capsys.readouterr().err.startswith("Error: ")

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("estimator = ppo\n", encoding="utf-8")
        with pytest.raises(SystemExit) as exit_info:
            cli.main(["train", "--config", str(cfg)])
        assert exit_info.value.code == 1
        assert "estimator" in capsys.readouterr().err

    def test_train_and_evaluate(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        config = tiny_config(tmp_path, estimator="taylor")
        cfg.write_text("\n".join(f"{k} = {v}" for k, v in config.to_dict().items() if v != "") + "\n",
                       encoding="utf-8")
        with pytest.raises(SystemExit) as exit_info:
            cli.main(["train", "--config", str(cfg)])
        assert exit_info.value.code == 0
        path = os.path.join(config.output_dir, config.run_name, "last.ckpt")
        assert os.path.exists(path)
        capsys.readouterr()
        with pytest.raises(SystemExit):
            cli.main(["evaluate", "--ckpt", path, "--metrics", "bleu"])
        assert '"metric": "neg_bleu"' in capsys.readouterr().out


# ---------------------------------------------------------------------------
# Desk-scale runs
# ---------------------------------------------------------------------------

def desk_config(tmp_path, **changes) -> RunConfig:
    corpus = tmp_path / "desk.txt"
    if not corpus.exists():
        write_corpus(corpus, 800, seed=11)
    values = dict(corpus_path=str(corpus), output_dir=str(tmp_path / "runs"), run_name="desk",
                  vocab_size=200, max_len=12, embedding_dim=32, gen_hidden=32,
                  disc_layers="conv3-32,conv4-32,pool2,conv3-32,gmp,dense32", batch_size=64,
                  steps=2000, log_every=200, eval_every=1000, checkpoint_every=1000,
                  eval_samples=300, self_bleu_samples=300, rlm_min_samples=100)
    values.update(changes)
    return RunConfig(**values)


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    taylor = desk_config(root)
    no_entropy = desk_config(root, run_name="desk-no-entropy", entropy_weight=0.0)
    lm = desk_config(root, run_name="desk-lm", estimator="mle", steps=1000)
    return {
        "taylor": (taylor, train(taylor, handle_signals=False)),
        "no_entropy": (no_entropy, train(no_entropy, handle_signals=False)),
        "lm": (lm, train(lm, handle_signals=False)),
    }


@pytest.mark.slow
class TestDeskScale:

    def test_losses_finite_and_reward_rises(self, desk_runs):
        config, _ = desk_runs["taylor"]
        g = records(config, "G")
        assert len(g) == config.steps
        assert all(np.isfinite(r["loss"]) for r in g + records(config, "D"))
        tenth = config.steps // 10
        rewards = np.array([r["reward"] for r in g])
        assert rewards[-tenth:].mean() > rewards[:tenth].mean()

    def test_entropy_bonus_prevents_mode_dropping(self, desk_runs):
        scores = {}
        for name in ("taylor", "no_entropy"):
            config, path = desk_runs[name]
            ckpt = load_checkpoint(path)
            scores[name] = perplexity(ckpt.generator, reference_corpus(ckpt), config.max_len)
        assert scores["no_entropy"] > scores["taylor"]

    def test_temperature_sweep_directions(self, desk_runs, tmp_path):
        _, path = desk_runs["taylor"]
        _, lm_path = desk_runs["lm"]
        temperatures = parse_temperatures("0.5,0.75,1.0,1.25,1.5")
        rows = sweep(path, temperatures, str(tmp_path / "sweep.csv"), lm_ckpt=lm_path,
                     metrics=["self_bleu", "lm"])
        assert spearmanr(temperatures, [r["self_bleu"] for r in rows]).correlation < 0
        assert spearmanr(temperatures, [r["lm"] for r in rows]).correlation > 0
