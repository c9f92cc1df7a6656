"""
Text GAN Toolkit - Run Configuration

RunConfig gathers every knob of a run; defaults come from config.settings.
Run files are flat "key = value" text, one field per line, '#' comments.
"""

from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Optional

from config import settings


class ConfigError(ValueError):
    """Unknown key, duplicate key, bad value or violated constraint"""


@dataclass
class RunConfig:
    # Paths
    corpus_path: str = settings.CORPUS_PATH
    valid_path: str = settings.VALID_PATH
    vectors_path: str = settings.VECTORS_PATH
    output_dir: str = settings.OUTPUT_DIR
    run_name: str = settings.RUN_NAME
    lm_checkpoint: str = settings.LM_CHECKPOINT

    # Corpus
    vocab_size: int = settings.VOCAB_SIZE
    max_len: int = settings.MAX_LEN
    valid_fraction: float = settings.VALID_FRACTION

    # Model
    embedding_dim: int = settings.EMBEDDING_DIM
    gen_hidden: int = settings.GEN_HIDDEN
    disc_layers: str = settings.DISC_LAYERS
    disc_activation: str = settings.DISC_ACTIVATION
    init_scale: float = settings.INIT_SCALE

    # Estimator
    estimator: str = settings.ESTIMATOR
    bandwidth: float = settings.BANDWIDTH
    entropy_weight: float = settings.ENTROPY_WEIGHT
    baseline_decay: float = settings.BASELINE_DECAY
    gumbel_tau_start: float = settings.GUMBEL_TAU_START
    gumbel_tau_end: float = settings.GUMBEL_TAU_END

    # Discriminator regularizers
    sn_weight: float = settings.SN_WEIGHT
    embedding_weight: float = settings.EMBEDDING_WEIGHT
    embedding_max_norm: float = settings.EMBEDDING_MAX_NORM
    power_iters: int = settings.POWER_ITERS

    # Optimization
    batch_size: int = settings.BATCH_SIZE
    learning_rate: float = settings.LEARNING_RATE
    beta1: float = settings.BETA1
    beta2: float = settings.BETA2
    adam_eps: float = settings.ADAM_EPS
    clip_norm: float = settings.CLIP_NORM
    steps: int = settings.STEPS
    seed: int = settings.SEED

    # Cadence
    log_every: int = settings.LOG_EVERY
    eval_every: int = settings.EVAL_EVERY
    checkpoint_every: int = settings.CHECKPOINT_EVERY

    # Evaluation
    eval_temperature: float = settings.EVAL_TEMPERATURE
    eval_samples: int = settings.EVAL_SAMPLES
    bleu_max_order: int = settings.BLEU_MAX_ORDER
    bleu_smoothing: float = settings.BLEU_SMOOTHING
    self_bleu_samples: int = settings.SELF_BLEU_SAMPLES
    rlm_min_samples: int = settings.RLM_MIN_SAMPLES
    rlm_epochs: int = settings.RLM_EPOCHS
    lm_learning_rate: float = settings.LM_LEARNING_RATE

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("vocab_size", "max_len", "embedding_dim", "gen_hidden", "bandwidth",
                    "gumbel_tau_start", "gumbel_tau_end", "power_iters", "batch_size",
                    "learning_rate", "adam_eps", "steps", "log_every", "eval_every",
                    "checkpoint_every", "eval_temperature", "eval_samples", "bleu_max_order",
                    "bleu_smoothing", "self_bleu_samples", "rlm_min_samples", "rlm_epochs",
                    "lm_learning_rate", "init_scale", "embedding_max_norm")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        non_negative = ("entropy_weight", "sn_weight", "embedding_weight", "clip_norm")
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.max_len < 2:
            raise ConfigError("max_len must leave room for one token and EOS")
        if not 0.0 < self.valid_fraction < 1.0:
            raise ConfigError("valid_fraction must lie in (0, 1)")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ConfigError("baseline_decay must lie in [0, 1)")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.estimator not in ("taylor", "reinforce", "straight_through", "gumbel_softmax", "mle"):
            raise ConfigError(f"unknown estimator '{self.estimator}'")
        if self.disc_activation not in ("elu", "linear"):
            raise ConfigError(f"unknown discriminator activation '{self.disc_activation}'")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def replace(self, **changes) -> "RunConfig":
        values = self.to_dict()
        unknown = set(changes) - set(values)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(changes)
        return RunConfig(**values)


def _convert(name: str, kind, raw: str):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{name}: cannot parse '{raw}' as {kind.__name__}") from e
    return raw


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """
    Parse "key = value" lines into a RunConfig.

    Raises:
        ConfigError: unknown key, duplicate key, unparsable value, missing '='
    """
    types = {f.name: f.type for f in fields(RunConfig)}
    types = {name: {"int": int, "float": float, "str": str}.get(t, t) if isinstance(t, str) else t
             for name, t in types.items()}
    values: Dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        if key not in types:
            raise ConfigError(f"{source}:{line_no}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{line_no}: duplicate key '{key}'")
        values[key] = _convert(key, types[key], raw)
    return RunConfig(**values)


def load_config(path: Optional[str]) -> RunConfig:
    """Read a run file; None gives the defaults"""
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text, source=path)
