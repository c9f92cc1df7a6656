# Core module
from .autodiff import Graph, GradientMap, Node, NonFiniteError, ShapeError
from .vocab import Corpus, SequenceBatch, Vocabulary, build_vocab
from .generator import GeneratorParams, PolicyRollout, rollout
from .discriminator import DiscriminatorParams, RewardBundle, reward_bundle
from .estimators import BaselineState, EstimatorConfig, KernelMatrix, generator_objective
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
