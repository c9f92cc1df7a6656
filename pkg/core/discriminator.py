"""
Text GAN Toolkit - Discriminator

Embedding followed by a masked convolutional stack; the final dense unit is
the reward R(x) = sigmoid^-1(D(x)), read directly as a logit. The sigmoid only
appears inside the loss, through stable log-sigmoid forms.

Layer lists use the "conv3-512,conv4-512,pool2,...,gmp,dense1024" notation;
the last Dense 1 is implicit.

Masking: the input is truncated to each sequence's true length (positions
past it are zeroed), every conv/pool output is zeroed past the valid length
of that layer, pooling halves the valid length (ceil) and the global mean
divides by the valid length, so padding never changes any result.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import (DISC_ACTIVATION, DISC_LAYERS, EMBEDDING_MAX_NORM,
                             EMBEDDING_WEIGHT, POWER_ITERS, SN_WEIGHT)
from . import autodiff as ad
from .autodiff import Graph, Node
from .generator import glorot, strip_prefix
from .spectral import PowerIterState, matrix_view, spectral_norm
from .vocab import SequenceBatch

logger = logging.getLogger("Discriminator")


@dataclass(frozen=True)
class LayerSpec:
    kind: str           # conv | pool | gmp | dense
    kernel: int = 0
    units: int = 0


def parse_layers(spec: str) -> List[LayerSpec]:
    """'conv3-512,pool2,gmp,dense1024' -> LayerSpecs; gmp is appended after the convs if absent"""
    layers: List[LayerSpec] = []
    for token in (t.strip().lower() for t in spec.split(",") if t.strip()):
        if token.startswith("conv"):
            kernel, _, units = token[4:].partition("-")
            layers.append(LayerSpec("conv", int(kernel), int(units)))
        elif token == "pool2":
            layers.append(LayerSpec("pool", 2))
        elif token == "gmp":
            layers.append(LayerSpec("gmp"))
        elif token.startswith("dense"):
            layers.append(LayerSpec("dense", units=int(token[5:])))
        else:
            raise ValueError(f"unknown discriminator layer '{token}'")
    if not any(layer.kind == "gmp" for layer in layers):
        first_dense = next((i for i, l in enumerate(layers) if l.kind == "dense"), len(layers))
        layers.insert(first_dense, LayerSpec("gmp"))
    gmp_at = [i for i, l in enumerate(layers) if l.kind == "gmp"]
    if len(gmp_at) != 1:
        raise ValueError("exactly one global mean pool is allowed")
    if any(l.kind in ("conv", "pool") for l in layers[gmp_at[0]:]) or \
            any(l.kind == "dense" for l in layers[:gmp_at[0]]):
        raise ValueError("conv/pool layers must precede gmp, dense layers must follow it")
    return layers


def format_layers(layers: Sequence[LayerSpec]) -> str:
    """Inverse of parse_layers"""
    names = {"pool": lambda l: "pool2", "gmp": lambda l: "gmp",
             "conv": lambda l: f"conv{l.kernel}-{l.units}", "dense": lambda l: f"dense{l.units}"}
    return ",".join(names[l.kind](l) for l in layers)


@dataclass
class DiscriminatorParams:
    """
    phi: embedding W_E (V, d_E) plus conv/dense weights by name.

    power holds one PowerIterState per regularized kernel. Regularizer weights
    travel with the parameters so reg_loss needs nothing else.
    """
    embedding: np.ndarray
    weights: Dict[str, np.ndarray]
    layers: List[LayerSpec]
    power: Dict[str, PowerIterState] = field(default_factory=dict)
    activation: str = DISC_ACTIVATION
    sn_weight: float = SN_WEIGHT
    embedding_weight: float = EMBEDDING_WEIGHT
    max_norm: float = EMBEDDING_MAX_NORM

    @classmethod
    def init(cls, vocab_size: int, embedding_dim: int, rng: np.random.Generator,
             layers: str = DISC_LAYERS, embedding: Optional[np.ndarray] = None,
             activation: str = DISC_ACTIVATION, sn_weight: float = SN_WEIGHT,
             embedding_weight: float = EMBEDDING_WEIGHT, max_norm: float = EMBEDDING_MAX_NORM,
             scale: float = 1.0) -> "DiscriminatorParams":
        if activation not in ("elu", "linear"):
            raise ValueError(f"unknown activation '{activation}'")
        specs = parse_layers(layers)
        if embedding is None:
            embedding = rng.normal(0.0, 1.0 / np.sqrt(embedding_dim), size=(vocab_size, embedding_dim))
        weights: Dict[str, np.ndarray] = OrderedDict()
        power: Dict[str, PowerIterState] = {}
        width = embedding_dim
        conv_i = dense_i = 0
        for spec in specs:
            if spec.kind == "conv":
                name = f"conv{conv_i}"
                fan_in, fan_out = width * spec.kernel, spec.units * spec.kernel
                weights[name + "/kernel"] = glorot(rng, fan_in, fan_out,
                                                   shape=(spec.units, width, spec.kernel), scale=scale)
                weights[name + "/bias"] = np.zeros(spec.units)
                width = spec.units
                conv_i += 1
            elif spec.kind == "dense":
                name = f"dense{dense_i}"
                weights[name + "/kernel"] = glorot(rng, width, spec.units, scale=scale)
                weights[name + "/bias"] = np.zeros(spec.units)
                width = spec.units
                dense_i += 1
        weights["out/kernel"] = glorot(rng, width, 1, scale=scale)
        weights["out/bias"] = np.zeros(1)
        for name, w in weights.items():
            if name.endswith("/kernel"):
                rows, cols = matrix_view(w).shape
                power[name] = PowerIterState.init(rows, cols, rng)
        logger.debug(f"Discriminator {format_layers(specs)}: {len(weights)} weight tensors, "
                     f"{len(power)} spectrally regularized")
        return cls(np.array(embedding, dtype=np.float64), weights, specs, power,
                   activation, sn_weight, embedding_weight, max_norm)

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.embedding.shape[1]

    def tensors(self) -> Dict[str, np.ndarray]:
        out = OrderedDict(embedding=self.embedding)
        out.update(self.weights)
        return out

    def nodes(self, graph: Graph, prefix: str = "disc/", trainable: bool = True) -> Dict[str, Node]:
        """Register parameters; with trainable=False they enter as constants"""
        if trainable:
            return {name: graph.param(prefix + name, arr) for name, arr in self.tensors().items()}
        return {name: graph.constant(arr, name=prefix + name) for name, arr in self.tensors().items()}


@dataclass
class RewardBundle:
    """
    rewards (N,); delta_E (N, d_E, T) = grad of R w.r.t. the embedding output,
    zero past each length; taylor_matrix (N, V, T) once computed.
    """
    rewards: np.ndarray
    delta_E: np.ndarray
    lengths: np.ndarray
    taylor_matrix: Optional[np.ndarray] = None


def _activate(x: Node, activation: str) -> Node:
    return ad.elu(x) if activation == "elu" else x


def _valid(lengths: np.ndarray, width: int) -> np.ndarray:
    return (np.arange(width)[None, :] < lengths[:, None]).astype(np.float64)


def embed(params: DiscriminatorParams, w: Dict[str, Node], ids: np.ndarray) -> Node:
    return ad.take_rows(w["embedding"], ids)


def reward_from_embedding(params: DiscriminatorParams, w: Dict[str, Node], e: Node,
                          lengths: np.ndarray) -> Node:
    """
    R_E: (N, T, d_E) embedding output -> (N,) logits.

    Args:
        w: parameter nodes from params.nodes(graph)
        lengths: true lengths; everything past them is ignored
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    x = e * _valid(lengths, e.shape[1])[..., None]
    conv_i = dense_i = 0
    for spec in params.layers:
        if spec.kind == "conv":
            name = f"conv{conv_i}"
            x = _activate(ad.conv1d_same(x, w[name + "/kernel"]) + w[name + "/bias"], params.activation)
            x = x * _valid(lengths, x.shape[1])[..., None]
            conv_i += 1
        elif spec.kind == "pool":
            x = ad.mean_pool(x, lengths)
            lengths = ad.pooled_lengths(lengths)
        elif spec.kind == "gmp":
            x = ad.global_mean_pool(x, lengths)
        elif spec.kind == "dense":
            name = f"dense{dense_i}"
            x = _activate(x @ w[name + "/kernel"] + w[name + "/bias"], params.activation)
            dense_i += 1
    logits = x @ w["out/kernel"] + w["out/bias"]
    return ad.reshape(logits, (logits.shape[0],))


def reward_node(graph: Graph, params: DiscriminatorParams, batch: SequenceBatch,
                trainable: bool = True) -> Tuple[Node, Node]:
    """Returns (rewards (N,), embedding output (N, T, d_E)) recorded on graph"""
    w = params.nodes(graph, trainable=trainable)
    e = embed(params, w, batch.ids)
    return reward_from_embedding(params, w, e, batch.lengths), e


def reward(params: DiscriminatorParams, batch: SequenceBatch) -> np.ndarray:
    """Pre-sigmoid logit per sequence"""
    rewards, _ = reward_node(Graph(), params, batch, trainable=False)
    return rewards.value.copy()


def reward_with_embedding_grad(params: DiscriminatorParams, batch: SequenceBatch) -> RewardBundle:
    """
    Rewards plus delta_E through a tap on the embedding output. Rows are
    independent, so one backward pass of the summed rewards gives every row's
    gradient.
    """
    graph = Graph()
    rewards, e = reward_node(graph, params, batch, trainable=False)
    grads = graph.backward(ad.sum(rewards), taps=[e])
    delta = grads[e] * batch.mask()[..., None]
    return RewardBundle(rewards.value.copy(), np.transpose(delta, (0, 2, 1)).copy(),
                        batch.lengths.copy())


def taylor_matrix(bundle: RewardBundle, embedding: np.ndarray, batch: SequenceBatch) -> np.ndarray:
    """
    First-order rewards of every single-token substitution:
    R~[n, v, t] = R(x) + e_v . dE_t - e_{x_t} . dE_t, zero past each length.
    """
    n, d, t = bundle.delta_E.shape
    if embedding.shape[1] != d or batch.ids.shape != (n, t):
        raise ad.ShapeError(f"taylor_matrix: bundle {bundle.delta_E.shape}, "
                            f"embedding {embedding.shape}, batch {batch.ids.shape}")
    e_x = np.transpose(embedding[batch.ids], (0, 2, 1))                      # (N, d, T)
    own = np.einsum("ndt,ndt->nt", e_x, bundle.delta_E)                        # (N, T)
    neighbors = np.einsum("vd,ndt->nvt", embedding, bundle.delta_E)           # (N, V, T)
    matrix = bundle.rewards[:, None, None] + neighbors - own[:, None, :]
    return matrix * batch.mask()[:, None, :]


def reward_bundle(params: DiscriminatorParams, batch: SequenceBatch,
                  with_taylor: bool = True) -> RewardBundle:
    bundle = reward_with_embedding_grad(params, batch)
    if with_taylor:
        bundle.taylor_matrix = taylor_matrix(bundle, params.embedding, batch)
    return bundle


def taylor_remainder(params: DiscriminatorParams, batch: SequenceBatch, target: SequenceBatch,
                     scales: Sequence[float] = (1.0, 0.5)) -> np.ndarray:
    """
    First-order remainder R_E(E(x) + s D) - R(x) - s D . dE with D = E(y) - E(x).

    Returns:
        (len(scales), N) remainders
    """
    if target.ids.shape != batch.ids.shape or not np.array_equal(target.lengths, batch.lengths):
        raise ValueError("target must be a same-length substitution of batch")
    bundle = reward_with_embedding_grad(params, batch)
    e_x = params.embedding[batch.ids]
    step = (params.embedding[target.ids] - e_x) * batch.mask()[..., None]      # (N, T, d)
    linear = np.einsum("ntd,ndt->n", step, bundle.delta_E)
    out = []
    for s in scales:
        graph = Graph()
        w = params.nodes(graph, trainable=False)
        moved = reward_from_embedding(params, w, graph.constant(e_x + s * step), batch.lengths)
        out.append(moved.value - bundle.rewards - s * linear)
    return np.array(out)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass
class DiscriminatorLoss:
    total: Node
    classification: Node
    reg: Node
    sigmas: Dict[str, float]
    real_rewards: np.ndarray
    fake_rewards: np.ndarray


def spectral_penalty(weights: Dict[str, Node], power: Dict[str, PowerIterState],
                     sn_weight: float, iters: int = POWER_ITERS, update: bool = True
                     ) -> Tuple[Optional[Node], Dict[str, float]]:
    """(sn_weight / 2) * sum of squared largest singular values of the given kernels"""
    total = None
    sigmas = {}
    for name, kernel in weights.items():
        mat = kernel if kernel.value.ndim == 2 else ad.reshape(kernel, matrix_view(kernel.value).shape)
        sigma = spectral_norm(mat, power[name], iters, update=update)
        sigmas[name] = sigma.item()
        term = ad.square(sigma)
        total = term if total is None else total + term
    if total is None:
        return None, sigmas
    return total * (0.5 * sn_weight), sigmas


def embedding_penalty(embedding: Node, weight: float, max_norm: float) -> Node:
    """(weight / 2|V|) * sum_v max(||e_v||^2 - M^2, 0)"""
    sq_norms = ad.sum(ad.square(embedding), axis=1)
    hinge = ad.relu(sq_norms - max_norm ** 2)
    return ad.sum(hinge) * (weight / (2.0 * embedding.shape[0]))


def reg_loss(graph: Graph, params: DiscriminatorParams, iters: int = POWER_ITERS,
             update: bool = True) -> Tuple[Node, Dict[str, float]]:
    """Spectral penalty on every post-embedding kernel plus the embedding-norm hinge"""
    w = params.nodes(graph)
    kernels = {name: node for name, node in w.items() if name.endswith("/kernel")}
    spectral, sigmas = spectral_penalty(kernels, params.power, params.sn_weight, iters, update)
    emb = embedding_penalty(w["embedding"], params.embedding_weight, params.max_norm)
    return (emb if spectral is None else spectral + emb), sigmas


def classification_loss(real_logits: Node, fake_logits: Node) -> Node:
    """-mean log sigmoid(real) - mean log(1 - sigmoid(fake))"""
    return -(ad.mean(ad.log_sigmoid(real_logits)) + ad.mean(ad.log_sigmoid(-fake_logits)))


def d_loss_terms(graph: Graph, params: DiscriminatorParams, real: SequenceBatch,
                 fake: SequenceBatch, iters: int = POWER_ITERS,
                 update: bool = True) -> DiscriminatorLoss:
    if real.size == 0 or fake.size == 0:
        raise ValueError("d_loss needs non-empty real and fake batches")
    real_logits, _ = reward_node(graph, params, real)
    fake_logits, _ = reward_node(graph, params, fake)
    cls_loss = classification_loss(real_logits, fake_logits)
    reg, sigmas = reg_loss(graph, params, iters, update)
    return DiscriminatorLoss(cls_loss + reg, cls_loss, reg, sigmas,
                             real_logits.value.copy(), fake_logits.value.copy())


def d_loss(graph: Graph, params: DiscriminatorParams, real: SequenceBatch,
           fake: SequenceBatch, iters: int = POWER_ITERS, update: bool = True) -> Node:
    return d_loss_terms(graph, params, real, fake, iters, update).total


def d_step(params: DiscriminatorParams, real: SequenceBatch, fake: SequenceBatch,
           optimizer, iters: int = POWER_ITERS) -> DiscriminatorLoss:
    """One optimizer step on d_loss; returns the terms evaluated before the step"""
    graph = Graph()
    terms = d_loss_terms(graph, params, real, fake, iters)
    grads = graph.backward(terms.total)
    optimizer.step(params.tensors(), strip_prefix(grads.params(), "disc/"))
    return terms
