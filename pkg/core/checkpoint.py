"""
Text GAN Toolkit - Checkpoints

A checkpoint is a ZIP archive:

    manifest.json           format version, role, step, vocabulary tokens,
                            model dimensions, tensor names and shapes
    gen/<name>.npy          generator tensors
    disc/<name>.npy         discriminator tensors (role "gan" only)
    disc/power/<name>.u.npy persistent power-iteration vectors

Members carry a fixed timestamp and are written in sorted order, so equal
states produce byte-identical files.
"""

import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional
from zipfile import ZIP_DEFLATED, BadZipFile, ZipFile, ZipInfo

import numpy as np

from config.settings import APP_NAME, APP_VERSION, CHECKPOINT_FORMAT_VERSION
from .discriminator import DiscriminatorParams, format_layers, parse_layers
from .generator import TENSOR_NAMES, GeneratorParams, logit_mask
from .spectral import PowerIterState
from .vocab import Vocabulary

logger = logging.getLogger("Checkpoint")

ROLES = ("gan", "lm")
_FIXED_TIME = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    """Unreadable, incompatible or unwritable checkpoint"""


@dataclass
class Checkpoint:
    """
    Everything needed to resume sampling or training.

    state holds small JSON-serializable extras (baseline, optimizer step).
    """
    role: str
    vocab: Vocabulary
    generator: GeneratorParams
    discriminator: Optional[DiscriminatorParams] = None
    step: int = 0
    state: Dict[str, Any] = field(default_factory=dict)


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(array, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def _tensors(ckpt: Checkpoint) -> Dict[str, np.ndarray]:
    out = {f"gen/{k}": v for k, v in ckpt.generator.tensors().items()}
    if ckpt.discriminator is not None:
        out.update({f"disc/{k}": v for k, v in ckpt.discriminator.tensors().items()})
        for name, state in ckpt.discriminator.power.items():
            out[f"disc/power/{name}.u"] = state.u
            out[f"disc/power/{name}.v"] = state.v
    return out


def _manifest(ckpt: Checkpoint, tensors: Dict[str, np.ndarray]) -> Dict[str, Any]:
    gen = ckpt.generator
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "app": f"{APP_NAME} {APP_VERSION}",
        "role": ckpt.role,
        "step": int(ckpt.step),
        "vocab": list(ckpt.vocab.tokens),
        "generator": {"embedding_dim": gen.embedding_dim, "hidden_dim": gen.hidden_dim},
        "tensors": {name: list(arr.shape) for name, arr in tensors.items()},
        "state": ckpt.state,
    }
    disc = ckpt.discriminator
    if disc is not None:
        manifest["discriminator"] = {
            "embedding_dim": disc.embedding_dim,
            "layers": format_layers(disc.layers),
            "activation": disc.activation,
            "sn_weight": disc.sn_weight,
            "embedding_weight": disc.embedding_weight,
            "max_norm": disc.max_norm,
            "weights": list(disc.weights),
        }
    return manifest


def save_checkpoint(path: str, ckpt: Checkpoint) -> str:
    """
    Write ckpt to path (atomically, through a temporary file).

    Returns:
        path
    """
    if ckpt.role not in ROLES:
        raise CheckpointError(f"unknown checkpoint role '{ckpt.role}'")
    if ckpt.role == "gan" and ckpt.discriminator is None:
        raise CheckpointError("a gan checkpoint needs a discriminator")
    tensors = _tensors(ckpt)
    manifest = json.dumps(_manifest(ckpt, tensors), sort_keys=True, indent=1).encode("utf-8")
    tmp_path = path + ".tmp"
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with ZipFile(tmp_path, "w") as zipf:
            zipf.writestr(ZipInfo("manifest.json", _FIXED_TIME), manifest, ZIP_DEFLATED)
            for name in sorted(tensors):
                zipf.writestr(ZipInfo(f"{name}.npy", _FIXED_TIME), _npy_bytes(tensors[name]),
                              ZIP_DEFLATED)
        os.replace(tmp_path, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved {ckpt.role} checkpoint at step {ckpt.step}: {path}")
    return path


def _read(zipf: ZipFile, name: str, shape) -> np.ndarray:
    with zipf.open(f"{name}.npy") as f:
        array = np.load(io.BytesIO(f.read()), allow_pickle=False)
    if list(array.shape) != list(shape):
        raise CheckpointError(f"tensor {name} has shape {array.shape}, manifest says {shape}")
    return array


def load_checkpoint(path: str, vocab: Optional[Vocabulary] = None) -> Checkpoint:
    """
    Read a checkpoint.

    Args:
        vocab: when given, must equal the stored vocabulary
    """
    try:
        with ZipFile(path, "r") as zipf:
            manifest = json.loads(zipf.read("manifest.json").decode("utf-8"))
            version = manifest.get("format_version")
            if version != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(f"{path}: format version {version}, "
                                      f"expected {CHECKPOINT_FORMAT_VERSION}")
            shapes = manifest["tensors"]
            tensors = {name: _read(zipf, name, shape) for name, shape in shapes.items()}
    except (OSError, KeyError, BadZipFile, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    stored = Vocabulary(manifest["vocab"])
    if vocab is not None and list(vocab.tokens) != list(stored.tokens):
        raise CheckpointError(f"{path}: vocabulary does not match the checkpoint")

    gen_fields = {k[len("gen/"):]: v for k, v in tensors.items() if k.startswith("gen/")}
    missing = set(TENSOR_NAMES) - set(gen_fields)
    if missing:
        raise CheckpointError(f"{path}: missing generator tensors {sorted(missing)}")
    generator = GeneratorParams(**gen_fields, logit_mask=logit_mask(stored.emittable_mask()))

    discriminator = None
    if "discriminator" in manifest:
        meta = manifest["discriminator"]
        weights = {k[len("disc/"):]: v for k, v in tensors.items()
                   if k.startswith("disc/") and not k.startswith("disc/power/")}
        power = {}
        for key in tensors:
            if key.startswith("disc/power/") and key.endswith(".u"):
                name = key[len("disc/power/"):-len(".u")]
                power[name] = PowerIterState(tensors[key], tensors[f"disc/power/{name}.v"])
        discriminator = DiscriminatorParams(
            embedding=weights.pop("embedding"), weights={k: weights[k] for k in meta["weights"]},
            layers=parse_layers(meta["layers"]), power=power, activation=meta["activation"],
            sn_weight=meta["sn_weight"], embedding_weight=meta["embedding_weight"],
            max_norm=meta["max_norm"])
    logger.info(f"Loaded {manifest['role']} checkpoint (step {manifest['step']}) from {path}")
    return Checkpoint(manifest["role"], stored, generator, discriminator,
                      manifest["step"], manifest.get("state", {}))
