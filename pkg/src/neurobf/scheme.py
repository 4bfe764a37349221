"""Keyed obfuscation encoding and the scheme interface shared by all encoders.

An encoding scheme turns raw images into released token grids and raw labels
into released labels. The keyed obfuscation scheme interleaves public trained
obfuscator blocks with private random layers (one random linear map per patch
followed by SELU and layer norm) and permutes label identities. The random
weights and the label permutation form the data owner's key.

Every scheme exposes the same surface (``sample_key``, ``encode_images``,
``encode_labels``, ``decode_predictions``) so attack and utility code never
special-cases a scheme. Keyless schemes return ``None`` from ``sample_key``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DomainError
from .nn import Dense, Rng, layer_norm, load_module_tensors, module_tensors, selu
from .sau import SauStack


@dataclass(frozen=True)
class SchemeConfig:
    height: int = 32
    width: int = 32
    patch: int = 8
    blocks: int = 3
    dim: int = 64
    classes: int = 2
    block_depth: int = 1
    heads: int = 4

    def __post_init__(self):
        if self.patch < 1 or self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"patch size {self.patch} must divide image size {self.height}x{self.width}")
        if self.blocks < 1:
            raise ConfigError(f"need at least one block, got {self.blocks}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.classes < 1:
            raise ConfigError(f"classes must be >= 1, got {self.classes}")

    @property
    def tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> SchemeConfig:
        return cls(**json.loads(text))


def as_tensor(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images.float()
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))


def patchify(images, patch: int) -> torch.Tensor:
    """(n, H, W) -> (n, t, patch**2), patches in row-major grid order."""
    x = as_tensor(images)
    n, h, w = x.shape
    if h % patch or w % patch:
        raise ConfigError(f"patch size {patch} does not divide {h}x{w}")
    gh, gw = h // patch, w // patch
    return x.reshape(n, gh, patch, gw, patch).permute(0, 1, 3, 2, 4).reshape(n, gh * gw, patch * patch)


def unpatchify(tokens: torch.Tensor, height: int, width: int, patch: int) -> torch.Tensor:
    n, t, f = tokens.shape
    gh, gw = height // patch, width // patch
    if t != gh * gw or f != patch * patch:
        raise ConfigError(f"cannot unpatchify {tuple(tokens.shape)} into {height}x{width} with patch {patch}")
    return tokens.reshape(n, gh, gw, patch, patch).permute(0, 1, 3, 2, 4).reshape(n, height, width)


class Obfuscator(nn.Module):
    """Public trained weights: a patch projection plus one stack per block."""

    def __init__(self, cfg: SchemeConfig, rng: Rng):
        super().__init__()
        self.cfg = cfg
        self.proj = Dense(cfg.patch_dim, cfg.dim, rng)
        self.blocks = nn.ModuleList(
            SauStack(cfg.dim, cfg.block_depth, rng, tokens=cfg.tokens, heads=cfg.heads) for _ in range(cfg.blocks)
        )

    def tensors(self) -> dict:
        return module_tensors(self, "scheme")

    def metadata(self) -> dict:
        return {"scheme_config": self.cfg.to_json()}

    @classmethod
    def from_tensors(cls, tensors: dict, metadata: dict) -> Obfuscator:
        try:
            cfg = SchemeConfig.from_json(metadata["scheme_config"])
        except KeyError:
            raise ConfigError("container lacks scheme_config metadata") from None
        obf = cls(cfg, Rng(0))
        load_module_tensors(obf, tensors, "scheme")
        return obf


@dataclass
class EncoderKey:
    seed: int
    weights: torch.Tensor  # (blocks, tokens, dim, dim)
    perm: np.ndarray  # perm[i] = encoded class index of raw class index i (0-based)

    def tensors(self) -> dict:
        return {
            "key/weights": self.weights.numpy(),
            "key/perm": self.perm.astype(np.uint32),
            "key/seed": np.array([self.seed & 0xFFFFFFFF, self.seed >> 32], dtype=np.uint32),
        }

    @classmethod
    def from_tensors(cls, tensors: dict) -> EncoderKey:
        lo, hi = (int(v) for v in tensors["key/seed"])
        return cls(lo | (hi << 32), torch.from_numpy(np.array(tensors["key/weights"])), np.array(tensors["key/perm"], dtype=np.int64))


def key_from_seed(seed: int, cfg: SchemeConfig) -> EncoderKey:
    r = Rng(seed)
    weights = r.normal((cfg.blocks, cfg.tokens, cfg.dim, cfg.dim))
    perm = r.fisher_yates(cfg.classes)
    return EncoderKey(seed, weights, perm)


def sample_key(rng: Rng, cfg: SchemeConfig) -> EncoderKey:
    return key_from_seed(rng.next_seed(), cfg)


def keyed_layer(h: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Separate random linear map per patch, then SELU and layer norm."""
    return layer_norm(selu(torch.einsum("ntd,tde->nte", h, weights)))


def encode_images(images, obfuscator: Obfuscator, key: EncoderKey, training: bool = False) -> torch.Tensor:
    cfg = obfuscator.cfg
    x = as_tensor(images)
    if x.ndim != 3 or x.shape[1:] != (cfg.height, cfg.width):
        raise ConfigError(f"expected images of shape (n, {cfg.height}, {cfg.width}), got {tuple(x.shape)}")
    if key.weights.shape != (cfg.blocks, cfg.tokens, cfg.dim, cfg.dim):
        raise ConfigError(f"key weights {tuple(key.weights.shape)} do not fit the scheme")
    obfuscator.train(training)
    h = obfuscator.proj(patchify(x, cfg.patch))
    for b, block in enumerate(obfuscator.blocks):
        h = keyed_layer(block(h), key.weights[b])
    return h


def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > k):
        raise DomainError(f"labels must lie in 1..{k}")
    return labels


def encode_labels(labels, key: EncoderKey) -> np.ndarray:
    labels = _check_labels(labels, key.perm.size)
    return (key.perm[labels - 1] + 1).astype(np.uint32)


def decode_labels(encoded, key: EncoderKey) -> np.ndarray:
    encoded = _check_labels(encoded, key.perm.size)
    inverse = np.argsort(key.perm)
    return (inverse[encoded - 1] + 1).astype(np.uint32)


def decode_predictions(probs, key: EncoderKey) -> np.ndarray:
    """Column i of the result is the probability of raw class i + 1."""
    probs = np.asarray(probs)
    if probs.shape[-1] != key.perm.size:
        raise DomainError(f"expected {key.perm.size} class probabilities, got {probs.shape[-1]}")
    return probs[..., key.perm]


@dataclass
class Transformation:
    obfuscator: Obfuscator
    key: EncoderKey

    def encode_images(self, images, training: bool = False) -> torch.Tensor:
        return encode_images(images, self.obfuscator, self.key, training)

    def encode_labels(self, labels) -> np.ndarray:
        return encode_labels(labels, self.key)

    def decode_labels(self, encoded) -> np.ndarray:
        return decode_labels(encoded, self.key)

    def decode_predictions(self, probs) -> np.ndarray:
        return decode_predictions(probs, self.key)


class Scheme:
    """Common surface of every encoding scheme.

    ``encode_images`` returns a released token grid ``(n, t, token_dim)``.
    ``rng`` feeds per-sample randomness (noise, mixing); keys carry the rest.
    """

    name = "scheme"
    keyed = False

    def __init__(self, cfg: SchemeConfig):
        self.cfg = cfg

    @property
    def token_dim(self) -> int:
        return self.cfg.patch_dim

    def sample_key(self, rng: Rng):
        return None

    def encode_images(self, images, key, rng: Rng) -> torch.Tensor:
        raise NotImplementedError

    def encode_labels(self, labels, key) -> np.ndarray:
        return _check_labels(labels, self.cfg.classes).astype(np.uint32)

    def decode_predictions(self, probs, key) -> np.ndarray:
        return np.asarray(probs)

    def describe(self) -> dict:
        return {"name": self.name}


class IdentityScheme(Scheme):
    """Releases raw pixels (as patches) and raw labels."""

    name = "identity"

    def encode_images(self, images, key, rng):
        return patchify(images, self.cfg.patch)


class KeyedObfuscationScheme(Scheme):
    """Obfuscator blocks interleaved with keyed random layers.

    ``label_encoding=False`` releases raw labels (image encoding only).
    """

    keyed = True

    def __init__(self, obfuscator: Obfuscator, label_encoding: bool = True, name: str = "obfuscator"):
        super().__init__(obfuscator.cfg)
        self.obfuscator = obfuscator
        self.label_encoding = label_encoding
        self.name = name

    @property
    def token_dim(self) -> int:
        return self.cfg.dim

    def sample_key(self, rng: Rng) -> EncoderKey:
        return sample_key(rng, self.cfg)

    @torch.no_grad()
    def encode_images(self, images, key, rng=None):
        return encode_images(images, self.obfuscator, key, training=False)

    def encode_labels(self, labels, key):
        if not self.label_encoding:
            return super().encode_labels(labels, key)
        return encode_labels(labels, key)

    def decode_predictions(self, probs, key):
        if not self.label_encoding:
            return np.asarray(probs)
        return decode_predictions(probs, key)

    def describe(self) -> dict:
        return {"name": self.name, "label_encoding": self.label_encoding, **json.loads(self.cfg.to_json())}
