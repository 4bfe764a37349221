"""Contrastive re-identification attacker.

Raw and encoded samples go through separate instance encoders (gated
attention stacks over patch tokens with an optional learned label token,
pooled to one vector), then through one shared set encoder that attends over
the whole batch. Pairs are scored by cosine similarity, exponentiated and
normalised jointly over all n*m pairs.

Pooling defaults to a linear map of the flattened token grid. Every patch is
encoded under its own key, so averaging tokens buries the per-patch
structure the attacker has to compare; ``pool="mean"`` keeps the plain
average.

A released set is scored in one pass with batch norm using the statistics of
that set. Each key shifts the feature statistics, so running averages
collected over many training keys fit none of them.

The attacker only ever sees a scheme through ``sample_key`` and
``encode_images``: it can simulate the scheme but never reads the data
owner's key.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DomainError, NumericError
from .metrics import PairScoreMatrix
from .nn import Adam, Dense, Rng, load_module_tensors, module_tensors, set_statistics
from .sau import SauStack
from .scheme import Scheme, patchify


POOLS = ("flatten", "mean")


@dataclass(frozen=True)
class AttackerConfig:
    dim: int = 64
    depth: int = 3
    set_depth: int = 1
    heads: int = 4
    use_labels: bool = False
    classes: int = 2
    lr: float = 1e-3
    batch: int = 32
    pool: str = "flatten"

    def __post_init__(self):
        if self.pool not in POOLS:
            raise ConfigError(f"pool must be one of {POOLS}, got {self.pool!r}")
        if self.dim % self.heads:
            raise ConfigError(f"attacker dim {self.dim} is not divisible by {self.heads} heads")
        if self.batch < 2:
            raise ConfigError(f"attacker batch must be >= 2, got {self.batch}")


class InstanceEncoder(nn.Module):
    def __init__(self, in_dim: int, tokens: int, cfg: AttackerConfig, rng: Rng):
        super().__init__()
        self.use_labels = cfg.use_labels
        self.classes = cfg.classes
        self.proj = Dense(in_dim, cfg.dim, rng)
        if cfg.use_labels:
            self.label_tokens = nn.Parameter(rng.normal((cfg.classes, cfg.dim), std=1.0))
        width = tokens + int(cfg.use_labels)
        self.stack = SauStack(cfg.dim, cfg.depth, rng, tokens=width, heads=cfg.heads)
        self.pool = Dense(width * cfg.dim, cfg.dim, rng) if cfg.pool == "flatten" else None

    def forward(self, tokens: torch.Tensor, labels=None) -> torch.Tensor:
        h = self.proj(tokens)
        if self.use_labels:
            if labels is None:
                raise DomainError("this attacker was built to consume labels")
            labels = torch.as_tensor(np.asarray(labels, dtype=np.int64))
            if labels.numel() and (labels.min() < 1 or labels.max() > self.classes):
                raise DomainError(f"label ids must lie in 1..{self.classes}")
            h = torch.cat([h, self.label_tokens[labels - 1][:, None, :]], dim=1)
        h = self.stack(h)
        if self.pool is None:
            return h.mean(dim=1)
        return self.pool(h.reshape(h.shape[0], -1))


class Attacker(nn.Module):
    def __init__(self, raw_dim: int, enc_dim: int, tokens: int, cfg: AttackerConfig, rng: Rng):
        super().__init__()
        self.cfg = cfg
        self.tokens = tokens
        self.raw = InstanceEncoder(raw_dim, tokens, cfg, rng)
        self.enc = InstanceEncoder(enc_dim, tokens, cfg, rng)
        self.set = SauStack(cfg.dim, cfg.set_depth, rng, tokens=None, heads=cfg.heads)

    @classmethod
    def for_scheme(cls, scheme: Scheme, cfg: AttackerConfig, rng: Rng) -> Attacker:
        return cls(scheme.cfg.patch_dim, scheme.token_dim, scheme.cfg.tokens, cfg, rng)

    def instance_encode(self, tokens: torch.Tensor, labels=None, which: str = "raw") -> torch.Tensor:
        if which not in ("raw", "encoded"):
            raise ConfigError(f"which must be 'raw' or 'encoded', got {which!r}")
        encoder = self.raw if which == "raw" else self.enc
        return encoder(tokens, labels)

    def set_encode(self, h: torch.Tensor) -> torch.Tensor:
        return self.set(h[None])[0]

    def represent(self, tokens, labels=None, which: str = "raw") -> torch.Tensor:
        return self.set_encode(self.instance_encode(tokens, labels, which))

    def log_scores(self, raw_tokens, raw_labels, enc_tokens, enc_labels) -> torch.Tensor:
        rx = self.represent(raw_tokens, raw_labels, "raw")
        rz = self.represent(enc_tokens, enc_labels, "encoded")
        return pair_log_scores(rx, rz)

    def tensors(self) -> dict:
        return module_tensors(self, "attacker")

    def metadata(self) -> dict:
        shape = {"raw_dim": self.raw.proj.weight.shape[0], "enc_dim": self.enc.proj.weight.shape[0], "tokens": self.tokens}
        return {"attacker_config": json.dumps(asdict(self.cfg), sort_keys=True), "attacker_shape": json.dumps(shape, sort_keys=True)}

    @classmethod
    def from_tensors(cls, tensors: dict, metadata: dict) -> Attacker:
        try:
            cfg = AttackerConfig(**json.loads(metadata["attacker_config"]))
            shape = json.loads(metadata["attacker_shape"])
        except KeyError:
            raise ConfigError("container lacks attacker metadata") from None
        attacker = cls(shape["raw_dim"], shape["enc_dim"], shape["tokens"], cfg, Rng(0))
        load_module_tensors(attacker, tensors, "attacker")
        attacker.eval()
        return attacker


def cosine_matrix(rx: torch.Tensor, rz: torch.Tensor) -> torch.Tensor:
    nx = rx.norm(dim=1, keepdim=True)
    nz = rz.norm(dim=1, keepdim=True)
    if bool((nx == 0).any()) or bool((nz == 0).any()):
        raise NumericError("cosine similarity of a zero-norm representation")
    return (rx / nx) @ (rz / nz).T


def pair_log_scores(rx: torch.Tensor, rz: torch.Tensor) -> torch.Tensor:
    """log p-hat for every pair: softmax of cosine similarity over all n*m pairs."""
    sim = cosine_matrix(rx, rz)
    return torch.log_softmax(sim.reshape(-1), dim=0).reshape(sim.shape)


def pair_scores(rx: torch.Tensor, rz: torch.Tensor, matches=None) -> PairScoreMatrix:
    sim = cosine_matrix(rx.double(), rz.double()).detach()
    flat = sim.reshape(-1)
    p = torch.exp(flat - flat.max())
    p = (p / p.sum()).reshape(sim.shape).numpy()
    if matches is None:
        n = min(p.shape)
        matches = np.stack([np.arange(n), np.arange(n)], axis=1)
    return PairScoreMatrix(p, matches)


def contrastive_loss(log_p: torch.Tensor, matches=None) -> torch.Tensor:
    """Negative log-likelihood of the true matches (diagonal by default)."""
    if matches is None:
        return -torch.diagonal(log_p).sum()
    matches = torch.as_tensor(np.asarray(matches, dtype=np.int64))
    return -log_p[matches[:, 0], matches[:, 1]].sum()


def reid_loss(S: PairScoreMatrix) -> float:
    matched = S.scores[S.matches[:, 0], S.matches[:, 1]]
    if np.any(matched <= 0):
        return float("inf")
    return float(-np.log(matched).sum())


@dataclass
class AttackLog:
    epoch_loss: list[float]
    key_seeds: list[int]


def train_attacker(
    scheme: Scheme,
    images: np.ndarray,
    labels,
    epochs: int,
    rng: Rng,
    cfg: AttackerConfig | None = None,
    attacker: Attacker | None = None,
) -> tuple[Attacker, AttackLog]:
    """Fit the attacker on its own evaluation images, a fresh key per batch."""
    cfg = cfg or (attacker.cfg if attacker is not None else AttackerConfig())
    attacker = attacker or Attacker.for_scheme(scheme, cfg, rng.spawn())
    opt = Adam(attacker.parameters(), lr=cfg.lr)
    images = np.asarray(images, dtype=np.float32)
    labels = None if labels is None else np.asarray(labels)
    n = images.shape[0]
    batch = min(cfg.batch, n)
    log = AttackLog([], [])
    attacker.train()
    for _ in range(epochs):
        order = rng.shuffled(n)
        total = 0.0
        for start in range(0, n - batch + 1, batch):
            idx = order[start : start + batch]
            xb = images[idx]
            key = scheme.sample_key(rng)
            if key is not None:
                log.key_seeds.append(int(getattr(key, "seed", 0)))
            z = scheme.encode_images(xb, key, rng)
            yb = zb = None
            if cfg.use_labels:
                yb = labels[idx]
                zb = scheme.encode_labels(yb, key)
            loss = contrastive_loss(attacker.log_scores(patchify(xb, scheme.cfg.patch), yb, z, zb))
            loss.backward()
            opt.step()
            total += float(loss.detach())
        log.epoch_loss.append(total)
    attacker.eval()
    return attacker, log


@torch.no_grad()
def score_encodings(attacker: Attacker, raw_tokens, raw_labels, enc_tokens, enc_labels, matches) -> PairScoreMatrix:
    """Score an already released set; nothing about the key is needed."""
    attacker.eval()
    with set_statistics(attacker):
        rx = attacker.represent(raw_tokens, raw_labels, "raw")
        rz = attacker.represent(enc_tokens, enc_labels, "encoded")
    return pair_scores(rx, rz, matches)


def evaluate_attacker(
    attacker: Attacker,
    scheme: Scheme,
    images: np.ndarray,
    labels,
    n_eval: int,
    data_samples: int,
    keys: int,
    rng: Rng,
) -> list[PairScoreMatrix]:
    """Score a (data sample x key) grid of trials.

    Each trial encodes its whole evaluation subset with one fresh key and
    shuffles the encoded side, so true matches are off the diagonal.
    """
    images = np.asarray(images, dtype=np.float32)
    if n_eval > images.shape[0]:
        raise ConfigError(f"n_eval={n_eval} exceeds dataset size {images.shape[0]}")
    labels = None if labels is None else np.asarray(labels)
    out = []
    for s in range(data_samples):
        idx = np.sort(rng.choice(images.shape[0], n_eval))
        x = images[idx]
        y = None if labels is None else labels[idx]
        for k in range(keys):
            key_seed = rng.next_seed()
            key = scheme.sample_key(Rng(key_seed))
            z = scheme.encode_images(x, key, rng)
            perm = rng.shuffled(n_eval)
            z = z[torch.from_numpy(perm)]
            zy = None if y is None else scheme.encode_labels(y, key)[perm]
            matches = np.stack([perm, np.arange(n_eval)], axis=1)
            matches = matches[np.argsort(matches[:, 0])]
            S = score_encodings(attacker, patchify(x, scheme.cfg.patch), y, z, zy, matches)
            S.meta = {"data_sample": s, "key": k, "key_seed": key_seed, "n": n_eval}
            out.append(S)
    return out


class UniformAttacker:
    """Scores every pair equally; the no-information reference point."""

    def score(self, n: int, m: int | None = None) -> PairScoreMatrix:
        m = n if m is None else m
        return PairScoreMatrix.diagonal(np.full((n, m), 1.0 / (n * m)))


def evaluate_uniform(n_eval: int, data_samples: int, keys: int) -> list[PairScoreMatrix]:
    out = []
    for s in range(data_samples):
        for k in range(keys):
            S = UniformAttacker().score(n_eval)
            S.meta = {"data_sample": s, "key": k, "n": n_eval}
            out.append(S)
    return out
