"""Downstream utility: classifiers trained on released data.

The analyst trains on encoded tokens with encoded labels and never sees the
key. Only the data owner can map predictions back to raw classes, so test
AUC is computed after ``decode_predictions`` against raw labels.
"""

from __future__ import annotations

import copy
import itertools
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .data import Dataset
from .errors import ConfigError, DomainError
from .metrics import rank_auc
from .nn import Adam, Dense, Rng
from .sau import SauStack
from .scheme import Scheme

FRACTIONS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0)


@dataclass(frozen=True)
class ClassifierConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 4
    epochs: int = 20
    batch: int = 32
    lr: float = 1e-3
    dropout: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.batch < 2:
            raise ConfigError(f"batch must be >= 2, got {self.batch}")


GRID = {"dropout": (0.0, 0.1), "weight_decay": (0.0, 1e-4)}


class Classifier(nn.Module):
    """Gated attention stack over tokens, mean pooled, linear head to k logits."""

    def __init__(self, in_dim: int, tokens: int, classes: int, cfg: ClassifierConfig, rng: Rng):
        super().__init__()
        self.cfg = cfg
        self.classes = classes
        self.proj = Dense(in_dim, cfg.dim, rng)
        self.stack = SauStack(cfg.dim, cfg.depth, rng, tokens=tokens, heads=cfg.heads)
        self.head = Dense(cfg.dim, classes, rng)
        self.dropout_rng: Rng | None = None

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        h = self.stack(self.proj(tokens)).mean(dim=1)
        p = self.cfg.dropout
        if self.training and p > 0 and self.dropout_rng is not None:
            keep = torch.from_numpy((self.dropout_rng.random(tuple(h.shape)) >= p).astype(np.float32))
            h = h * keep / (1.0 - p)
        return self.head(h)

    @torch.no_grad()
    def predict(self, tokens: torch.Tensor) -> np.ndarray:
        """Class probabilities, column c for label c + 1."""
        self.eval()
        return torch.softmax(self(tokens), dim=-1).double().numpy()


def class_auc(probs, labels, classes: int) -> float:
    """Binary AUC of the top class for k = 2, one-vs-rest macro average above."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if classes == 2:
        return rank_auc(probs[:, 1], labels == 2)
    scores = [rank_auc(probs[:, c], labels == c + 1) for c in range(classes) if 0 < (labels == c + 1).sum() < labels.size]
    if not scores:
        raise DomainError("AUC needs at least two classes present")
    return float(np.mean(scores))


def _check_classes(labels, classes: int, what: str) -> None:
    present = np.unique(np.asarray(labels))
    if present.size < 2:
        raise DomainError(f"{what} holds a single class ({present.tolist()}); need at least two")
    if present.min() < 1 or present.max() > classes:
        raise DomainError(f"{what} labels must lie in 1..{classes}")


def train_classifier(train_tokens, train_labels, dev_tokens, dev_labels, classes: int, cfg: ClassifierConfig, rng: Rng):
    """Cross-entropy training; returns the epoch checkpoint with the best dev AUC.

    Labels are whatever the analyst received (encoded when the scheme permutes
    them). Ties in dev AUC keep the earlier epoch.
    """
    _check_classes(train_labels, classes, "training set")
    x = torch.as_tensor(train_tokens, dtype=torch.float32)
    y = torch.as_tensor(np.asarray(train_labels, dtype=np.int64) - 1)
    dev_x = torch.as_tensor(dev_tokens, dtype=torch.float32)
    dev_y = np.asarray(dev_labels, dtype=np.int64)
    model = Classifier(x.shape[2], x.shape[1], classes, cfg, rng.spawn())
    model.dropout_rng = rng.spawn()
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = x.shape[0]
    batch = min(cfg.batch, n)
    best_auc, best_state, best_epoch = -1.0, None, -1
    curve = []
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.from_numpy(rng.shuffled(n))
        for start in range(0, n - batch + 1, batch):
            idx = order[start : start + batch]
            loss = nn.functional.cross_entropy(model(x[idx]), y[idx])
            loss.backward()
            opt.step()
        auc = class_auc(model.predict(dev_x), dev_y, classes)
        curve.append(auc)
        if auc > best_auc:
            best_auc, best_state, best_epoch = auc, copy.deepcopy(model.state_dict()), epoch
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, {"dev_auc": best_auc, "best_epoch": best_epoch, "dev_curve": curve}


def select_classifier(train_tokens, train_labels, dev_tokens, dev_labels, classes: int, cfg: ClassifierConfig, rng: Rng, grid=None):
    """Train one classifier per grid point and keep the best by dev AUC."""
    grid = GRID if grid is None else grid
    names = sorted(grid)
    best = None
    for values in itertools.product(*(grid[k] for k in names)):
        trial = replace(cfg, **dict(zip(names, values)))
        model, info = train_classifier(train_tokens, train_labels, dev_tokens, dev_labels, classes, trial, rng.spawn())
        info["hyper"] = dict(zip(names, values))
        if best is None or info["dev_auc"] > best[1]["dev_auc"]:
            best = (model, info)
    return best


@dataclass
class UtilityReport:
    scheme: str
    auc: float
    fraction: float = 1.0
    seed: int = 0
    task: str = "synthetic"
    dev_auc: float = float("nan")
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise DomainError(f"AUC {self.auc} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> UtilityReport:
        return cls(**d)


def evaluate_utility(classifier: Classifier, test_tokens, raw_labels, scheme: Scheme, key) -> float:
    """Decode predictions with the key, then score them against raw labels."""
    probs = classifier.predict(torch.as_tensor(test_tokens, dtype=torch.float32))
    decoded = scheme.decode_predictions(probs, key)
    return class_auc(decoded, raw_labels, classifier.classes)


@dataclass
class EncodedSplits:
    """Train/dev/test released under one key; test keeps its raw labels."""

    train_tokens: torch.Tensor
    train_labels: np.ndarray
    dev_tokens: torch.Tensor
    dev_labels: np.ndarray
    test_tokens: torch.Tensor
    test_raw_labels: np.ndarray
    key: object


def encode_splits(scheme: Scheme, train: Dataset, dev: Dataset, test: Dataset, rng: Rng) -> EncodedSplits:
    key = scheme.sample_key(rng)
    return EncodedSplits(
        scheme.encode_images(train.images, key, rng),
        scheme.encode_labels(train.labels, key),
        scheme.encode_images(dev.images, key, rng),
        scheme.encode_labels(dev.labels, key),
        scheme.encode_images(test.images, key, rng),
        np.asarray(test.labels),
        key,
    )


def run_utility(scheme: Scheme, train: Dataset, dev: Dataset, test: Dataset, cfg: ClassifierConfig, rng: Rng, seed: int = 0, grid=None) -> UtilityReport:
    splits = encode_splits(scheme, train, dev, test, rng)
    model, info = select_classifier(
        splits.train_tokens, splits.train_labels, splits.dev_tokens, splits.dev_labels, scheme.cfg.classes, cfg, rng, grid
    )
    auc = evaluate_utility(model, splits.test_tokens, splits.test_raw_labels, scheme, splits.key)
    return UtilityReport(scheme.name, auc, 1.0, seed, dev_auc=info["dev_auc"], hyper=info["hyper"])


def nested_subsets(labels, fractions, rng: Rng, classes: int | None = None) -> list[np.ndarray]:
    """One shuffled order cut at each fraction, so smaller subsets sit inside larger ones."""
    labels = np.asarray(labels)
    fractions = list(fractions)
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise DomainError(f"fractions must lie in (0, 1], got {fractions}")
    order = rng.shuffled(labels.size)
    present = np.unique(labels) if classes is None else np.arange(1, classes + 1)
    out = []
    for f in fractions:
        idx = np.sort(order[: int(round(f * labels.size))])
        counts = [(labels[idx] == c).sum() for c in present]
        if min(counts) < 2:
            raise DomainError(f"fraction {f} leaves fewer than 2 samples in some class ({counts})")
        out.append(idx)
    return out


def learning_curve(scheme: Scheme, train: Dataset, dev: Dataset, test: Dataset, fractions, cfg: ClassifierConfig, rng: Rng, seed: int = 0, grid=None) -> list[UtilityReport]:
    """Independent classifier per training fraction, all under one released key."""
    splits = encode_splits(scheme, train, dev, test, rng)
    subsets = nested_subsets(train.labels, fractions, rng)
    reports = []
    for f, idx in zip(fractions, subsets):
        sel = torch.from_numpy(idx)
        model, info = select_classifier(
            splits.train_tokens[sel], splits.train_labels[idx], splits.dev_tokens, splits.dev_labels, scheme.cfg.classes, cfg, rng.spawn(), grid
        )
        auc = evaluate_utility(model, splits.test_tokens, splits.test_raw_labels, scheme, splits.key)
        reports.append(UtilityReport(scheme.name, auc, float(f), seed, dev_auc=info["dev_auc"], hyper=info["hyper"]))
    return reports


def utility_table(reports) -> str:
    """Rows are schemes, columns are tasks plus their average (mean over seeds)."""
    tasks = sorted({r.task for r in reports})
    schemes = list(dict.fromkeys(r.scheme for r in reports))
    width = max([len("scheme")] + [len(s) for s in schemes])
    lines = ["  ".join(["scheme".ljust(width)] + [t.rjust(9) for t in tasks] + ["avg".rjust(9)])]
    for s in schemes:
        cells = []
        for t in tasks:
            vals = [r.auc for r in reports if r.scheme == s and r.task == t]
            cells.append(float(np.mean(vals)) if vals else float("nan"))
        avg = float(np.nanmean(cells)) if not all(np.isnan(cells)) else float("nan")
        lines.append("  ".join([s.ljust(width)] + [f"{c:9.3f}" for c in cells] + [f"{avg:9.3f}"]))
    return "\n".join(lines)
