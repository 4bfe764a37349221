"""Synthetic image datasets, stratified splits, class balancing and PGM export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import load_container, save_container
from .errors import ConfigError, DataError, InsufficientDataError
from .nn import Rng

NEGATIVE = 1
POSITIVE = 2


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n,) uint32, classes 1..k

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        if self.images.ndim != 3:
            raise ConfigError(f"images must be (n, H, W), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ConfigError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx])

    def to_tensors(self, prefix: str = "data") -> dict:
        return {f"{prefix}/images": self.images, f"{prefix}/labels": self.labels}

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str = "data") -> Dataset:
        try:
            return cls(tensors[f"{prefix}/images"], tensors[f"{prefix}/labels"])
        except KeyError as exc:
            raise DataError(f"container has no {exc.args[0]!r}") from None

    def save(self, path, metadata: dict | None = None) -> None:
        save_container(path, self.to_tensors(), metadata)

    @classmethod
    def load(cls, path) -> Dataset:
        tensors, _ = load_container(path)
        return cls.from_tensors(tensors)


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 512
    height: int = 32
    width: int = 32
    seed: int = 0
    rule: str = "bright-blob-presence"
    texture_waves: int = 6
    texture_amplitude: float = 0.08
    grain: float = 0.01
    feature_strength: float = 0.45


def _texture(rng: Rng, h: int, w: int, spec: SyntheticSpec) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full((h, w), rng.uniform((), 0.15, 0.45))
    for _ in range(spec.texture_waves):
        fy, fx = rng.uniform((2,), -4.0, 4.0)
        phase = rng.uniform((), 0.0, 2 * np.pi)
        amp = rng.uniform((), 0.0, spec.texture_amplitude)
        img += amp * np.cos(2 * np.pi * (fy * yy / h + fx * xx / w) + phase)
    img += spec.grain * rng.normal((h, w)).numpy()
    return img


def _blob(rng: Rng, h: int, w: int, strength: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = rng.uniform((), 0.25 * h, 0.75 * h)
    cx = rng.uniform((), 0.25 * w, 0.75 * w)
    ry, rx = rng.uniform((2,), 0.1 * h, 0.2 * h)
    r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    return strength * rng.uniform((), 0.8, 1.2) / (1.0 + np.exp(6.0 * (r2 - 1.0)))


def _stripe(rng: Rng, h: int, w: int, strength: float) -> np.ndarray:
    xx = np.mgrid[0:h, 0:w][1].astype(np.float64)
    cx = rng.uniform((), 0.2 * w, 0.8 * w)
    half = rng.uniform((), 0.05 * w, 0.1 * w)
    return strength * rng.uniform((), 0.8, 1.2) / (1.0 + np.exp(3.0 * (np.abs(xx - cx) - half)))


RULES = {"bright-blob-presence": _blob, "bright-stripe-presence": _stripe}


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Textured images; the positive class carries the rule's bright feature.

    Exactly ``n // 2`` images are positive (label 2). Every image gets its own
    continuous background texture, so instances are distinguishable.
    """
    if spec.n < 4:
        raise ConfigError(f"need n >= 4, got {spec.n}")
    if spec.height < 2 or spec.width < 2:
        raise ConfigError(f"invalid image size {spec.height}x{spec.width}")
    if spec.rule not in RULES:
        raise ConfigError(f"unknown rule {spec.rule!r}; choose from {sorted(RULES)}")
    rng = Rng(spec.seed)
    labels = np.full(spec.n, NEGATIVE, dtype=np.uint32)
    labels[rng.choice(spec.n, spec.n // 2)] = POSITIVE
    feature = RULES[spec.rule]
    images = np.empty((spec.n, spec.height, spec.width), dtype=np.float32)
    for i in range(spec.n):
        img = _texture(rng, spec.height, spec.width, spec)
        if labels[i] == POSITIVE:
            img += feature(rng, spec.height, spec.width, spec.feature_strength)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels)


def _largest_remainder(total: int, ratios) -> np.ndarray:
    raw = np.asarray(ratios, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _split_counts(class_sizes, ratios) -> np.ndarray:
    """Class-by-split count table with floor/ceil cells and exact margins.

    Split totals come from largest-remainder rounding of n; the leftover units
    after flooring every cell are placed greedily (Ryser's construction), row
    with most leftovers first, into the columns with most remaining demand.
    """
    sizes = np.asarray(class_sizes, dtype=np.int64)
    ratios = np.asarray(ratios, dtype=np.float64)
    exact = sizes[:, None] * ratios[None, :]
    counts = np.floor(exact).astype(np.int64)
    frac = exact - counts
    rows = sizes - counts.sum(1)
    cols = _largest_remainder(int(sizes.sum()), ratios) - counts.sum(0)
    for c in np.argsort(-rows, kind="stable"):
        order = sorted(range(ratios.size), key=lambda j: (-cols[j], -frac[c, j], j))
        for j in order[: rows[c]]:
            counts[c, j] += 1
            cols[j] -= 1
    return counts


def split_indices(labels: np.ndarray, ratios, rng: Rng) -> list[np.ndarray]:
    """Disjoint, covering, label-stratified index split.

    Every class contributes floor or ceil of its proportional share to each
    split, so per-split class counts stay within one sample of proportional
    while split sizes match the largest-remainder rounding of n.
    """
    ratios = list(ratios)
    if not ratios or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == c) for c in classes]
    table = _split_counts([m.size for m in members], ratios)
    parts: list[list[np.ndarray]] = [[] for _ in ratios]
    for m, row in zip(members, table):
        m = m[rng.shuffled(m.size)]
        bounds = np.concatenate([[0], np.cumsum(row)])
        for j, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
            parts[j].append(m[a:b])
    return [np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts]


def split(dataset: Dataset, ratios, rng: Rng) -> list[Dataset]:
    return [dataset.subset(idx) for idx in split_indices(dataset.labels, ratios, rng)]


def class_balance(dataset: Dataset, rng: Rng, positive: int = POSITIVE) -> Dataset:
    """Keep every positive and one distinct randomly chosen negative for each."""
    pos = np.flatnonzero(dataset.labels == positive)
    neg = np.flatnonzero(dataset.labels != positive)
    if pos.size == 0 or neg.size == 0:
        raise InsufficientDataError("class balancing needs at least one positive and one negative")
    if neg.size < pos.size:
        raise InsufficientDataError(f"{pos.size} positives but only {neg.size} negatives to pair with")
    chosen = neg[rng.choice(neg.size, pos.size)]
    return dataset.subset(np.sort(np.concatenate([pos, chosen])))


def to_gray8(images: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 0..255 with clamping and round-half-even."""
    return np.rint(np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pgm(image: np.ndarray) -> bytes:
    pixels = to_gray8(image)
    if pixels.ndim != 2:
        raise ConfigError(f"a PGM holds one 2-D image, got shape {pixels.shape}")
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise DataError(f"{path} is not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    body = raw[len(raw) - w * h :]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def pgm_name(prefix: str, index: int) -> str:
    return f"{prefix}_{index:05d}.pgm"


def export_images(images, directory, prefix: str = "img") -> list[Path]:
    images = np.asarray(images)
    if images.ndim != 3:
        raise ConfigError(f"export expects (n, H, W), got {images.shape}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = directory / pgm_name(prefix, i)
        write_pgm(p, img)
        paths.append(p)
    return paths


def rescale_for_display(images: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]; constant images map to 0.5."""
    images = np.asarray(images, dtype=np.float64)
    lo = images.min(axis=(1, 2), keepdims=True)
    hi = images.max(axis=(1, 2), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.where(hi > lo, (images - lo) / span, 0.5)
