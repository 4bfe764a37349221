"""Re-identification metrics: guesswork, ReID AUC and trial aggregation.

Guesswork is the rank of the attacker's first correct (raw, encoded) pair
when all pairs are guessed in descending score order. Ties are resolved by
averaging over every ordering consistent with the scores, which reduces to a
closed form: all strictly better buckets are exhausted, and within the first
bucket that holds a match the expected draw count of an urn without
replacement is ``(1 + |bucket|) / (1 + |matches in bucket|)``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError, SizeError

TIE_RTOL = 1e-12
BRUTE_FORCE_LIMIT = 12


@dataclass
class PairScoreMatrix:
    """Scores for every (raw i, encoded j) pair plus the true matches.

    ``matches`` is a (K, 2) integer array of (i, j) index pairs.
    """

    scores: np.ndarray
    matches: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.matches = np.asarray(self.matches, dtype=np.int64).reshape(-1, 2)
        if self.scores.ndim != 2:
            raise DomainError(f"scores must be a matrix, got shape {self.scores.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    def match_mask(self) -> np.ndarray:
        mask = np.zeros(self.scores.shape, dtype=bool)
        mask[self.matches[:, 0], self.matches[:, 1]] = True
        return mask

    @classmethod
    def diagonal(cls, scores, meta=None) -> PairScoreMatrix:
        n = min(np.shape(scores))
        return cls(scores, np.stack([np.arange(n), np.arange(n)], axis=1), meta or {})


def tie_buckets(values: np.ndarray, rtol: float = TIE_RTOL) -> tuple[np.ndarray, np.ndarray]:
    """Sort descending and group near-equal neighbours.

    Returns (order, bucket_id) where ``bucket_id[r]`` is the bucket of the
    r-th ranked entry. Grouping chains through neighbours, so a run of
    values each within tolerance of the next shares one bucket.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(-values, kind="stable")
    ranked = values[order]
    gaps = ranked[:-1] - ranked[1:]
    scale = np.maximum(np.abs(ranked[:-1]), np.abs(ranked[1:]))
    new_bucket = gaps > rtol * scale
    bucket_id = np.concatenate([[0], np.cumsum(new_bucket)])
    return order, bucket_id


def guesswork(S: PairScoreMatrix, rtol: float = TIE_RTOL) -> Fraction:
    mask = S.match_mask().ravel()
    if not mask.any():
        raise DomainError("guesswork needs at least one true match")
    order, bucket_id = tie_buckets(S.scores, rtol)
    hit = mask[order]
    q = bucket_id[np.argmax(hit)]
    above = int(np.count_nonzero(bucket_id < q))
    in_q = bucket_id == q
    size = int(np.count_nonzero(in_q))
    correct = int(np.count_nonzero(hit & in_q))
    return above + Fraction(1 + size, 1 + correct)


def brute_force_guesswork(S: PairScoreMatrix, rtol: float = TIE_RTOL) -> Fraction:
    """Expected first-correct rank by enumerating every tie-consistent ordering.

    Within a bucket only the positions of the matches matter to the first hit,
    and every placement of them is equally likely, so enumerating placements
    (combinations) weighs each ordering correctly.
    """
    if S.scores.size > BRUTE_FORCE_LIMIT:
        raise SizeError(f"brute force is limited to {BRUTE_FORCE_LIMIT} pairs, got {S.scores.size}")
    mask = S.match_mask().ravel()
    if not mask.any():
        raise DomainError("guesswork needs at least one true match")
    order, bucket_id = tie_buckets(S.scores, rtol)
    hit = mask[order]
    layouts = []
    for b in range(bucket_id[-1] + 1):
        members = np.flatnonzero(bucket_id == b)
        k = int(hit[members].sum())
        layouts.append([frozenset(c) for c in itertools.combinations(range(members.size), k)])
    sizes = [int(np.count_nonzero(bucket_id == b)) for b in range(len(layouts))]
    total = Fraction(0)
    count = 0
    for combo in itertools.product(*layouts):
        offset = 0
        first = None
        for size, positions in zip(sizes, combo):
            if positions:
                first = offset + min(positions) + 1
                break
            offset += size
        total += first
        count += 1
    return total / count


def reid_auc(S: PairScoreMatrix) -> float:
    """Mann-Whitney AUC of matched vs unmatched scores; ties count one half."""
    mask = S.match_mask().ravel()
    pos = int(mask.sum())
    neg = mask.size - pos
    if pos == 0 or neg == 0:
        raise DomainError("ReID AUC needs both matched and unmatched pairs")
    return rank_auc(S.scores.ravel(), mask)


def rank_auc(scores, positive_mask) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    positive_mask = np.asarray(positive_mask, dtype=bool)
    pos = int(positive_mask.sum())
    neg = positive_mask.size - pos
    if pos == 0 or neg == 0:
        raise DomainError("AUC needs both classes")
    ranks = rankdata(scores, method="average")
    u = ranks[positive_mask].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def max_guesswork(m: int, n: int) -> int:
    return m * n - n + 1


def uniform_guesswork(m: int, n: int) -> Fraction:
    return Fraction(m * n + 1, n + 1)


@dataclass
class Summary:
    mean: float
    ci: tuple[float, float]


@dataclass
class PrivacyReport:
    scheme: str
    n: int
    trials: int
    guesswork: Summary
    reid_auc: Summary
    per_trial_guesswork: list[float]
    per_trial_auc: list[float]
    trial_meta: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guesswork"]["ci"] = list(self.guesswork.ci)
        d["reid_auc"]["ci"] = list(self.reid_auc.ci)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> PrivacyReport:
        d = dict(d)
        d["guesswork"] = Summary(d["guesswork"]["mean"], tuple(d["guesswork"]["ci"]))
        d["reid_auc"] = Summary(d["reid_auc"]["mean"], tuple(d["reid_auc"]["ci"]))
        return cls(**d)


def _summary(values) -> Summary:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = np.percentile(values, [2.5, 97.5])
    mean = float(values.mean())
    return Summary(mean, (min(float(lo), mean), max(float(hi), mean)))


def aggregate(trials: list[PairScoreMatrix], scheme: str = "", provenance: dict | None = None) -> PrivacyReport:
    if len(trials) < 2:
        raise DomainError(f"aggregation needs at least 2 trials, got {len(trials)}")
    gw = [float(guesswork(t)) for t in trials]
    auc = [reid_auc(t) for t in trials]
    return PrivacyReport(
        scheme=scheme,
        n=int(trials[0].shape[0]),
        trials=len(trials),
        guesswork=_summary(gw),
        reid_auc=_summary(auc),
        per_trial_guesswork=gw,
        per_trial_auc=auc,
        trial_meta=[dict(t.meta) for t in trials],
        provenance=dict(provenance or {}),
    )
