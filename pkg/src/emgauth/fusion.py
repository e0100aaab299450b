"""Decision-level fusion of multi-code attempts.

Each code in a sequence yields a binary certainty (score at or below the
code's threshold). The certainties are combined by weighted vote with weights
proportional to per-gesture accuracy; an attempt is accepted when the vote
exceeds one half.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .matcher import MatchScore

CODE_GESTURES = tuple(range(1, 17))
MAX_CODELENGTH = 6


@dataclass(frozen=True)
class CodeSequence:
    codes: tuple[int, ...]

    def __post_init__(self):
        codes = tuple(int(c) for c in self.codes)
        if not 1 <= len(codes) <= MAX_CODELENGTH:
            raise ValueError(f"codelength must be 1..{MAX_CODELENGTH}, got {len(codes)}")
        if len(set(codes)) != len(codes):
            raise ValueError(f"codes must be distinct: {codes}")
        if any(c not in CODE_GESTURES for c in codes):
            raise ValueError(f"codes must be gestures 1..16, got {codes}")
        object.__setattr__(self, "codes", codes)

    def __len__(self):
        return len(self.codes)

    def __iter__(self):
        return iter(self.codes)

    def prefix(self, m: int) -> "CodeSequence":
        if not 1 <= m <= len(self.codes):
            raise ValueError(f"prefix length {m} outside 1..{len(self.codes)}")
        return CodeSequence(self.codes[:m])


@dataclass(frozen=True)
class CodeWeights:
    raw_accuracy: tuple[float, ...]
    normalized: tuple[float, ...]


@dataclass(frozen=True)
class FusionDecision:
    per_code_certainty: tuple[int, ...]
    discriminant: float
    accepted: bool


def _accuracy_of(accuracies, gesture: int) -> float:
    if isinstance(accuracies, Mapping):
        return float(accuracies[gesture])
    # sequences are indexed by gesture id, 1-based
    return float(accuracies[gesture - 1])


def normalize_weights(accuracies, sequence: CodeSequence | Sequence[int]) -> CodeWeights:
    codes = sequence.codes if isinstance(sequence, CodeSequence) else tuple(sequence)
    try:
        raw = np.array([_accuracy_of(accuracies, c) for c in codes], dtype=float)
    except (KeyError, IndexError):
        raise ValueError(f"no accuracy available for some code in {codes}") from None
    if np.any(raw < 0) or not np.all(np.isfinite(raw)):
        raise ValueError("accuracies must be finite and non-negative")
    total = raw.sum()
    if total <= 0:
        raise ValueError("all accuracies are zero; weights are undefined")
    return CodeWeights(tuple(raw.tolist()), tuple((raw / total).tolist()))


def _weight_values(weights) -> np.ndarray:
    if isinstance(weights, CodeWeights):
        return np.asarray(weights.normalized, dtype=float)
    return np.asarray(weights, dtype=float)


def fuse(certainties: Sequence[int], weights) -> FusionDecision:
    w = _weight_values(weights)
    d = tuple(int(x) for x in certainties)
    if len(d) != len(w):
        raise ValueError(f"{len(d)} certainties for {len(w)} weights")
    g = 0.0
    for wm, dm in zip(w, d):
        g += wm * dm
    return FusionDecision(d, float(g), bool(g > 0.5))


def certainty_from_score(score, threshold: float) -> int:
    value = score.value if isinstance(score, MatchScore) else score
    return int(value <= threshold)


def sample_sequences(rng_seed: int, count: int, m: int, gesture_pool: Sequence[int] = CODE_GESTURES):
    pool = np.asarray(list(gesture_pool))
    if m > len(pool):
        raise ValueError(f"cannot draw {m} distinct codes from a pool of {len(pool)}")
    rng = np.random.default_rng(rng_seed)
    return [CodeSequence(tuple(rng.choice(pool, size=m, replace=False).tolist())) for _ in range(count)]


def acceptance_levels(levels: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Smallest operating point at which each fused attempt is accepted.

    ``levels`` is (n_attempts, M): the value each code's statistic is compared
    against (code m is certain at operating point ``tau`` iff level <= tau).
    ``weights`` is (M,) or (n_attempts, M). The weighted vote is a step
    function of ``tau``, so an attempt is accepted exactly when
    ``tau >= acceptance_levels(...)``; ``inf`` if never.
    The vote is summed in code order, matching :func:`fuse`.
    """
    levels = np.atleast_2d(np.asarray(levels, dtype=float))
    n, m = levels.shape
    w = np.broadcast_to(np.asarray(weights, dtype=float), (n, m))
    best = np.full(n, np.inf)
    for c in range(m):
        cut = levels[:, c : c + 1]
        chosen = levels <= cut
        g = np.zeros(n)
        for k in range(m):
            g = g + w[:, k] * chosen[:, k]
        ok = g > 0.5
        best = np.where(ok & (levels[:, c] < best), levels[:, c], best)
    return best
