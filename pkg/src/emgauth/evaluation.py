"""Evaluation protocols, score pools, DET curves and cohort summaries.

Scores are distances: an attempt is accepted at threshold ``t`` when its score
is ``<= t``. FAR(t) is the fraction of impostor attempts accepted and FRR(t)
the fraction of genuine attempts rejected. The EER is read off at the first
sweep point where FAR >= FRR, interpolating linearly from the previous point
when the two curves cross between sweep points. The interpolation is carried
out in exact rational arithmetic on the integer counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .dsp import FeatureSeries
from .fusion import CODE_GESTURES, CodeSequence, acceptance_levels
from .grabmyo_io import DatasetManifest
from .matcher import Template, score_attempt

PROTOCOLS = ("within_day", "single_cross_day", "cumulative_cross_day")
PROTOCOL_ABBREV = {"within_day": "WD", "single_cross_day": "SCD", "cumulative_cross_day": "CCD"}
SCENARIOS = ("normal", "leaked")
DEFAULT_SWEEP_SIZE = 512


class InvariantError(AssertionError):
    """An evaluation invariant was violated."""


@dataclass(frozen=True)
class ProtocolSpec:
    kind: str = "within_day"
    selection: str = "forearm"
    codelengths: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    scenario: str = "normal"
    rng_seed: int = 0
    sequence_count: int = 50

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.kind!r}; expected one of {PROTOCOLS}")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        cl = tuple(int(m) for m in self.codelengths)
        if not cl or any(not 1 <= m <= 6 for m in cl):
            raise ValueError(f"codelengths must be within 1..6, got {cl}")
        object.__setattr__(self, "codelengths", cl)


# -- fold planning -----------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    protocol: str
    index: int
    day: int  # enrollment day (within/single cross-day) or held-out day (cumulative)
    enrollment: tuple[tuple[int, int], ...]  # (session, trial)
    claimants: tuple[tuple[int, int], ...]
    subjects: tuple[int, ...]

    def check_hygiene(self) -> None:
        overlap = set(self.enrollment) & set(self.claimants)
        if overlap:
            raise InvariantError(f"fold {self.protocol}#{self.index}: claimant trials {sorted(overlap)} also used for enrollment")


@dataclass
class FoldPlan:
    protocol: str
    folds: list[Fold]
    skipped: list[tuple[int, str]] = field(default_factory=list)


def fold_plan(protocol, manifest: DatasetManifest, gestures: Sequence[int] = CODE_GESTURES) -> FoldPlan:
    """Enrollment/claimant splits for one protocol.

    within_day: per day, leave one trial out (7 folds x 3 days).
    single_cross_day: enroll on six trials of one day, claim with the
    left-out trial index from each other day.
    cumulative_cross_day: claim with one trial of the held-out day, enroll on
    three trials from each of the other two days; the triples rotate with
    the fold and never contain the claimant's trial index.
    """
    kind = protocol.kind if isinstance(protocol, ProtocolSpec) else str(protocol)
    if kind not in PROTOCOLS:
        raise ValueError(f"unknown protocol {kind!r}")
    n_sessions, n_trials = manifest.grid.sessions, manifest.grid.trials
    sessions = list(range(1, n_sessions + 1))
    trials = list(range(1, n_trials + 1))
    present = manifest.subjects()
    ok = {
        (j, s): manifest.session_complete(j, s, gestures, trials)
        for j in present for s in sessions
    }

    folds: list[Fold] = []
    skipped: list[tuple[int, str]] = []
    if kind == "within_day":
        for j in present:
            bad = [s for s in sessions if not ok[(j, s)]]
            if bad:
                skipped.append((j, f"incomplete sessions {bad}: excluded from those days"))
        for d in sessions:
            subjects = tuple(j for j in present if ok[(j, d)])
            for t in trials:
                folds.append(Fold(
                    kind, len(folds), d,
                    tuple((d, u) for u in trials if u != t), ((d, t),), subjects,
                ))
    else:
        if n_sessions != 3:
            raise ValueError("cross-day protocols need exactly three sessions")
        subjects = []
        for j in present:
            bad = [s for s in sessions if not ok[(j, s)]]
            if bad:
                skipped.append((j, f"incomplete sessions {bad}"))
            else:
                subjects.append(j)
        subjects = tuple(subjects)
        for d in sessions:
            others = [s for s in sessions if s != d]
            for t in trials:
                if kind == "single_cross_day":
                    enrollment = tuple((d, u) for u in trials if u != t)
                    claimants = tuple((e, t) for e in others)
                else:
                    rest = [(t - 1 + i) % n_trials + 1 for i in range(1, n_trials)]
                    half = len(rest) // 2
                    enrollment = tuple((others[0], u) for u in rest[:half]) + tuple(
                        (others[1], u) for u in rest[half:]
                    )
                    claimants = ((d, t),)
                folds.append(Fold(kind, len(folds), d, enrollment, claimants, subjects))
    for f in folds:
        f.check_hygiene()
    return FoldPlan(kind, folds, skipped)


# -- score pools and DET curves ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScorePool:
    genuine: np.ndarray
    impostor: np.ndarray
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "genuine", np.asarray(self.genuine, dtype=float).ravel())
        object.__setattr__(self, "impostor", np.asarray(self.impostor, dtype=float).ravel())


@dataclass(frozen=True, eq=False)
class DetCurve:
    thresholds: np.ndarray  # ascending; acceptance tightens towards the start
    far: np.ndarray
    frr: np.ndarray
    eer: float
    eer_exact: Fraction

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.far.tolist(), self.frr.tolist()))


def eer_from_counts(accepted_impostors, rejected_genuine, n_impostor: int, n_genuine: int) -> Fraction:
    """EER from per-threshold counts ordered by ascending threshold.

    Requires FAR <= FRR at the first point and FAR >= FRR at the last.
    """
    a = np.asarray(accepted_impostors, dtype=np.int64)
    r = np.asarray(rejected_genuine, dtype=np.int64)
    # FAR >= FRR  <=>  a / n_i >= r / n_g
    diff = a * n_genuine - r * n_impostor
    crossing = np.flatnonzero(diff >= 0)
    if crossing.size == 0 or diff[0] > 0:
        raise ValueError("sweep does not bracket the FAR/FRR crossing")
    k = int(crossing[0])
    far_k = Fraction(int(a[k]), n_impostor)
    if diff[k] == 0:
        return far_k
    far_p = Fraction(int(a[k - 1]), n_impostor)
    d_p = far_p - Fraction(int(r[k - 1]), n_genuine)
    d_k = far_k - Fraction(int(r[k]), n_genuine)
    alpha = -d_p / (d_k - d_p)
    return far_p + alpha * (far_k - far_p)


def det_from_values(genuine, impostor, thresholds=None) -> DetCurve:
    """DET curve of distance-like statistics over ``thresholds`` (plus +-inf)."""
    gen = np.sort(np.asarray(genuine, dtype=float).ravel())
    imp = np.sort(np.asarray(impostor, dtype=float).ravel())
    if gen.size == 0 or imp.size == 0:
        raise ValueError("both genuine and impostor pools must be non-empty")
    if thresholds is None:
        thresholds = np.concatenate([gen, imp])
    t = np.unique(np.concatenate([[-np.inf, np.inf], np.asarray(thresholds, dtype=float)]))
    accepted_imp = np.searchsorted(imp, t, side="right")
    rejected_gen = gen.size - np.searchsorted(gen, t, side="right")
    eer = eer_from_counts(accepted_imp, rejected_gen, imp.size, gen.size)
    return DetCurve(t, accepted_imp / imp.size, rejected_gen / gen.size, float(eer), eer)


def det_from_pools(pool: ScorePool) -> DetCurve:
    return det_from_values(pool.genuine, pool.impostor)


def default_sweep(values, size: int = DEFAULT_SWEEP_SIZE) -> np.ndarray:
    """Up to ``size`` operating points spaced by quantile over the distinct values."""
    u = np.unique(np.asarray(values, dtype=float).ravel())
    u = u[np.isfinite(u)]
    if u.size > size:
        u = u[np.round(np.linspace(0, u.size - 1, size)).astype(int)]
    return np.concatenate([[-np.inf], u, [np.inf]])


def fused_det(pools: Sequence[ScorePool], weights, sweep=None) -> DetCurve:
    """DET of the weighted-majority decision over aligned per-code pools.

    Attempt ``i`` of pool ``m`` is the same claimant attempt for every code.
    Code ``m`` is certain at operating point ``tau`` when its value is
    ``<= tau``; values are expected to be calibrated so that one ``tau`` is
    meaningful for all codes (see :func:`calibrated_levels`).
    ``sweep`` is an array of operating points, an int grid size, or None for
    the default quantile-spaced grid.
    """
    if not pools:
        raise ValueError("at least one code pool is required")
    gen = np.stack([p.genuine for p in pools], axis=1)
    imp = np.stack([p.impostor for p in pools], axis=1)
    w = np.asarray(getattr(weights, "normalized", weights), dtype=float)
    if w.shape[-1] != len(pools):
        raise ValueError(f"{w.shape[-1]} weights for {len(pools)} codes")
    if sweep is None or isinstance(sweep, (int, np.integer)):
        size = DEFAULT_SWEEP_SIZE if sweep is None else int(sweep)
        sweep = default_sweep(np.concatenate([gen.ravel(), imp.ravel()]), size)
    return det_from_values(acceptance_levels(gen, w), acceptance_levels(imp, w), sweep)


def calibrated_levels(scores, calibration) -> np.ndarray:
    """Empirical CDF of ``calibration`` evaluated at ``scores``.

    A global operating point ``tau`` applied to levels is the per-template
    threshold "largest calibration score whose level is <= tau"; for scores
    drawn from the calibration set both readings give the same decisions.
    """
    cal = np.sort(np.asarray(calibration, dtype=float).ravel())
    return np.searchsorted(cal, np.asarray(scores, dtype=float), side="right") / cal.size


def check_det(curve: DetCurve) -> None:
    if np.any(np.diff(curve.far) < 0) or np.any(np.diff(curve.frr) > 0):
        raise InvariantError("DET curve is not monotone along the threshold sweep")
    if not 0.0 <= curve.eer <= 1.0:
        raise InvariantError(f"EER {curve.eer} outside [0, 1]")


# -- scoring a fold ------------------------------------------------------------------


def _series(features, key) -> FeatureSeries:
    value = features[key]
    if isinstance(value, FeatureSeries):
        return value
    return FeatureSeries(key, "", value)


def collect_scores(
    fold: Fold,
    scenario: str,
    sequence: CodeSequence,
    templates: Mapping[tuple[int, int], Template],
    features: Mapping,
    subject: int,
    impostor_sequences: Mapping[int, CodeSequence] | None = None,
    reduce: str = "mean",
) -> list[ScorePool]:
    """Per-code genuine and impostor attempt scores for one target user.

    Genuine: ``subject`` performs each code in every claimant trial.
    Leaked: every other cohort user performs the same code.
    Normal: every other user performs the code at the same position of
    their own (different) sequence from ``impostor_sequences``.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    others = [k for k in fold.subjects if k != subject]
    if not others:
        raise ValueError("impostor pool is empty: the cohort needs at least two subjects")
    if scenario == "normal" and impostor_sequences is None:
        raise ValueError("normal scenario needs impostor sequences")
    pools = []
    for m, code in enumerate(sequence.codes):
        tmpl = templates[(subject, code)]
        genuine = [
            score_attempt(_series(features, (s, subject, code, t)), tmpl, reduce).value
            for s, t in fold.claimants
        ]
        impostor = []
        for k in others:
            shown = code if scenario == "leaked" else impostor_sequences[k].codes[m]
            for s, t in fold.claimants:
                impostor.append(score_attempt(_series(features, (s, k, shown, t)), tmpl, reduce).value)
        pools.append(ScorePool(
            genuine, impostor,
            {"subject": subject, "code": code, "position": m, "scenario": scenario,
             "protocol": fold.protocol, "fold": fold.index},
        ))
    return pools


# -- summaries -----------------------------------------------------------------------


def cohort_quartiles(values) -> tuple[float, float, float]:
    """Q1, median, Q3 with linear interpolation between order statistics."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise ValueError("no values to summarize")
    q1, med, q3 = np.percentile(v, [25.0, 50.0, 75.0])
    return float(q1), float(med), float(q3)


@dataclass
class ConfigResult:
    protocol: str
    scenario: str
    selection: str
    codelength: int
    per_subject: dict[int, float]
    folds_per_subject: dict[int, int] = field(default_factory=dict)

    @property
    def quartiles(self) -> tuple[float, float, float]:
        return cohort_quartiles(self.per_subject[j] for j in sorted(self.per_subject))

    def key(self):
        return (PROTOCOLS.index(self.protocol), SCENARIOS.index(self.scenario), self.selection, self.codelength)


@dataclass
class EvalReport:
    results: list[ConfigResult]
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    sequences: list = field(default_factory=list)
    assumptions: list = field(default_factory=list)
    config_hash: str = ""

    def result(self, protocol, scenario, selection, codelength) -> ConfigResult:
        for r in self.results:
            if (r.protocol, r.scenario, r.selection, r.codelength) == (protocol, scenario, selection, codelength):
                return r
        raise KeyError((protocol, scenario, selection, codelength))

    def median(self, protocol, scenario, selection, codelength) -> float:
        return self.result(protocol, scenario, selection, codelength).quartiles[1]

    def to_dict(self) -> dict:
        rows = []
        for r in sorted(self.results, key=ConfigResult.key):
            q1, med, q3 = r.quartiles
            rows.append({
                "protocol": r.protocol,
                "scenario": r.scenario,
                "selection": r.selection,
                "codelength": r.codelength,
                "per_subject": {str(j): r.per_subject[j] for j in sorted(r.per_subject)},
                "folds_per_subject": {str(j): r.folds_per_subject.get(j, 0) for j in sorted(r.per_subject)},
                "q1": q1,
                "median": med,
                "q3": q3,
            })
        return {
            "format": "emgauth-report",
            "version": 1,
            "config_hash": self.config_hash,
            "config": self.config,
            "seeds": self.seeds,
            "assumptions": self.assumptions,
            "skipped": self.skipped,
            "weights": self.weights,
            "sequences": self.sequences,
            "results": rows,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        results = [
            ConfigResult(
                r["protocol"], r["scenario"], r["selection"], int(r["codelength"]),
                {int(j): float(v) for j, v in r["per_subject"].items()},
                {int(j): int(v) for j, v in r.get("folds_per_subject", {}).items()},
            )
            for r in doc["results"]
        ]
        return cls(
            results, doc.get("config", {}), doc.get("seeds", {}), doc.get("skipped", {}),
            doc.get("weights", {}), doc.get("sequences", []), doc.get("assumptions", []),
            doc.get("config_hash", ""),
        )


def summarize(results: Sequence[ConfigResult], **meta) -> EvalReport:
    """Bundle per-subject EERs into a report; quartiles are computed on access."""
    for r in results:
        if not r.per_subject:
            raise ValueError(f"no subjects evaluated for {r.key()}")
    return EvalReport(sorted(results, key=ConfigResult.key), **meta)
