"""End-to-end evaluation: features -> templates -> fold scores -> fused EERs.

Threshold coupling across codes: every template gets a calibration pool made
of all claimant attempts scored against it in the fold (every cohort user,
every gesture). A score is replaced by its empirical CDF level in that pool
and one operating point ``tau`` in [0, 1] is swept for all codes at once.

Gesture weights are ``1 - EER`` of the single-code, same-gesture test for
that gesture, averaged over target users and over all folds of the protocol
(the folds cover the three days).
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import ChannelSelection, FdtConfig, WindowSpec, extract_series
from .evaluation import (
    PROTOCOL_ABBREV, PROTOCOLS, SCENARIOS, ConfigResult, EvalReport, Fold,
    calibrated_levels, check_det, default_sweep, det_from_values, fold_plan, summarize,
)
from .fusion import CODE_GESTURES, acceptance_levels, sample_sequences
from .grabmyo_io import DatasetManifest, read_record
from .matcher import DEFAULT_SHRINKAGE, config_hash, enroll, score_matrix

log = logging.getLogger(__name__)

REPORT_GRID = np.linspace(0.0, 1.0, 201)
ASSUMPTIONS = [
    "Per-subject EERs use every other subject in the cohort as impostors, then are summarized over subjects.",
    "An attempt score is the mean Mahalanobis distance over the windows of one claimant trial.",
    "Covariances are shrunk towards a scaled identity before inversion.",
    "One operating point is mapped to per-template thresholds through per-template score quantiles.",
    "Gesture weights are 1 - single-code EER of the gesture averaged over users and folds of the protocol.",
    "Normal-test impostors present a random 6-gesture sequence different from the genuine one; shorter codes use prefixes.",
    "Cumulative cross-day enrollment takes three trials from each of the two other days, rotating per fold.",
    "Fold EERs are averaged per subject (equal folds per day, so this equals averaging per day then across days).",
    "Quartiles use linear interpolation between order statistics.",
]


@dataclass(frozen=True)
class EvalSettings:
    protocols: tuple[str, ...] = PROTOCOLS
    scenarios: tuple[str, ...] = SCENARIOS
    selections: tuple[str, ...] = ("forearm", "wrist")
    codelengths: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    sequence_count: int = 50
    rng_seed: int = 0
    shrinkage: float = DEFAULT_SHRINKAGE
    reduce: str = "mean"
    sweep_size: int = 512
    window: WindowSpec = WindowSpec()
    fdt: FdtConfig = FdtConfig()
    channel_map: dict | None = None
    gestures: tuple[int, ...] = CODE_GESTURES

    def __post_init__(self):
        for p in self.protocols:
            if p not in PROTOCOLS:
                raise ValueError(f"unknown protocol {p!r}")
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ValueError(f"unknown scenario {s!r}")
        if any(not 1 <= m <= 6 for m in self.codelengths):
            raise ValueError("codelengths must lie in 1..6")
        if max(self.codelengths) > len(self.gestures):
            raise ValueError("codelength exceeds the number of gestures")

    def selection(self, name: str) -> ChannelSelection:
        return ChannelSelection.named(name, self.channel_map)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = asdict(self.window)
        d["fdt"] = asdict(self.fdt)
        d["fdt"]["bands"] = [list(b) for b in self.fdt.bands]
        for k in ("protocols", "scenarios", "selections", "codelengths", "gestures"):
            d[k] = list(d[k])
        d["channel_map"] = {k: self.selection(k).channel_indices for k in self.selections}
        d["channel_map"] = {k: list(v) for k, v in d["channel_map"].items()}
        return d

    def feature_hash(self, selection: str) -> str:
        d = self.to_dict()
        return config_hash({
            "selection": selection,
            "channels": d["channel_map"].get(selection),
            "window": d["window"],
            "fdt": d["fdt"],
            "shrinkage": self.shrinkage,
        })


# -- features ----------------------------------------------------------------------


def _extract(args):
    path, selection, wspec, fconfig = args
    record = read_record(path)
    return extract_series(record, selection, wspec, fconfig).vectors


def load_features(manifest: DatasetManifest, selection: ChannelSelection, wspec: WindowSpec,
                  fconfig: FdtConfig, gestures=CODE_GESTURES, subjects=None, jobs: int = 1,
                  sessions=None) -> dict:
    """``{(session, subject, gesture, trial): (n_windows, dim) array}``."""
    keys = [
        e.key() for e in manifest.entries
        if e.gesture in gestures and (subjects is None or e.subject in subjects)
        and (sessions is None or e.session in sessions)
    ]
    tasks = [(manifest.path(*k), selection, wspec, fconfig) for k in keys]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            arrays = list(pool.map(_extract, tasks, chunksize=max(1, len(tasks) // (8 * jobs))))
    else:
        arrays = [_extract(t) for t in tasks]
    return dict(zip(keys, arrays))


# -- per-fold scoring --------------------------------------------------------------


def enroll_fold(fold: Fold, features: dict, gestures=CODE_GESTURES, shrinkage=DEFAULT_SHRINKAGE) -> dict:
    templates = {}
    for j in fold.subjects:
        for g in gestures:
            x = np.concatenate([features[(s, j, g, t)] for s, t in fold.enrollment])
            templates[(j, g)] = enroll(
                x, j, g, shrinkage,
                meta={"protocol": fold.protocol, "fold": fold.index, "enrollment": [list(e) for e in fold.enrollment]},
            )
    return templates


def fold_score_tensor(fold: Fold, templates: dict, features: dict, gestures=CODE_GESTURES,
                      reduce: str = "mean") -> np.ndarray:
    """``S[j, g, k, h, c]``: user k's claimant trial c of gesture h against template (j, g)."""
    subjects = fold.subjects
    n, ng, nc = len(subjects), len(gestures), len(fold.claimants)
    blocks = [features[(s, k, h, t)] for k in subjects for h in gestures for s, t in fold.claimants]
    lengths = np.array([b.shape[0] for b in blocks])
    x = np.concatenate(blocks)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    out = np.empty((n, ng, n, ng, nc))
    for ji, j in enumerate(subjects):
        for gi, g in enumerate(gestures):
            d = score_matrix(x, templates[(j, g)])
            if reduce == "mean":
                red = np.add.reduceat(d, starts) / lengths
            else:
                fn = {"median": np.median, "min": np.min}[reduce]
                red = np.array([fn(d[a:a + m]) for a, m in zip(starts, lengths)])
            out[ji, gi] = red.reshape(n, ng, nc)
    return out


def level_tensor(scores: np.ndarray) -> np.ndarray:
    """Per-template empirical CDF levels of a fold score tensor."""
    levels = np.empty_like(scores)
    for ji in range(scores.shape[0]):
        for gi in range(scores.shape[1]):
            levels[ji, gi] = calibrated_levels(scores[ji, gi], scores[ji, gi])
    return levels


def gesture_eers(scores: np.ndarray) -> np.ndarray:
    """Single-code same-gesture EER for every (target, gesture) of a fold."""
    n, ng = scores.shape[:2]
    out = np.empty((n, ng))
    for ji in range(n):
        others = [k for k in range(n) if k != ji]
        for gi in range(ng):
            out[ji, gi] = det_from_values(scores[ji, gi, ji, gi], scores[ji, gi, others, gi]).eer
    return out


def impostor_sequences(rng_seed: int, target: int, sequences: np.ndarray, cohort_size: int,
                       n_gestures: int = 16) -> np.ndarray:
    """Gesture indices shown by normal-test impostors, shape (n_seq, cohort, 6).

    Drawn per target user from its own stream; rows equal to the genuine
    sequence are redrawn.
    """
    rng = np.random.default_rng([rng_seed, 1, target])
    m = sequences.shape[1]
    out = np.argsort(rng.random((sequences.shape[0], cohort_size, n_gestures)), axis=-1)[..., :m]
    for s in range(sequences.shape[0]):
        for k in range(cohort_size):
            while np.array_equal(out[s, k], sequences[s]):
                out[s, k] = rng.permutation(n_gestures)[:m]
    return out


@dataclass
class _Accumulator:
    fold_eers: dict = field(default_factory=dict)  # (protocol, scenario, selection, M) -> {subject: [eer]}
    det_sum: dict = field(default_factory=dict)  # config -> [far_sum, frr_sum, count]

    def add(self, cfg, subject, eer, far, frr):
        self.fold_eers.setdefault(cfg, {}).setdefault(subject, []).append(eer)
        acc = self.det_sum.setdefault(cfg, [np.zeros_like(far), np.zeros_like(frr), 0])
        acc[0] += far
        acc[1] += frr
        acc[2] += 1


def evaluate_fold(fold: Fold, scores: np.ndarray, seq_idx: np.ndarray, imp_idx: dict,
                  cohort_pos: dict, accuracy: np.ndarray, settings: EvalSettings, selection: str,
                  acc: _Accumulator) -> None:
    levels = level_tensor(scores)
    subjects = fold.subjects
    n = len(subjects)
    if n < 2:
        raise ValueError(f"fold {fold.index}: impostor pool is empty (cohort of {n})")
    others_all = np.arange(n)
    for ji, j in enumerate(subjects):
        a = levels[ji]  # (G, N, G, C)
        others = others_all[others_all != ji]
        other_pos = np.array([cohort_pos[subjects[k]] for k in others])
        for m in settings.codelengths:
            cm = seq_idx[:, :m]
            raw = accuracy[cm]
            w = raw / raw.sum(axis=1, keepdims=True)
            gen = a[cm, ji, cm, :].transpose(0, 2, 1)  # (S, C, M)
            w_gen = np.broadcast_to(w[:, None, :], gen.shape).reshape(-1, m)
            gen = gen.reshape(-1, m)
            tau_gen = acceptance_levels(gen, w_gen)
            for scenario in settings.scenarios:
                if scenario == "leaked":
                    shown = np.broadcast_to(cm[:, None, :], (cm.shape[0], len(others), m))
                else:
                    shown = imp_idx[j][:, other_pos, :m]
                imp = a[cm[:, None, :], others[None, :, None], shown, :]  # (S, N-1, M, C)
                imp = imp.transpose(0, 1, 3, 2)
                w_imp = np.broadcast_to(w[:, None, None, :], imp.shape).reshape(-1, m)
                imp = imp.reshape(-1, m)
                tau_imp = acceptance_levels(imp, w_imp)
                sweep = default_sweep(np.concatenate([gen.ravel(), imp.ravel()]), settings.sweep_size)
                curve = det_from_values(tau_gen, tau_imp, sweep)
                check_det(curve)
                far = np.searchsorted(np.sort(tau_imp), REPORT_GRID, side="right") / tau_imp.size
                frr = 1.0 - np.searchsorted(np.sort(tau_gen), REPORT_GRID, side="right") / tau_gen.size
                acc.add((fold.protocol, scenario, selection, m), j, curve.eer, far, frr)


@dataclass
class EvalOutput:
    report: EvalReport
    det_curves: dict  # config -> (far, frr) averaged on REPORT_GRID


def run_evaluation(manifest: DatasetManifest, settings: EvalSettings = EvalSettings(), jobs: int = 1,
                   features_cache: dict | None = None) -> EvalOutput:
    gestures = tuple(settings.gestures)
    seqs = sample_sequences(settings.rng_seed, settings.sequence_count, max(6, max(settings.codelengths)), gestures)
    gpos = {g: i for i, g in enumerate(gestures)}
    seq_idx = np.array([[gpos[c] for c in s.codes] for s in seqs], dtype=int)
    cohort = manifest.subjects()
    cohort_pos = {j: i for i, j in enumerate(cohort)}
    imp_idx = {j: impostor_sequences(settings.rng_seed, j, seq_idx, len(cohort), len(gestures)) for j in cohort}

    acc = _Accumulator()
    skipped: dict = {}
    weights: dict = {}
    for sel_name in settings.selections:
        selection = settings.selection(sel_name)
        if features_cache is not None and sel_name in features_cache:
            features = features_cache[sel_name]
        else:
            log.info("extracting %s features", sel_name)
            features = load_features(manifest, selection, settings.window, settings.fdt, gestures, jobs=jobs)
            if features_cache is not None:
                features_cache[sel_name] = features
        for protocol in settings.protocols:
            plan = fold_plan(protocol, manifest, gestures)
            skipped[protocol] = [[j, why] for j, why in plan.skipped]
            folds = [f for f in plan.folds if len(f.subjects) >= 2]
            if not folds:
                log.warning("%s: fewer than two complete subjects, nothing to evaluate", protocol)
                continue
            log.info("%s / %s: scoring %d folds", sel_name, protocol, len(folds))
            tensors = []
            for fold in folds:
                templates = enroll_fold(fold, features, gestures, settings.shrinkage)
                tensors.append(fold_score_tensor(fold, templates, features, gestures, settings.reduce))
            eers = np.mean([gesture_eers(s).mean(axis=0) for s in tensors], axis=0)
            accuracy = 1.0 - eers
            if np.all(accuracy <= 0):
                accuracy = np.ones_like(accuracy)
            weights.setdefault(protocol, {})[sel_name] = {str(g): float(a) for g, a in zip(gestures, accuracy)}
            for fold, scores in zip(folds, tensors):
                evaluate_fold(fold, scores, seq_idx, imp_idx, cohort_pos, accuracy, settings, sel_name, acc)

    results = []
    for cfg, per_subject in acc.fold_eers.items():
        protocol, scenario, sel_name, m = cfg
        results.append(ConfigResult(
            protocol, scenario, sel_name, m,
            {j: float(np.mean(v)) for j, v in sorted(per_subject.items())},
            {j: len(v) for j, v in sorted(per_subject.items())},
        ))
    config = settings.to_dict()
    config["dataset"] = {"root": manifest.root, "subjects": cohort, "grid": asdict(manifest.grid)}
    report = summarize(
        results,
        config=config,
        seeds={"rng_seed": settings.rng_seed, "impostor_sequence_streams": "[rng_seed, 1, subject]"},
        skipped=skipped,
        weights=weights,
        sequences=[list(s.codes) for s in seqs],
        assumptions=list(ASSUMPTIONS),
        config_hash=config_hash(config),
    )
    det = {cfg: (s[0] / s[2], s[1] / s[2]) for cfg, s in acc.det_sum.items()}
    return EvalOutput(report, det)


# -- report files ------------------------------------------------------------------


def eer_table_rows(report: EvalReport) -> list[list[str]]:
    """Per-subject EERs laid out as WD/SCD/CCD x Uni/Multi x forearm/wrist."""
    lengths = sorted({r.codelength for r in report.results})
    uni = 1 if 1 in lengths else None
    multi = max(lengths) if lengths and max(lengths) > 1 else None
    selections = ["forearm", "wrist"] + sorted({r.selection for r in report.results} - {"forearm", "wrist"})
    columns = []
    for protocol in PROTOCOLS:
        for label, m in (("Uni", uni), ("Multi", multi)):
            for sel in selections:
                columns.append((protocol, label, m, sel))
    header = ["scenario", "subject"] + [f"{PROTOCOL_ABBREV[p]}-{lab}-{sel}" for p, lab, _, sel in columns]
    rows = [header]
    index = {(r.protocol, r.scenario, r.selection, r.codelength): r for r in report.results}
    for scenario in SCENARIOS:
        cells = [index.get((p, scenario, sel, m)) for p, _, m, sel in columns]
        if not any(cells):
            continue
        subjects = sorted({j for c in cells if c for j in c.per_subject})
        for j in subjects:
            rows.append([scenario, str(j)] + [
                repr(c.per_subject[j]) if c and j in c.per_subject else "" for c in cells
            ])
        for qi, qname in enumerate(("Q1", "M", "Q3")):
            rows.append([scenario, qname] + [repr(c.quartiles[qi]) if c else "" for c in cells])
    return rows


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n"


def write_report(output: EvalOutput, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "report.json",
        "eer_table": out / "eer_table.csv",
        "det_curves": out / "det_curves.csv",
    }
    paths["report"].write_text(report_json(output.report))
    paths["eer_table"].write_text(_csv_text(eer_table_rows(output.report)))
    rows = [["config_hash", "protocol", "scenario", "selection", "codelength", "tau", "far", "frr"]]
    key = lambda c: (PROTOCOLS.index(c[0]), SCENARIOS.index(c[1]), c[2], c[3])
    for cfg in sorted(output.det_curves, key=key):
        far, frr = output.det_curves[cfg]
        for tau, a, r in zip(REPORT_GRID, far, frr):
            rows.append([output.report.config_hash, *map(str, cfg), repr(float(tau)), repr(float(a)), repr(float(r))])
    paths["det_curves"].write_text(_csv_text(rows))
    return paths


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
