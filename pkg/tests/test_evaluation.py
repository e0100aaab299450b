import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emgauth.evaluation import (
    ConfigResult, EvalReport, InvariantError, ScorePool, calibrated_levels, check_det,
    cohort_quartiles, collect_scores, default_sweep, det_from_pools, det_from_values, fold_plan,
    fused_det, summarize, DetCurve,
)
from emgauth.fusion import CodeSequence
from emgauth.grabmyo_io import DatasetManifest, Grid, ManifestEntry
from emgauth.matcher import enroll
from oracles import brute_det, naive_fused_det


def _manifest(subjects=3, drop=()):
    grid = Grid(3, subjects, 17, 7)
    entries = [ManifestEntry(*k, path=f"r{k}") for k in grid.keys() if k not in drop]
    missing = [k for k in grid.keys() if k in drop]
    return DatasetManifest("/nowhere", entries, missing, grid=grid)


# -- DET / EER ---------------------------------------------------------------------


@pytest.mark.parametrize("gen, imp, eer", [
    ([1, 2], [3, 4], 0), ([3, 4], [1, 2], 1), ([1, 3], [2, 4], Fraction(1, 2)),
])
def test_eer_examples(gen, imp, eer):
    assert det_from_pools(ScorePool(gen, imp)).eer_exact == eer


def test_interpolated_crossing():
    # FAR/FRR jump past each other between t=1 and t=2
    curve = det_from_values([1, 2, 2], [1, 5])
    assert curve.eer_exact == brute_det([1, 2, 2], [1, 5])[3]
    assert 0 < curve.eer < 1


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=1, max_size=20),
       st.lists(st.integers(0, 12), min_size=1, max_size=20))
def test_det_matches_brute_force(gen, imp):
    gen, imp = [g / 4 for g in gen], [i / 4 for i in imp]
    curve = det_from_values(gen, imp)
    ts, far, frr, eer = brute_det(gen, imp)
    assert curve.thresholds.tolist() == ts
    assert curve.far.tolist() == [float(x) for x in far]
    assert curve.frr.tolist() == [float(x) for x in frr]
    assert curve.eer_exact == eer
    check_det(curve)
    assert (curve.eer == 0) == (max(gen) < min(imp))


def test_check_det_flags_broken_curves():
    bad = DetCurve(np.array([0.0, 1.0]), np.array([0.5, 0.2]), np.array([1.0, 0.0]), 0.3, Fraction(3, 10))
    with pytest.raises(InvariantError):
        check_det(bad)


def test_default_sweep_keeps_extremes():
    v = np.arange(2000.0)
    s = default_sweep(v, 100)
    assert s.size == 102 and s[0] == -np.inf and s[-1] == np.inf
    assert s[1] == 0 and s[-2] == 1999
    assert np.all(np.diff(s) > 0)
    assert default_sweep([3.0, 1.0, 3.0]).tolist() == [-np.inf, 1.0, 3.0, np.inf]


def test_calibrated_levels_are_ecdf():
    assert calibrated_levels([0, 1, 2.5, 9], [1, 2, 3, 4]).tolist() == [0, 0.25, 0.5, 1.0]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_fused_det_matches_naive_recomputation(m, seed):
    rng = np.random.default_rng(seed)
    n_gen, n_imp = rng.integers(1, 15, size=2)
    gen = rng.integers(0, 8, size=(n_gen, m)) / 8
    imp = rng.integers(2, 10, size=(n_imp, m)) / 8
    w = rng.dirichlet(np.ones(m))
    pools = [ScorePool(gen[:, k], imp[:, k]) for k in range(m)]
    sweep = default_sweep(np.concatenate([gen.ravel(), imp.ravel()]))
    curve = fused_det(pools, w, sweep)
    ts, far, frr, eer = naive_fused_det(gen, imp, w, sweep)
    assert curve.thresholds.tolist() == ts
    assert curve.far.tolist() == [float(x) for x in far]
    assert curve.frr.tolist() == [float(x) for x in frr]
    assert curve.eer_exact == eer


def test_single_code_fusion_is_plain_det():
    rng = np.random.default_rng(0)
    pool = ScorePool(rng.random(30), rng.random(40) + 0.3)
    assert fused_det([pool], [1.0]).eer_exact == det_from_pools(pool).eer_exact


def test_separable_codes_fuse_to_zero():
    pools = [ScorePool([0.1, 0.2], [0.8, 0.9]) for _ in range(3)]
    assert fused_det(pools, [0.2, 0.3, 0.5]).eer == 0


# -- folds -------------------------------------------------------------------------


@pytest.mark.parametrize("protocol", ["within_day", "single_cross_day", "cumulative_cross_day"])
def test_fold_counts_and_hygiene(protocol):
    plan = fold_plan(protocol, _manifest())
    assert len(plan.folds) == 21 and not plan.skipped
    for f in plan.folds:
        f.check_hygiene()
        assert {t for _, t in f.claimants}.isdisjoint({t for _, t in f.enrollment})
        assert len(f.enrollment) == 6


def test_fold_shapes():
    wd = fold_plan("within_day", _manifest()).folds
    assert all(len({s for s, _ in f.enrollment + f.claimants}) == 1 for f in wd)
    scd = fold_plan("single_cross_day", _manifest()).folds
    assert all(len(f.claimants) == 2 and f.day not in {s for s, _ in f.claimants} for f in scd)
    ccd = fold_plan("cumulative_cross_day", _manifest()).folds
    for f in ccd:
        days = [s for s, _ in f.enrollment]
        assert len(set(days)) == 2 and f.day not in days
        assert sorted(days.count(d) for d in set(days)) == [3, 3]


def test_missing_day_degrades_gracefully():
    drop = {(2, 2, 4, 5)}
    m = _manifest(drop=drop)
    wd = fold_plan("within_day", m)
    assert all((2 in f.subjects) == (f.day != 2) for f in wd.folds)
    assert [j for j, _ in wd.skipped] == [2]
    ccd = fold_plan("cumulative_cross_day", m)
    assert all(f.subjects == (1, 3) for f in ccd.folds)
    assert ccd.skipped[0][0] == 2


def test_hygiene_violation_raises():
    f = fold_plan("within_day", _manifest()).folds[0]
    bad = replace(f, enrollment=f.enrollment + f.claimants)
    with pytest.raises(InvariantError):
        bad.check_hygiene()


# -- score collection --------------------------------------------------------------


def _features(subjects, sessions=(1,), gestures=(1, 2, 3), trials=range(1, 8), seed=0):
    rng = np.random.default_rng(seed)
    feats = {}
    for s in sessions:
        for j in subjects:
            for g in gestures:
                for t in trials:
                    feats[(s, j, g, t)] = rng.standard_normal((4, 2)) + [j, g]
    return feats


def test_collect_scores_pool_sizes():
    fold = fold_plan("within_day", _manifest(4)).folds[0]
    feats = _features((1, 2, 3, 4))
    tmpl = {(j, g): enroll(np.concatenate([feats[(1, j, g, t)] for _, t in fold.enrollment]), j, g)
            for j in (1, 2, 3, 4) for g in (1, 2, 3)}
    seq = CodeSequence((2, 3))
    leaked = collect_scores(fold, "leaked", seq, tmpl, feats, subject=1)
    assert [p.genuine.size for p in leaked] == [1, 1]
    assert [p.impostor.size for p in leaked] == [3, 3]
    imps = {k: CodeSequence((1, 2)) for k in (2, 3, 4)}
    normal = collect_scores(fold, "normal", seq, tmpl, feats, subject=1, impostor_sequences=imps)
    assert normal[0].genuine.tolist() == leaked[0].genuine.tolist()
    assert normal[0].impostor.tolist() != leaked[0].impostor.tolist()
    lone = fold_plan("within_day", _manifest(1)).folds[0]
    with pytest.raises(ValueError, match="empty"):
        collect_scores(lone, "leaked", seq, tmpl, feats, subject=1)


# -- summaries ---------------------------------------------------------------------


def _sorted_quantile(values, q):
    v = sorted(values)
    pos = q * (len(v) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def test_quartiles():
    assert cohort_quartiles([0.1, 0.2, 0.3])[1] == pytest.approx(0.2)
    assert cohort_quartiles([0.4]) == (0.4, 0.4, 0.4)
    v = np.random.default_rng(1).random(43).tolist()
    q = cohort_quartiles(v)
    for got, p in zip(q, (0.25, 0.5, 0.75)):
        assert got == pytest.approx(_sorted_quantile(v, p), abs=1e-12)
    with pytest.raises(ValueError):
        cohort_quartiles([])


def test_report_round_trip():
    r = ConfigResult("within_day", "normal", "forearm", 1, {1: 0.1, 2: 0.3}, {1: 21, 2: 21})
    rep = summarize([r], config={"x": 1}, seeds={"rng_seed": 0}, skipped={}, weights={},
                    sequences=[[1, 2]], assumptions=["a"], config_hash="abc")
    assert rep.median("within_day", "normal", "forearm", 1) == pytest.approx(0.2)
    back = EvalReport.from_dict(rep.to_dict())
    assert back.to_dict() == rep.to_dict()
