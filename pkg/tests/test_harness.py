import csv
import json
import shutil

import numpy as np
import pytest

from emgauth.dsp import FOREARM, FdtConfig, WindowSpec
from emgauth.evaluation import calibrated_levels, collect_scores, default_sweep, fold_plan
from emgauth.fusion import CodeSequence, normalize_weights, sample_sequences
from emgauth.grabmyo_io import Grid, scan_dataset
from emgauth.harness import (
    EvalSettings, _Accumulator, enroll_fold, evaluate_fold, fold_score_tensor, gesture_eers,
    impostor_sequences, load_features, load_report, report_json, run_evaluation, write_report,
)
from oracles import naive_fused_det

GESTURES = tuple(range(1, 17))


@pytest.fixture(scope="module")
def features(small_manifest):
    return load_features(small_manifest, FOREARM, WindowSpec(), FdtConfig(), GESTURES)


@pytest.fixture(scope="module")
def fold_data(small_manifest, features):
    fold = fold_plan("single_cross_day", small_manifest).folds[4]
    templates = enroll_fold(fold, features, GESTURES)
    return fold, templates, fold_score_tensor(fold, templates, features, GESTURES)


def test_feature_dictionary(small_manifest, features):
    assert len(features) == 3 * 4 * 16 * 7
    assert features[(1, 1, 1, 1)].shape == (WindowSpec().count(1024), 48)


def test_score_tensor_matches_slow_path(fold_data, features):
    fold, templates, scores = fold_data
    seq = CodeSequence((5, 2, 9))
    for ji, j in enumerate(fold.subjects):
        pools = collect_scores(fold, "leaked", seq, templates, features, j)
        others = [k for k in range(len(fold.subjects)) if k != ji]
        for pool, code in zip(pools, seq.codes):
            g = code - 1
            assert np.allclose(pool.genuine, scores[ji, g, ji, g], rtol=1e-12, atol=0)
            assert np.allclose(pool.impostor, scores[ji, g, others, g].ravel(), rtol=1e-12, atol=0)


def test_impostor_sequences_differ_from_genuine():
    seqs = np.array([s.codes for s in sample_sequences(0, 30, 6)]) - 1
    out = impostor_sequences(0, 3, seqs, 5)
    assert out.shape == (30, 5, 6)
    assert np.array_equal(out, impostor_sequences(0, 3, seqs, 5))
    assert not np.array_equal(out, impostor_sequences(0, 4, seqs, 5))
    for s in range(30):
        for k in range(5):
            assert len(set(out[s, k])) == 6 and not np.array_equal(out[s, k], seqs[s])
    # two gestures and two codes: only one other ordering exists
    tiny = impostor_sequences(0, 1, np.array([[0, 1]]), 4, n_gestures=2)
    assert np.all(tiny == [1, 0])


@pytest.mark.parametrize("scenario", ["leaked", "normal"])
@pytest.mark.parametrize("m", [1, 3])
def test_fold_eer_matches_naive_pipeline(fold_data, features, scenario, m):
    fold, templates, scores = fold_data
    settings = EvalSettings(selections=("forearm",), codelengths=(m,), scenarios=(scenario,),
                            sequence_count=4)
    seqs = sample_sequences(0, 4, 6)
    seq_idx = np.array([s.codes for s in seqs]) - 1
    cohort = list(fold.subjects)
    cohort_pos = {j: i for i, j in enumerate(cohort)}
    imp_idx = {j: impostor_sequences(0, j, seq_idx, len(cohort), 16) for j in cohort}
    accuracy = 1.0 - gesture_eers(scores).mean(axis=0)
    acc = _Accumulator()
    evaluate_fold(fold, scores, seq_idx, imp_idx, cohort_pos, accuracy, settings, "forearm", acc)

    acc_map = {g: accuracy[g - 1] for g in GESTURES}
    for ji, j in enumerate(cohort):
        gen_rows, imp_rows, w_gen, w_imp = [], [], [], []
        for si, s in enumerate(seqs):
            seq = s.prefix(m)
            shown = {k: CodeSequence(tuple(imp_idx[j][si, cohort_pos[k]] + 1)) for k in cohort if k != j}
            pools = collect_scores(fold, scenario, seq, templates, features, j, shown)
            cal = [scores[ji, c - 1].ravel() for c in seq.codes]
            gen = np.stack([calibrated_levels(p.genuine, c) for p, c in zip(pools, cal)], axis=1)
            imp = np.stack([calibrated_levels(p.impostor, c) for p, c in zip(pools, cal)], axis=1)
            w = normalize_weights(acc_map, seq).normalized
            gen_rows += list(gen)
            imp_rows += list(imp)
            w_gen += [w] * len(gen)
            w_imp += [w] * len(imp)
        sweep = default_sweep(np.concatenate([np.ravel(gen_rows), np.ravel(imp_rows)]))
        eer = naive_fused_det(gen_rows, imp_rows, (w_gen, w_imp), sweep)[3]
        got = acc.fold_eers[(fold.protocol, scenario, "forearm", m)][j]
        assert got == [float(eer)]


def test_run_evaluation_is_deterministic(small_manifest, tmp_path):
    settings = EvalSettings(selections=("forearm",), codelengths=(1, 6), sequence_count=5,
                            protocols=("within_day", "cumulative_cross_day"))
    cache = {}
    a = run_evaluation(small_manifest, settings, features_cache=cache)
    b = run_evaluation(small_manifest, settings, features_cache=cache)
    assert report_json(a.report) == report_json(b.report)
    paths = write_report(a, tmp_path)
    assert load_report(paths["report"]).to_dict() == a.report.to_dict()
    rows = list(csv.reader(paths["eer_table"].open()))
    assert rows[0][:4] == ["scenario", "subject", "WD-Uni-forearm", "WD-Uni-wrist"]
    assert any(r[1] == "M" for r in rows)
    det = list(csv.reader(paths["det_curves"].open()))
    assert det[0] == ["config_hash", "protocol", "scenario", "selection", "codelength", "tau", "far", "frr"]
    assert len(det) == 1 + 2 * 2 * 2 * 201
    doc = json.loads(paths["report"].read_text())
    assert doc["config_hash"] == a.report.config_hash and doc["seeds"]["rng_seed"] == 0
    for w in doc["weights"]["within_day"]["forearm"].values():
        assert 0 <= w <= 1
    for r in a.report.results:
        assert set(r.per_subject) == {1, 2, 3, 4}
        assert all(n == 21 for n in r.folds_per_subject.values())


def test_incomplete_subject_is_reported(small_tree, tmp_path):
    root = tmp_path / "tree"
    shutil.copytree(small_tree, root)
    victim = next(root.glob("Session 2/session2_subject3/*gesture4_trial2.dat"))
    victim.unlink()
    manifest = scan_dataset(root, Grid(3, 4, 17, 7))
    settings = EvalSettings(selections=("forearm",), codelengths=(1,), sequence_count=2,
                            protocols=("within_day", "single_cross_day"), scenarios=("leaked",))
    out = run_evaluation(manifest, settings)
    assert [j for j, _ in out.report.skipped["single_cross_day"]] == [3]
    scd = out.report.result("single_cross_day", "leaked", "forearm", 1)
    assert 3 not in scd.per_subject
    wd = out.report.result("within_day", "leaked", "forearm", 1)
    assert wd.folds_per_subject[3] == 14 and wd.folds_per_subject[1] == 21
