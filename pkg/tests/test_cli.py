import json

import pytest

from emgauth.cli import main


def _rec(root, s, j, g, t):
    return str(root / f"Session {s}" / f"session{s}_subject{j}" / f"session{s}_subject{j}_gesture{g}_trial{t}")


@pytest.fixture(scope="module")
def clean_tree(tmp_path_factory):
    """Well-separated users, no day-to-day drift."""
    root = tmp_path_factory.mktemp("cli") / "tree"
    assert main(["synth", str(root), "--subject-count", "3", "--sample-count", "1024",
                 "--channel-count", "8", "--separation", "1.0", "--session-drift", "0",
                 "--seed", "2", "--jobs", "1"]) == 0
    return root


@pytest.fixture(scope="module")
def store(clean_tree):
    path = clean_tree.parent / "templates.json"
    assert main(["enroll", str(clean_tree), "--store", str(path), "--session", "1", "--jobs", "1"]) == 0
    return path


@pytest.mark.parametrize("cmd", ["scan", "features", "enroll", "verify", "evaluate", "synth", "report"])
def test_every_subcommand_has_help(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main([cmd, "--help"])
    assert info.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["scan", "--no-such-flag"])
    assert info.value.code == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"windw": {}}))
    assert main(["scan", str(tmp_path), "--config", str(cfg)]) == 2
    cfg.write_text("{not json")
    assert main(["scan", str(tmp_path), "--config", str(cfg)]) == 2
    assert "error" in capsys.readouterr().err


def test_scan_complete_tree(clean_tree, capsys):
    assert main(["scan", str(clean_tree)]) == 0
    out = capsys.readouterr().out
    assert "missing: 0" in out
    summary = json.loads(out.strip().splitlines()[-1])
    assert summary["complete"] and summary["records"] == 3 * 3 * 17 * 7


def test_scan_empty_dir_fails(tmp_path):
    assert main(["scan", str(tmp_path)]) != 0
    assert main(["scan", str(tmp_path / "absent")]) == 1


def test_scan_partial_tree(clean_tree, tmp_path, capsys):
    assert main(["scan", str(clean_tree), "--grid", "3,4,17,7"]) == 1
    capsys.readouterr()
    out_file = tmp_path / "manifest.json"
    assert main(["scan", str(clean_tree), "--grid", "3,4,17,7", "--allow-partial", "-o", str(out_file)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert len(summary["missing"]) == 3 * 17 * 7
    assert [1, 4, 1, 1] in summary["missing"]
    assert json.loads(out_file.read_text())["grid"]["subjects"] == 4


def test_features_command(clean_tree, tmp_path):
    out = tmp_path / "feats"
    assert main(["features", str(clean_tree), "-o", str(out), "--jobs", "1"]) == 0
    meta = json.loads((out / "features.json").read_text())
    assert meta["records"] == 3 * 3 * 17 * 7 and len(meta["config_hash"]) == 16
    assert len(list(out.rglob("*.csv"))) == meta["records"]


def test_verify_genuine_accepts(clean_tree, store, capsys):
    records = [_rec(clean_tree, 2, 1, g, 3) for g in (4, 8, 15)]
    assert main(["verify", "--store", str(store), "--user", "1", "--sequence", "4,8,15", *records]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-1] == "ACCEPT" and lines[-2].startswith("g = ")
    assert len([ln for ln in lines if ln.startswith("code")]) == 3


def test_verify_leaked_impostor_rejects(clean_tree, store, capsys):
    records = [_rec(clean_tree, 2, 2, g, 3) + ".hea" for g in (4, 8, 15)]
    assert main(["verify", "--store", str(store), "--user", "1", "--sequence", "4,8,15", "--json", *records]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["accepted"] is False and len(doc["codes"]) == 3
    assert all(c["certainty"] == 0 for c in doc["codes"])


def test_verify_unknown_user_or_gesture(clean_tree, store, tmp_path, capsys):
    rec = _rec(clean_tree, 2, 1, 4, 1)
    assert main(["verify", "--store", str(store), "--user", "9", "--sequence", "4", rec]) == 1
    partial = tmp_path / "few.json"
    assert main(["enroll", str(clean_tree), "--store", str(partial), "--gestures", "1,2,4", "--jobs", "1"]) == 0
    assert main(["verify", "--store", str(partial), "--user", "1", "--sequence", "4,9", rec, rec]) == 1
    assert "gesture 9" in capsys.readouterr().err
    assert main(["verify", "--store", str(store), "--user", "1", "--sequence", "4,17", rec, rec]) == 2
    assert main(["verify", "--store", str(store), "--user", "1", "--sequence", "4,5", rec]) == 2


def test_verify_detects_config_mismatch(clean_tree, store):
    rec = _rec(clean_tree, 2, 1, 4, 1)
    assert main(["verify", "--store", str(store), "--user", "1", "--sequence", "4", "--selection", "wrist", rec]) == 1


def test_evaluate_and_report(clean_tree, tmp_path, capsys):
    out = tmp_path / "rep"
    args = ["evaluate", str(clean_tree), "-o", str(out), "--selections", "forearm",
            "--protocols", "within_day", "--codelengths", "1,6", "--sequence-count", "5", "--jobs", "1"]
    assert main(args) == 0
    for name in ("report.json", "eer_table.csv", "det_curves.csv"):
        assert (out / name).is_file()
    doc = json.loads((out / "report.json").read_text())
    med = {(r["codelength"], r["scenario"]): r["median"] for r in doc["results"]}
    assert med[(6, "normal")] <= med[(1, "normal")]
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert "within_day" in capsys.readouterr().out
    assert main(["report", str(tmp_path / "nothing.json")]) == 1
