import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emgauth.grabmyo_io import (
    DatasetManifest, Grid, HeaderParseError, SignalRecord, UnsupportedFormatError, WfdbError,
    decode_digital, decode_signal, encode_record, parse_header, parse_identity, quantize,
    read_record, record_relpath, scan_dataset, write_record,
)
from oracles import wfdb_bytes

NAME = "session2_subject7_gesture3_trial5"


def _record(samples, **kw):
    return SignalRecord(2, 7, 3, 5, samples, **kw)


def test_header_matches_dataset_record_line():
    lines = [f"{NAME} 32 2048 10240"] + [
        f"{NAME}.dat 16 1000(0)/mV 16 0 0 0 0 ch{i}" for i in range(32)
    ]
    h = parse_header("\n".join(lines))
    assert (h.channel_count, h.sample_count, h.sampling_rate_hz) == (32, 10240, 2048.0)
    assert h.labels[31] == "ch31"


def test_header_skips_comments_and_reads_baseline():
    text = f"# a comment\n\n{NAME} 2 2048/1(0) 4\n# another\n{NAME}.dat 16 200(-12)/uV\n{NAME}.dat 16 0\n"
    h = parse_header(text)
    assert h.sampling_rate_hz == 2048.0
    assert h.channels[0].baseline == -12 and h.channels[0].units == "uV"
    assert h.channels[1].gain == 200.0  # unspecified gain takes the default


def test_unsupported_format_is_named():
    with pytest.raises(UnsupportedFormatError, match="212"):
        parse_header(f"{NAME} 1 2048 10\n{NAME}.dat 212 200/mV\n")


def test_multi_segment_rejected():
    with pytest.raises(UnsupportedFormatError):
        parse_header("rec/2 1 2048 10\nrec.dat 16 200\n")


@pytest.mark.parametrize("text, line_no", [
    (f"{NAME} 1 2048\n", 1),
    (f"{NAME} x 2048 10\n{NAME}.dat 16 200\n", 1),
    (f"{NAME} 1 2048 10\n{NAME}.dat 16\n", 2),
    (f"# c\n{NAME} 1 2048 10\n{NAME}.dat 16 abc\n", 3),
    (f"{NAME} 2 2048 10\n{NAME}.dat 16 200\n", 1),
])
def test_malformed_header_reports_line(text, line_no):
    with pytest.raises(HeaderParseError) as info:
        parse_header(text)
    assert info.value.line_number == line_no


def test_decode_matches_hand_built_file():
    rng = np.random.default_rng(0)
    digital = rng.integers(-32767, 32768, size=(50, 3))
    gains, baselines = [200.0, 1000.0, 12.5], [0, 17, -400]
    hea, dat = wfdb_bytes(NAME, digital, gains, baselines)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rec = decode_signal(dat, parse_header(hea))
    expected = (digital - np.array(baselines)) / np.array(gains)
    assert np.array_equal(rec.samples, expected)
    assert rec.identity.key() == (2, 7, 3, 5)


def test_wrong_length_names_both_sizes():
    digital = np.zeros((10, 2), dtype=int)
    hea, dat = wfdb_bytes(NAME, digital, [200, 200], [0, 0])
    with pytest.raises(WfdbError, match="38 bytes, expected 40"):
        decode_digital(dat[:-2], parse_header(hea))


def test_checksum_mismatch_warns_only():
    digital = np.ones((4, 1), dtype=int)
    hea, dat = wfdb_bytes(NAME, digital, [200], [0])
    hea = hea.replace(" 1 4 0 lead0", " 1 5 0 lead0")
    with pytest.warns(UserWarning, match="checksum"):
        out = decode_digital(dat, parse_header(hea))
    assert out.sum() == 4


def test_identity_from_name_and_overrides():
    assert parse_identity("x/y/" + NAME + ".hea").key() == (2, 7, 3, 5)
    ov = {"odd": {"session": 1, "subject": 2, "gesture": 3, "trial": 4}}
    assert parse_identity("odd.dat", ov).key() == (1, 2, 3, 4)
    with pytest.raises(WfdbError):
        parse_identity("odd")


def test_record_rejects_non_finite():
    with pytest.raises(ValueError):
        _record(np.array([[np.nan, 1.0]]))


def test_encode_overflow_points_at_sample():
    x = np.zeros((5, 2))
    x[3, 1] = 40.0
    with pytest.raises(OverflowError, match="sample 3, channel 1"):
        encode_record(_record(x), gain=1000.0)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 40), c=st.integers(1, 6),
    gain=st.sampled_from([1.0, 200.0, 1000.0, 20000.0, 0.5]),
    seed=st.integers(0, 2**32 - 1),
)
def test_round_trip_is_exact_at_quantization(n, c, gain, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-30000 / gain, 30000 / gain, size=(n, c))
    rec = _record(x)
    hea, dat = encode_record(rec, gain)
    back = decode_signal(dat, parse_header(hea))
    assert np.array_equal(back.samples, quantize(x, gain))
    assert back.identity == rec.identity and back.sampling_rate_hz == rec.sampling_rate_hz


def test_write_and_read_record(tmp_path):
    x = np.arange(12.0).reshape(6, 2) / 10
    base = write_record(tmp_path, _record(x), gain=100.0)
    assert base == tmp_path / record_relpath(_record(x).identity)
    assert base.parent.name == "session2_subject7" and base.parent.parent.name == "Session 2"
    back = read_record(base.with_suffix(".hea"))
    assert np.array_equal(back.samples, quantize(x, 100.0))


def test_read_record_checks_name_against_header(tmp_path):
    base = write_record(tmp_path, _record(np.zeros((3, 1))))
    other = base.with_name("session2_subject7_gesture3_trial6")
    other.with_suffix(".hea").write_bytes(base.with_suffix(".hea").read_bytes())
    other.with_suffix(".dat").write_bytes(base.with_suffix(".dat").read_bytes())
    with pytest.raises(WfdbError, match="disagrees"):
        read_record(other)


# -- scanning --------------------------------------------------------------------


def _tiny_tree(root, grid):
    for s, j, g, t in grid.keys():
        write_record(root, SignalRecord(s, j, g, t, np.zeros((2, 1))))


def test_scan_complete_and_missing(tmp_path):
    grid = Grid(1, 2, 2, 2)
    _tiny_tree(tmp_path, grid)
    m = scan_dataset(tmp_path, grid)
    assert m.complete and len(m.entries) == 8 and not m.warnings
    victim = tmp_path / record_relpath(parse_identity("session1_subject2_gesture1_trial2"))
    victim.with_suffix(".dat").unlink()
    (tmp_path / "notes.csv").write_text("x")
    m = scan_dataset(tmp_path, grid)
    assert m.missing == [(1, 2, 1, 2)]
    assert any("incomplete record pair" in w for w in m.warnings)
    assert any("stray file notes.csv" in w for w in m.warnings)
    assert not m.session_complete(2, 1) and m.session_complete(1, 1)


def test_scan_duplicates_and_flat_layout(tmp_path):
    grid = Grid(1, 1, 1, 1)
    rec = SignalRecord(1, 1, 1, 1, np.zeros((2, 1)))
    base = write_record(tmp_path, rec)
    hea, dat = encode_record(rec)
    (tmp_path / (rec.record_name + ".hea")).write_bytes(hea)
    (tmp_path / (rec.record_name + ".dat")).write_bytes(dat)
    m = scan_dataset(tmp_path, grid)
    assert m.complete and len(m.entries) == 1
    assert any("duplicate" in w for w in m.warnings)
    assert m.path(1, 1, 1, 1).with_suffix(".hea").exists() and base.with_suffix(".dat").exists()


def test_scan_bad_roots(tmp_path):
    with pytest.raises(FileNotFoundError):
        scan_dataset(tmp_path / "nope")
    f = tmp_path / "file"
    f.write_text("")
    with pytest.raises(NotADirectoryError):
        scan_dataset(f)
    m = scan_dataset(tmp_path, Grid(1, 1, 1, 1))
    assert not m.entries and m.missing == [(1, 1, 1, 1)]


def test_manifest_json_round_trip(tmp_path):
    grid = Grid(1, 1, 2, 2)
    _tiny_tree(tmp_path, grid)
    m = scan_dataset(tmp_path, grid)
    back = DatasetManifest.from_json(m.to_json())
    assert back.entries == m.entries and back.grid == grid
    assert json.loads(back.to_json()) == json.loads(m.to_json())


def test_decode_two_by_two_example():
    hea = f"{NAME} 2 2048 2\n{NAME}.dat 16 500/mV\n{NAME}.dat 16 500/mV\n"
    dat = np.array([100, -100, 0, 32767], dtype="<i2").tobytes()
    rec = decode_signal(dat, parse_header(hea))
    assert np.array_equal(rec.samples, [[0.2, -0.2], [0.0, 65.534]])


def test_minimal_header():
    h = parse_header("session1_subject1_gesture1_trial1 1 1 1\nsession1_subject1_gesture1_trial1.dat 16 1\n")
    assert (h.channel_count, h.sample_count, h.sampling_rate_hz, h.gains[0]) == (1, 1, 1.0, 1.0)
