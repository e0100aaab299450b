"""Reading and writing the GrabMyo WFDB record layout.

Only the subset of WFDB used by the dataset is supported: single-segment
records whose signals are all stored in format 16 (signed 16-bit,
little-endian, sample-major interleaving) inside one ``.dat`` file.

Records are named ``session{i}_subject{j}_gesture{k}_trial{l}`` and live in
``Session {i}/session{i}_subject{j}/`` below the dataset root.
"""

from __future__ import annotations

import json
import os
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLING_RATE_HZ = 2048.0
SESSIONS = 3
SUBJECTS = 43
GESTURES = 17
TRIALS = 7
REST_GESTURE = 17

# Table III order; index 17 is the rest trial.
GESTURE_NAMES = {
    1: "LP", 2: "TA", 3: "TLFO", 4: "TIFO", 5: "TLFE", 6: "TIFE", 7: "IMFE",
    8: "LFE", 9: "IFE", 10: "TE", 11: "WF", 12: "WE", 13: "FS", 14: "FP",
    15: "HO", 16: "HC", 17: "REST",
}

_NAME_RE = re.compile(
    r"^session(\d+)_subject(\d+)_gesture(\d+)_trial(\d+)$", re.IGNORECASE
)
_GAIN_RE = re.compile(
    r"^(?P<gain>[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?)"
    r"(\((?P<baseline>[-+]?\d+)\))?(/(?P<units>\S+))?$"
)
_DIGITAL_MAX = 32767
_DIGITAL_MIN = -32767  # -32768 is the WFDB invalid-sample marker
# distributed alongside the records; not reported as stray
METADATA_FILES = frozenset({"ground_truth.json", "readme.txt", "fileinfo.txt", "RECORDS", "SHA256SUMS.txt", "LICENSE.txt"})


class WfdbError(ValueError):
    """Malformed or inconsistent WFDB content."""


class HeaderParseError(WfdbError):
    def __init__(self, line_number: int, line: str, reason: str):
        self.line_number = line_number
        self.line = line
        self.reason = reason
        super().__init__(f"header line {line_number}: {reason}: {line!r}")


class UnsupportedFormatError(WfdbError):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    file_name: str
    fmt: str
    gain: float
    baseline: int = 0
    units: str = "mV"
    adc_resolution: int = 16
    adc_zero: int = 0
    initial_value: int | None = None
    checksum: int | None = None
    label: str = ""


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    channel_count: int
    sample_count: int
    sampling_rate_hz: float
    channels: tuple[ChannelSpec, ...]

    def __post_init__(self):
        if self.channel_count != len(self.channels):
            raise WfdbError(
                f"header declares {self.channel_count} channels but lists "
                f"{len(self.channels)}"
            )
        if self.channel_count <= 0 or self.sample_count <= 0:
            raise WfdbError("channel_count and sample_count must be positive")
        if not self.sampling_rate_hz > 0:
            raise WfdbError("sampling rate must be positive")

    @property
    def gains(self) -> np.ndarray:
        return np.array([c.gain for c in self.channels], dtype=float)

    @property
    def baselines(self) -> np.ndarray:
        return np.array([c.baseline for c in self.channels], dtype=float)

    @property
    def units(self) -> list[str]:
        return [c.units for c in self.channels]

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.channels]


@dataclass(frozen=True)
class Identity:
    session: int
    subject: int
    gesture: int
    trial: int

    @property
    def record_name(self) -> str:
        return (
            f"session{self.session}_subject{self.subject}"
            f"_gesture{self.gesture}_trial{self.trial}"
        )

    def key(self) -> tuple[int, int, int, int]:
        return (self.session, self.subject, self.gesture, self.trial)


@dataclass(frozen=True, eq=False)
class SignalRecord:
    """One trial: ``samples`` is (sample_count, channel_count) in physical units."""

    session: int
    subject: int
    gesture: int
    trial: int
    samples: np.ndarray
    sampling_rate_hz: float = SAMPLING_RATE_HZ
    units: str = "mV"

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 2:
            raise ValueError("samples must be a 2-D (samples x channels) matrix")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain NaN or Inf")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if not self.sampling_rate_hz > 0:
            raise ValueError("sampling rate must be positive")

    @property
    def identity(self) -> Identity:
        return Identity(self.session, self.subject, self.gesture, self.trial)

    @property
    def record_name(self) -> str:
        return self.identity.record_name

    @property
    def sample_count(self) -> int:
        return self.samples.shape[0]

    @property
    def channel_count(self) -> int:
        return self.samples.shape[1]


def parse_identity(name: str, overrides: dict | None = None) -> Identity:
    """Identity encoded in a record name, or taken from ``overrides``."""
    stem = Path(name).name
    for ext in (".hea", ".dat"):
        if stem.endswith(ext):
            stem = stem[: -len(ext)]
    if overrides and stem in overrides:
        o = overrides[stem]
        return Identity(int(o["session"]), int(o["subject"]), int(o["gesture"]), int(o["trial"]))
    m = _NAME_RE.match(stem)
    if m is None:
        raise WfdbError(f"cannot parse session/subject/gesture/trial from {name!r}")
    return Identity(*(int(g) for g in m.groups()))


def _parse_sampling_rate(token: str) -> float:
    # "fs/counter(base)" -- only the sampling frequency is kept
    return float(token.split("/")[0])


def parse_header(data: bytes | str) -> RecordHeader:
    text = data.decode("ascii") if isinstance(data, bytes) else data
    record_line = None
    signal_lines: list[tuple[int, str]] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if record_line is None:
            record_line = (number, line)
        else:
            signal_lines.append((number, line))
    if record_line is None:
        raise HeaderParseError(0, "", "empty header")

    number, line = record_line
    fields_ = line.split()
    if len(fields_) < 4:
        raise HeaderParseError(
            number, line, "record line needs name, signal count, frequency and length"
        )
    name, nsig = fields_[0], fields_[1]
    if "/" in name:
        raise UnsupportedFormatError("multi-segment records are not supported")
    try:
        channel_count = int(nsig)
        fs = _parse_sampling_rate(fields_[2])
        sample_count = int(fields_[3])
    except ValueError as exc:
        raise HeaderParseError(number, line, f"bad numeric field ({exc})") from None
    if channel_count <= 0 or sample_count <= 0 or fs <= 0:
        raise HeaderParseError(number, line, "counts and frequency must be positive")
    if len(signal_lines) < channel_count:
        raise HeaderParseError(
            number, line,
            f"declares {channel_count} signals but {len(signal_lines)} signal lines follow",
        )

    channels = []
    for number, line in signal_lines[:channel_count]:
        channels.append(_parse_signal_line(number, line))
    if len({c.file_name for c in channels}) != 1:
        raise UnsupportedFormatError("signals spread over several .dat files are not supported")
    return RecordHeader(name, channel_count, sample_count, fs, tuple(channels))


def _parse_signal_line(number: int, line: str) -> ChannelSpec:
    parts = line.split()
    if len(parts) < 3:
        raise HeaderParseError(number, line, "signal line needs file name, format and gain")
    file_name, fmt, gain_spec = parts[0], parts[1], parts[2]
    if fmt != "16":
        raise UnsupportedFormatError(
            f"header line {number}: unsupported storage format {fmt!r} (only 16)"
        )
    m = _GAIN_RE.match(gain_spec)
    if m is None:
        raise HeaderParseError(number, line, f"malformed gain field {gain_spec!r}")
    gain = float(m.group("gain"))
    if gain == 0:
        gain = 200.0  # WFDB default for an unspecified gain
    try:
        adc_res = int(parts[3]) if len(parts) > 3 else 16
        adc_zero = int(parts[4]) if len(parts) > 4 else 0
        init_val = int(parts[5]) if len(parts) > 5 else None
        checksum = int(parts[6]) if len(parts) > 6 else None
    except ValueError as exc:
        raise HeaderParseError(number, line, f"bad numeric field ({exc})") from None
    baseline = m.group("baseline")
    baseline = int(baseline) if baseline is not None else adc_zero
    label = " ".join(parts[8:]) if len(parts) > 8 else ""
    return ChannelSpec(
        file_name=file_name,
        fmt=fmt,
        gain=gain,
        baseline=baseline,
        units=m.group("units") or "mV",
        adc_resolution=adc_res,
        adc_zero=adc_zero,
        initial_value=init_val,
        checksum=checksum,
        label=label,
    )


def _checksum(digital: np.ndarray) -> np.ndarray:
    """16-bit two's complement column sums, as WFDB stores them."""
    s = digital.astype(np.int64).sum(axis=0) & 0xFFFF
    return np.where(s >= 0x8000, s - 0x10000, s)


def decode_digital(data: bytes, header: RecordHeader) -> np.ndarray:
    expected = header.sample_count * header.channel_count * 2
    if len(data) != expected:
        raise WfdbError(
            f"{header.record_name}: signal file has {len(data)} bytes, "
            f"expected {expected} ({header.sample_count} samples x "
            f"{header.channel_count} channels x 2)"
        )
    digital = np.frombuffer(data, dtype="<i2").reshape(
        header.sample_count, header.channel_count
    )
    stored = [c.checksum for c in header.channels]
    if any(c is not None for c in stored):
        actual = _checksum(digital)
        bad = [i for i, c in enumerate(stored) if c is not None and c != actual[i]]
        if bad:
            warnings.warn(
                f"{header.record_name}: checksum mismatch on channels {bad}",
                stacklevel=3,
            )
    return digital


def decode_signal(
    data: bytes, header: RecordHeader, overrides: dict | None = None
) -> SignalRecord:
    """Convert the raw ``.dat`` bytes of a record into physical units."""
    identity = parse_identity(header.record_name, overrides)
    digital = decode_digital(data, header)
    samples = (digital - header.baselines) / header.gains
    units = header.channels[0].units
    return SignalRecord(
        *identity.key(), samples=samples, sampling_rate_hz=header.sampling_rate_hz, units=units
    )


def quantize(samples: np.ndarray, gain) -> np.ndarray:
    """Values that survive an encode/decode cycle at ``gain``."""
    gain = np.broadcast_to(np.asarray(gain, dtype=float), (np.shape(samples)[1],))
    return np.round(np.asarray(samples, dtype=float) * gain) / gain


def _format_number(x: float) -> str:
    text = repr(float(x))
    return text[:-2] if text.endswith(".0") else text


def encode_record(record: SignalRecord, gain=1000.0) -> tuple[bytes, bytes]:
    """Header and signal bytes for ``record`` quantized at ``gain`` units per ADU."""
    if record.sample_count <= 0 or record.channel_count <= 0:
        raise WfdbError("cannot encode an empty record")
    gains = np.broadcast_to(np.asarray(gain, dtype=float), (record.channel_count,))
    if np.any(~np.isfinite(gains)) or np.any(gains <= 0):
        raise WfdbError("gain must be positive and finite")
    digital = np.round(record.samples * gains)
    over = (digital > _DIGITAL_MAX) | (digital < _DIGITAL_MIN)
    if over.any():
        sample, channel = np.argwhere(over)[0]
        raise OverflowError(
            f"{record.record_name}: value {record.samples[sample, channel]!r} at "
            f"sample {sample}, channel {channel} exceeds the 16-bit range at gain "
            f"{gains[channel]!r}"
        )
    digital = digital.astype("<i2")
    name = record.record_name
    checks = _checksum(digital)
    lines = [f"{name} {record.channel_count} {_format_number(record.sampling_rate_hz)} {record.sample_count}"]
    for ch in range(record.channel_count):
        lines.append(
            f"{name}.dat 16 {_format_number(gains[ch])}(0)/{record.units} 16 0 "
            f"{int(digital[0, ch])} {int(checks[ch])} 0 ch{ch + 1}"
        )
    return ("\n".join(lines) + "\n").encode("ascii"), digital.tobytes()


def record_relpath(identity: Identity) -> Path:
    return (
        Path(f"Session {identity.session}")
        / f"session{identity.session}_subject{identity.subject}"
        / identity.record_name
    )


def write_record(root, record: SignalRecord, gain=1000.0) -> Path:
    """Write ``record`` below ``root`` in the dataset layout; returns the base path."""
    base = Path(root) / record_relpath(record.identity)
    base.parent.mkdir(parents=True, exist_ok=True)
    hea, dat = encode_record(record, gain)
    base.with_suffix(".hea").write_bytes(hea)
    base.with_suffix(".dat").write_bytes(dat)
    return base


def read_record(base, overrides: dict | None = None) -> SignalRecord:
    """Read ``base.hea``/``base.dat`` (``base`` may carry either suffix)."""
    base = Path(base)
    if base.suffix in (".hea", ".dat"):
        base = base.with_suffix("")
    header = parse_header(base.with_suffix(".hea").read_bytes())
    dat_path = base.parent / header.channels[0].file_name
    record = decode_signal(dat_path.read_bytes(), header, overrides)
    file_identity = parse_identity(base.name, overrides)
    if file_identity != record.identity:
        raise WfdbError(
            f"{base}: header record name {header.record_name!r} disagrees with file name"
        )
    return record


# -- manifest ------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    sessions: int = SESSIONS
    subjects: int = SUBJECTS
    gestures: int = GESTURES
    trials: int = TRIALS

    def keys(self):
        for s in range(1, self.sessions + 1):
            for j in range(1, self.subjects + 1):
                for g in range(1, self.gestures + 1):
                    for t in range(1, self.trials + 1):
                        yield (s, j, g, t)


@dataclass(frozen=True)
class ManifestEntry:
    session: int
    subject: int
    gesture: int
    trial: int
    path: str  # base path relative to the root, POSIX separators, no suffix

    def key(self) -> tuple[int, int, int, int]:
        return (self.session, self.subject, self.gesture, self.trial)


@dataclass
class DatasetManifest:
    root: str
    entries: list[ManifestEntry]
    missing: list[tuple[int, int, int, int]]
    warnings: list[str] = field(default_factory=list)
    grid: Grid = field(default_factory=Grid)

    def __post_init__(self):
        keys = [e.key() for e in self.entries]
        if len(keys) != len(set(keys)):
            raise WfdbError("manifest contains duplicate (session, subject, gesture, trial) keys")
        self._index = {e.key(): e for e in self.entries}

    @property
    def complete(self) -> bool:
        return not self.missing

    def subjects(self) -> list[int]:
        return sorted({e.subject for e in self.entries})

    def has(self, session, subject, gesture, trial) -> bool:
        return (session, subject, gesture, trial) in self._index

    def path(self, session, subject, gesture, trial) -> Path:
        return Path(self.root) / self._index[(session, subject, gesture, trial)].path

    def session_complete(self, subject: int, session: int, gestures=None, trials=None) -> bool:
        gestures = gestures or range(1, self.grid.gestures + 1)
        trials = trials or range(1, self.grid.trials + 1)
        return all(self.has(session, subject, g, t) for g in gestures for t in trials)

    def completeness(self) -> dict[int, dict[int, bool]]:
        """``{subject: {session: complete}}`` over the expected grid."""
        return {
            j: {s: self.session_complete(j, s) for s in range(1, self.grid.sessions + 1)}
            for j in range(1, self.grid.subjects + 1)
        }

    def to_json(self) -> str:
        doc = {
            "root": self.root,
            "grid": vars(self.grid),
            "entries": [vars(e) for e in self.entries],
            "missing": [list(k) for k in self.missing],
            "warnings": self.warnings,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return cls(
            root=doc["root"],
            entries=[ManifestEntry(**e) for e in doc["entries"]],
            missing=[tuple(k) for k in doc["missing"]],
            warnings=list(doc.get("warnings", [])),
            grid=Grid(**doc["grid"]),
        )


def load_overrides(path) -> dict:
    """Name-remapping file: ``{record_stem: {session, subject, gesture, trial}}``."""
    return json.loads(Path(path).read_text())


def scan_dataset(root, grid: Grid | None = None, overrides: dict | None = None) -> DatasetManifest:
    """Index every ``.hea``/``.dat`` pair below ``root``.

    Records need not sit in their canonical sub-folder; identity comes from
    the file name. Stray files and half pairs are reported as warnings.
    """
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if not root.is_dir():
        raise NotADirectoryError(f"dataset root {root} is not a directory")
    grid = grid or Grid()

    files: dict[str, set[str]] = {}
    stray: list[str] = []

    def onerror(exc):
        raise PermissionError(f"cannot read {exc.filename}: {exc.strerror}")

    for dirpath, _dirnames, filenames in os.walk(root, onerror=onerror):
        for name in filenames:
            rel = Path(dirpath, name).relative_to(root).as_posix()
            stem, ext = os.path.splitext(rel)
            if ext in (".hea", ".dat"):
                files.setdefault(stem, set()).add(ext)
            elif name not in METADATA_FILES:
                stray.append(rel)

    entries: dict[tuple, ManifestEntry] = {}
    notes = []
    for stem in sorted(files):
        exts = files[stem]
        if exts != {".hea", ".dat"}:
            have = "".join(sorted(exts))
            notes.append(f"incomplete record pair {stem} (only {have})")
            continue
        try:
            ident = parse_identity(stem, overrides)
        except WfdbError:
            notes.append(f"unrecognised record name {stem}")
            continue
        if ident.key() in entries:
            notes.append(f"duplicate record {stem} (kept {entries[ident.key()].path})")
            continue
        entries[ident.key()] = ManifestEntry(*ident.key(), path=stem)
    notes.extend(f"stray file {p}" for p in sorted(stray))

    missing = [k for k in grid.keys() if k not in entries]
    return DatasetManifest(
        root=str(root),
        entries=[entries[k] for k in sorted(entries)],
        missing=missing,
        warnings=notes,
        grid=grid,
    )
