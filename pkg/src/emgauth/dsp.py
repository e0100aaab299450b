"""Feature extraction: channel selection, common average reference,
sliding windows and frequency-division (FDT) band features.

For a window of ``W`` samples the magnitude spectrum is taken over the
positive-frequency bins ``1..W//2``. Bin ``k`` (frequency ``k*fs/W``) belongs
to band ``[f_low, f_high)``; the last band also keeps its upper edge. Each
feature is ``log(max(sum of magnitudes in band, epsilon_floor))`` and the
vector is laid out channel by channel, bands ascending inside a channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grabmyo_io import SignalRecord

DEFAULT_BANDS: tuple[tuple[float, float], ...] = (
    (20.0, 92.0), (92.0, 163.0), (163.0, 235.0),
    (235.0, 307.0), (307.0, 378.0), (378.0, 450.0),
)
FEATURE_FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


def _default_channel_map() -> dict[str, list[int]]:
    text = resources.files("emgauth").joinpath("data/channels.json").read_text()
    return {k: v for k, v in json.loads(text).items() if not k.startswith("_")}


@dataclass(frozen=True)
class ChannelSelection:
    name: str
    channel_indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.channel_indices)
        if len(set(idx)) != len(idx):
            raise ConfigError(f"selection {self.name!r} repeats a channel index")
        if any(i < 0 for i in idx):
            raise ConfigError(f"selection {self.name!r} has a negative channel index")
        object.__setattr__(self, "channel_indices", idx)

    def __len__(self):
        return len(self.channel_indices)

    @classmethod
    def named(cls, name: str, channel_map: dict | None = None) -> "ChannelSelection":
        channel_map = channel_map or _default_channel_map()
        try:
            return cls(name, tuple(channel_map[name]))
        except KeyError:
            raise ConfigError(
                f"unknown channel selection {name!r}; known: {sorted(channel_map)}"
            ) from None

    def check(self, channel_count: int) -> None:
        bad = [i for i in self.channel_indices if i >= channel_count]
        if bad:
            raise ConfigError(
                f"selection {self.name!r} uses channels {bad} but the record has "
                f"{channel_count} channels"
            )


FOREARM = ChannelSelection.named("forearm")
WRIST = ChannelSelection.named("wrist")


@dataclass(frozen=True)
class WindowSpec:
    window_len_samples: int = 410
    step_samples: int = 102

    def __post_init__(self):
        if self.window_len_samples <= 0 or self.step_samples <= 0:
            raise ConfigError("window length and step must be positive")
        if self.step_samples > self.window_len_samples:
            raise ConfigError("step longer than the window would leave gaps")

    @classmethod
    def from_ms(cls, sampling_rate_hz: float, width_ms: float = 200.0, overlap_ms: float = 150.0):
        """Window of ``width_ms`` rounded to the nearest sample, step rounded down."""
        width = int(round(width_ms * sampling_rate_hz / 1000.0))
        step = int(np.floor((width_ms - overlap_ms) * sampling_rate_hz / 1000.0))
        return cls(width, step)

    def count(self, n_samples: int) -> int:
        if n_samples < self.window_len_samples:
            return 0
        return (n_samples - self.window_len_samples) // self.step_samples + 1


@dataclass(frozen=True)
class FdtConfig:
    bands: tuple[tuple[float, float], ...] = DEFAULT_BANDS
    transform: str = "log"
    epsilon_floor: float = 1e-12
    taper: str = "none"  # none | hann
    spectrum: str = "amplitude"  # amplitude | power
    notch_hz: float | None = None

    def __post_init__(self):
        bands = tuple((float(lo), float(hi)) for lo, hi in self.bands)
        if not bands:
            raise ConfigError("at least one band is required")
        for (lo, hi), nxt in zip(bands, bands[1:] + (None,)):
            if not lo < hi:
                raise ConfigError(f"band ({lo}, {hi}) is empty")
            if nxt is not None and nxt[0] != hi:
                raise ConfigError(f"bands must be contiguous: ({lo}, {hi}) then {nxt}")
        object.__setattr__(self, "bands", bands)
        if self.transform not in ("log", "none"):
            raise ConfigError(f"unknown transform {self.transform!r}")
        if self.taper not in ("none", "hann"):
            raise ConfigError(f"unknown taper {self.taper!r}")
        if self.spectrum not in ("amplitude", "power"):
            raise ConfigError(f"unknown spectrum {self.spectrum!r}")
        if not self.epsilon_floor > 0:
            raise ConfigError("epsilon_floor must be positive")

    @property
    def n_bands(self) -> int:
        return len(self.bands)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    selection: str = ""
    window_index: int = 0

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class FeatureSeries:
    identity: tuple[int, int, int, int]  # session, subject, gesture, trial
    selection: str
    vectors: np.ndarray  # (n_windows, dim)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float)
        if v.ndim != 2:
            raise ValueError("vectors must be 2-D (windows x features)")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "identity", tuple(int(x) for x in self.identity))

    def __len__(self):
        return self.vectors.shape[0]

    def __iter__(self) -> Iterator[FeatureVector]:
        for k, row in enumerate(self.vectors):
            yield FeatureVector(row, self.selection, k)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def common_average_reference(samples: np.ndarray, selection: ChannelSelection) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    if len(selection) < 2:
        raise ConfigError("common average reference needs at least two channels")
    selection.check(samples.shape[1])
    x = samples[:, list(selection.channel_indices)]
    return x - x.mean(axis=1, keepdims=True)


def segment(samples: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Windows as a read-only (n_windows, window_len, channels) view."""
    samples = np.asarray(samples)
    n = samples.shape[0]
    if n < spec.window_len_samples:
        raise ValueError(
            f"signal of {n} samples is shorter than one window "
            f"({spec.window_len_samples} samples)"
        )
    view = sliding_window_view(samples, spec.window_len_samples, axis=0)
    return np.moveaxis(view[:: spec.step_samples], -1, 1)


def band_bins(window_len: int, sampling_rate_hz: float, bands) -> list[np.ndarray]:
    """rfft bin indices falling in each band."""
    nyquist = sampling_rate_hz / 2.0
    for lo, hi in bands:
        if hi >= nyquist:
            raise ConfigError(
                f"band edge {hi} Hz is not below the Nyquist frequency {nyquist} Hz"
            )
    k = np.arange(1, window_len // 2 + 1)
    # compare k*fs against edge*W to keep integer-valued edges exact
    kf = k * float(sampling_rate_hz)
    out = []
    last = len(bands) - 1
    for i, (lo, hi) in enumerate(bands):
        upper = kf <= hi * window_len if i == last else kf < hi * window_len
        out.append(k[(kf >= lo * window_len) & upper])
    return out


def band_sums(windows: np.ndarray, config: FdtConfig, sampling_rate_hz: float) -> np.ndarray:
    """Pre-transform band sums, shape (n_windows, channels, bands)."""
    windows = np.asarray(windows, dtype=float)
    if windows.ndim == 2:
        windows = windows[None]
    w = windows.shape[1]
    if w < 2:
        raise ValueError("a window needs at least two samples")
    bins = band_bins(w, sampling_rate_hz, config.bands)
    if config.taper == "hann":
        windows = windows * np.hanning(w)[None, :, None]
    spec = np.abs(np.fft.rfft(windows, axis=1))
    if config.spectrum == "power":
        spec = spec**2
    sums = np.stack([spec[:, b, :].sum(axis=1) for b in bins], axis=-1)
    return sums


def fdt_matrix(windows: np.ndarray, config: FdtConfig, sampling_rate_hz: float) -> np.ndarray:
    """FDT features for a stack of windows, shape (n_windows, channels * bands)."""
    sums = band_sums(windows, config, sampling_rate_hz)
    if config.transform == "log":
        sums = np.log(np.maximum(sums, config.epsilon_floor))
    return sums.reshape(sums.shape[0], -1)


def fdt_features(
    window: np.ndarray,
    config: FdtConfig = FdtConfig(),
    sampling_rate_hz: float = 2048.0,
    *,
    selection: str = "",
    window_index: int = 0,
) -> FeatureVector:
    window = np.asarray(window, dtype=float)
    if window.ndim == 1:
        window = window[:, None]
    return FeatureVector(fdt_matrix(window, config, sampling_rate_hz)[0], selection, window_index)


def notch(samples: np.ndarray, freq_hz: float, sampling_rate_hz: float, quality: float = 30.0):
    from scipy.signal import filtfilt, iirnotch

    b, a = iirnotch(freq_hz, quality, fs=sampling_rate_hz)
    return filtfilt(b, a, samples, axis=0)


def extract_series(
    record: SignalRecord,
    selection: ChannelSelection = FOREARM,
    wspec: WindowSpec = WindowSpec(),
    fconfig: FdtConfig = FdtConfig(),
) -> FeatureSeries:
    samples = record.samples
    if fconfig.notch_hz:
        samples = notch(samples, fconfig.notch_hz, record.sampling_rate_hz)
    referenced = common_average_reference(samples, selection)
    windows = segment(referenced, wspec)
    vectors = fdt_matrix(windows, fconfig, record.sampling_rate_hz)
    return FeatureSeries(record.identity.key(), selection.name, vectors)


# -- feature file format -----------------------------------------------------------

_MAGIC = "# emgauth-feature-series"


def write_series(path, series: FeatureSeries) -> None:
    """CSV with a two-line identity header; values written at full precision."""
    s, j, g, t = series.identity
    lines = [
        f"{_MAGIC} v{FEATURE_FORMAT_VERSION}",
        f"# session={s} subject={j} gesture={g} trial={t} "
        f"selection={series.selection} dim={series.dim} windows={len(series)}",
        "window," + ",".join(f"f{i}" for i in range(series.dim)),
    ]
    for k, row in enumerate(series.vectors):
        lines.append(f"{k}," + ",".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_series(path) -> FeatureSeries:
    text = Path(path).read_text().splitlines()
    if len(text) < 3 or not text[0].startswith(_MAGIC):
        raise ValueError(f"{path}: not a feature series file")
    version = text[0].split()[-1]
    if version != f"v{FEATURE_FORMAT_VERSION}":
        raise ValueError(f"{path}: unsupported feature file version {version}")
    meta = dict(item.split("=", 1) for item in text[1][1:].split())
    rows = [line.split(",") for line in text[3:] if line]
    vectors = np.array([[float(x) for x in r[1:]] for r in rows], dtype=float)
    if vectors.size == 0:
        vectors = vectors.reshape(0, int(meta["dim"]))
    if [int(r[0]) for r in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: window indices are not consecutive from 0")
    identity = tuple(int(meta[k]) for k in ("session", "subject", "gesture", "trial"))
    return FeatureSeries(identity, meta["selection"], vectors)
