"""Deterministic synthetic EMG-like recordings with known band signatures.

Each channel is white Gaussian noise shaped in the frequency domain by a
piecewise-constant amplitude response: inside FDT band ``b`` the amplitude
is ``exp(l)`` with the log-amplitude

    l = gesture_pattern[g, c, b] + separation * user[j, g, c, b]
        + session_drift * drift[j, s, c, b] + noise_level * trial_noise

and zero outside the 20-450 Hz range. The shaping is an ideal (circular)
filter applied to the whole record, so expected window spectra, and hence
expected FDT features, follow in closed form (see :func:`expected_features`).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import DEFAULT_BANDS, FOREARM, ChannelSelection, FdtConfig, WindowSpec, band_bins
from .grabmyo_io import SignalRecord, write_record

GROUND_TRUTH_FILE = "ground_truth.json"
_DIGITAL_LIMIT = 30000.0


@dataclass(frozen=True)
class SynthConfig:
    subject_count: int = 43
    session_count: int = 3
    gesture_count: int = 17
    trial_count: int = 7
    sample_count: int = 10240
    channel_count: int = 32
    sampling_rate_hz: float = 2048.0
    separation: float = 0.5
    session_drift: float = 0.2
    noise_level: float = 0.05
    rng_seed: int = 0
    gesture_spread: float = 0.6
    amplitude_mv: float = 0.1
    gain: float = 20000.0
    bands: tuple[tuple[float, float], ...] = DEFAULT_BANDS

    def __post_init__(self):
        for name in ("subject_count", "session_count", "gesture_count", "trial_count",
                     "sample_count", "channel_count"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("separation", "session_drift", "noise_level", "gesture_spread"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.sampling_rate_hz > 0 or not self.amplitude_mv > 0 or not self.gain > 0:
            raise ValueError("sampling rate, amplitude and gain must be positive")
        object.__setattr__(self, "bands", tuple((float(a), float(b)) for a, b in self.bands))

    @property
    def rest_gesture(self) -> int | None:
        return 17 if self.gesture_count >= 17 else None


@dataclass(frozen=True, eq=False)
class SubjectProfile:
    subject: int
    signature: np.ndarray  # (gestures, channels, bands) log-amplitudes
    drift: np.ndarray  # (sessions, channels, bands)

    def log_amplitude(self, gesture: int, session: int) -> np.ndarray:
        return self.signature[gesture - 1] + self.drift[session - 1]


def _gesture_patterns(cfg: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.rng_seed, 0])
    shape = (cfg.gesture_count, cfg.channel_count, len(cfg.bands))
    pattern = cfg.gesture_spread * rng.standard_normal(shape)
    if cfg.rest_gesture is not None:
        pattern[cfg.rest_gesture - 1] -= 2.0
    return pattern


def subject_profile(cfg: SynthConfig, subject: int, patterns: np.ndarray | None = None) -> SubjectProfile:
    if patterns is None:
        patterns = _gesture_patterns(cfg)
    shape = patterns.shape
    user = np.random.default_rng([cfg.rng_seed, 2, subject]).standard_normal(shape)
    drift = np.stack([
        np.random.default_rng([cfg.rng_seed, 3, subject, s]).standard_normal(shape[1:])
        for s in range(1, cfg.session_count + 1)
    ])
    return SubjectProfile(subject, patterns + cfg.separation * user, cfg.session_drift * drift)


def profiles(cfg: SynthConfig) -> dict[int, SubjectProfile]:
    patterns = _gesture_patterns(cfg)
    return {j: subject_profile(cfg, j, patterns) for j in range(1, cfg.subject_count + 1)}


def _bin_band(n: int, cfg: SynthConfig) -> np.ndarray:
    """Band index of each rfft bin of a length-``n`` signal, -1 outside the bands."""
    out = np.full(n // 2 + 1, -1)
    for b, bins in enumerate(band_bins(n, cfg.sampling_rate_hz, cfg.bands)):
        out[bins] = b
    return out


def _amplitude_response(log_amp: np.ndarray, bin_band: np.ndarray) -> np.ndarray:
    """(n_bins, channels) amplitude response from (channels, bands) log-amplitudes."""
    amp = np.exp(log_amp).T  # (bands, channels)
    resp = np.zeros((bin_band.size, log_amp.shape[0]))
    inside = bin_band >= 0
    resp[inside] = amp[bin_band[inside]]
    return resp


def synthesize_record(cfg: SynthConfig, profile: SubjectProfile, session: int, gesture: int,
                      trial: int) -> SignalRecord:
    rng = np.random.default_rng([cfg.rng_seed, 4, session, profile.subject, gesture, trial])
    n, c = cfg.sample_count, cfg.channel_count
    noise = rng.standard_normal((n, c))
    trial_noise = cfg.noise_level * rng.standard_normal((c, len(cfg.bands)))
    log_amp = profile.log_amplitude(gesture, session) + trial_noise
    spectrum = np.fft.rfft(noise, axis=0) * _amplitude_response(log_amp, _bin_band(n, cfg))
    samples = cfg.amplitude_mv * np.fft.irfft(spectrum, n=n, axis=0)
    return SignalRecord(session, profile.subject, gesture, trial, samples, cfg.sampling_rate_hz)


def record_gain(record: SignalRecord, cfg: SynthConfig) -> float:
    """Configured gain, lowered where needed so the record fits 16 bits."""
    peak = float(np.max(np.abs(record.samples)))
    if peak * cfg.gain <= _DIGITAL_LIMIT:
        return cfg.gain
    return math.floor(_DIGITAL_LIMIT / peak)


# -- expected features ------------------------------------------------------------


def _window_power(power: np.ndarray, n: int, wspec: WindowSpec, fs: float, bins: np.ndarray) -> np.ndarray:
    """Expected |X_k|^2 of a rectangular window over a circular process.

    ``power`` is (n_bins_full, channels): |H|^2 on the rfft grid of the whole
    record. Returns (len(bins), channels).
    """
    w = wspec.window_len_samples
    full = np.concatenate([power, power[1:(n + 1) // 2][::-1]])  # two-sided, length n
    nu = np.arange(n)[None, :] / n - bins[:, None] / w  # (k, n)
    s = np.sin(np.pi * nu)
    with np.errstate(divide="ignore", invalid="ignore"):
        kern = np.where(np.abs(s) < 1e-12, float(w * w), (np.sin(np.pi * nu * w) / s) ** 2)
    return kern @ full / n


def expected_features(profile: SubjectProfile, gesture: int, session: int, cfg: SynthConfig,
                      selection: ChannelSelection = FOREARM, wspec: WindowSpec = WindowSpec(),
                      fdt: FdtConfig = FdtConfig()) -> np.ndarray:
    """Expected FDT feature vector (trial noise excluded) for one gesture and day.

    Includes the common average reference, spectral leakage of the
    rectangular window and a second-order correction for the logarithm.
    """
    if fdt.taper != "none":
        raise NotImplementedError("expected features are derived for the rectangular window only")
    n = cfg.sample_count
    idx = list(selection.channel_indices)
    k = len(idx)
    resp = _amplitude_response(profile.log_amplitude(gesture, session)[idx], _bin_band(n, cfg))
    p = (cfg.amplitude_mv * resp) ** 2
    # CAR of independent channels: (1 - 2/K) P_c + (1/K^2) sum_c' P_c'
    p = (1.0 - 2.0 / k) * p + p.sum(axis=1, keepdims=True) / k**2
    blocks = []
    for bins in band_bins(wspec.window_len_samples, cfg.sampling_rate_hz, fdt.bands):
        ex2 = _window_power(p, n, wspec, cfg.sampling_rate_hz, bins)  # (k_bins, K)
        if fdt.spectrum == "power":
            mean, var = ex2.sum(axis=0), (ex2**2).sum(axis=0)
        else:
            mean = (math.sqrt(math.pi) / 2.0) * np.sqrt(ex2).sum(axis=0)
            var = ((1.0 - math.pi / 4.0) * ex2).sum(axis=0)
        value = np.maximum(mean, fdt.epsilon_floor)
        if fdt.transform == "log":
            value = np.log(value) - var / (2.0 * value**2)
        blocks.append(value)
    return np.stack(blocks, axis=1).reshape(-1)


# -- dataset tree -------------------------------------------------------------------


@dataclass
class GroundTruth:
    config: SynthConfig
    profiles: dict[int, SubjectProfile]
    gains: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "config": asdict(self.config),
            "profiles": {
                str(j): {"signature": p.signature.tolist(), "drift": p.drift.tolist()}
                for j, p in sorted(self.profiles.items())
            },
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        doc = json.loads(text)
        cfg = doc["config"]
        cfg["bands"] = tuple(tuple(b) for b in cfg["bands"])
        cfg = SynthConfig(**cfg)
        profs = {
            int(j): SubjectProfile(int(j), np.asarray(p["signature"]), np.asarray(p["drift"]))
            for j, p in doc["profiles"].items()
        }
        return cls(cfg, profs)


def _write_block(args):
    cfg, profile, session, root = args
    for g in range(1, cfg.gesture_count + 1):
        for t in range(1, cfg.trial_count + 1):
            record = synthesize_record(cfg, profile, session, g, t)
            write_record(root, record, record_gain(record, cfg))


def generate(cfg: SynthConfig, root, jobs: int = 1) -> GroundTruth:
    """Write a complete dataset tree below ``root`` and ``ground_truth.json`` in it."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create synthetic dataset root {root}: {exc}") from exc
    profs = profiles(cfg)
    tasks = [
        (cfg, profs[j], s, root)
        for s in range(1, cfg.session_count + 1)
        for j in range(1, cfg.subject_count + 1)
    ]
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                list(pool.map(_write_block, tasks))
        else:
            for task in tasks:
                _write_block(task)
    except OSError as exc:
        raise OSError(f"writing synthetic record failed at {exc.filename}: {exc.strerror}") from exc
    truth = GroundTruth(cfg, profs)
    (root / GROUND_TRUTH_FILE).write_text(truth.to_json())
    return truth
