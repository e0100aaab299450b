"""Gesture-code EMG authentication: WFDB reading, FDT features, Mahalanobis
templates, weighted-vote fusion and cross-day verification protocols."""

from .dsp import FOREARM, WRIST, ChannelSelection, FdtConfig, WindowSpec, extract_series
from .fusion import CodeSequence, fuse, normalize_weights
from .grabmyo_io import SignalRecord, read_record, scan_dataset, write_record
from .matcher import Template, enroll, score_attempt, score_vector

__version__ = "0.1.0"

__all__ = [
    "FOREARM", "WRIST", "ChannelSelection", "FdtConfig", "WindowSpec", "extract_series",
    "CodeSequence", "fuse", "normalize_weights",
    "SignalRecord", "read_record", "scan_dataset", "write_record",
    "Template", "enroll", "score_attempt", "score_vector",
]
