"""
From raw record to feature vectors
==================================

Synthesize one trial, store it in the 16-bit WFDB layout, read it back and
turn it into windowed band features.
"""

import tempfile

import numpy as np

from emgauth import FOREARM, FdtConfig, WindowSpec, extract_series, read_record, write_record
from emgauth.dsp import DEFAULT_BANDS, fdt_features
from emgauth.grabmyo_io import quantize
from emgauth.synthgen import SynthConfig, profiles, record_gain, synthesize_record

cfg = SynthConfig(subject_count=2, sample_count=4096, channel_count=32)
rec = synthesize_record(cfg, profiles(cfg)[1], session=1, gesture=5, trial=2)
print(rec.record_name, rec.samples.shape, rec.units)

# quantization is the only loss on disk
gain = record_gain(rec, cfg)
root = tempfile.mkdtemp()
base = write_record(root, rec, gain)
back = read_record(base)
print("written to", base)
print("bit-exact after quantization:", np.array_equal(back.samples, quantize(rec.samples, gain)))

# a pure tone lights up exactly one band
t = np.arange(410) / 2048.0
for f in (50, 200, 440):
    v = fdt_features(np.sin(2 * np.pi * f * t)).values
    lo, hi = DEFAULT_BANDS[int(np.argmax(v))]
    print(f"{f:4d} Hz tone -> strongest band {lo:.0f}-{hi:.0f} Hz")

# windows of 410 samples every 102, six bands per channel
series = extract_series(back, FOREARM, WindowSpec(), FdtConfig())
print("windows:", len(series), "feature dim:", series.dim)
print("first window, first channel:", np.round(series.vectors[0, :6], 2))

# scaling the signal shifts every log feature by the same amount
x = back.samples[:410]
shift = fdt_features(10 * x).values - fdt_features(x).values
print("log(10) =", round(np.log(10), 6), " observed shift range:", shift.min().round(6), shift.max().round(6))
