import sys

import pytest

from emgauth.grabmyo_io import Grid, scan_dataset
from emgauth.synthgen import SynthConfig, generate

SMALL = SynthConfig(subject_count=4, sample_count=1024, channel_count=8, separation=1.0,
                    session_drift=0.2, noise_level=0.05, rng_seed=11)


@pytest.fixture(scope="session")
def small_tree(tmp_path_factory):
    """Complete 4-subject synthetic tree, 8 channels, 1024 samples per record."""
    root = tmp_path_factory.mktemp("small_tree")
    generate(SMALL, root)
    return root


@pytest.fixture(scope="session")
def small_manifest(small_tree):
    return scan_dataset(small_tree, Grid(3, SMALL.subject_count, 17, 7))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
