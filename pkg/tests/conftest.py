import numpy as np
import pytest

from painmkl import features, ingest, synth


def cohort_table(noise_sd=0.5, n_sessions=38, seed=0, feature_set="spline"):
    """Windows and feature table of a synthetic cohort with the default profiles."""
    profiles = synth.with_noise(synth.default_profiles(), noise_sd=noise_sd)
    cohort = synth.generate_cohort(profiles, seed=seed, n_sessions=n_sessions)
    windows = []
    for s in cohort.sessions:
        windows += ingest.extract_windows(ingest.preprocess_session(s), 20.0, 6, 0)
    return cohort, windows, features.featurize(windows, feature_set)


@pytest.fixture(scope="session")
def small_cohort():
    return cohort_table(n_sessions=9, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
