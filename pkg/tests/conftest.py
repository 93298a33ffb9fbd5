import numpy as np
import pytest
import scipy.signal

from spatial_translate.audio import SAMPLE_RATE
from spatial_translate.corpus import synthetic_speech
from spatial_translate.scene import synthetic_brir_set


def bandlimited_noise(n, rng, cutoff=7600.0, fade_s=0.05):
    """White noise low-passed below ``cutoff`` with Hann fades at both ends."""
    taps = scipy.signal.firwin(255, cutoff, fs=SAMPLE_RATE)
    x = scipy.signal.lfilter(taps, 1.0, rng.standard_normal(n + 255))[255:]
    f = int(fade_s * SAMPLE_RATE)
    if f == 0:
        return x
    ramp = np.hanning(2 * f)
    x[:f] *= ramp[:f]
    x[-f:] *= ramp[f:]
    return x


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def brirs():
    return synthetic_brir_set()


@pytest.fixture(scope="session")
def speech_pair():
    rng = np.random.default_rng(99)
    return synthetic_speech(3.0, rng), synthetic_speech(3.0, rng)


# criterion number -> one-line verdict, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
