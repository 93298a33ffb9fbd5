import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from conftest import bandlimited_noise
from oracles import brute_force_phase_mask
from spatial_translate.audio import SAMPLE_RATE, fractional_delay, stft, xcorr_lag
from spatial_translate.corpus import synthetic_noise, synthetic_speech
from spatial_translate.locsep import (
    AngularGrid,
    ArrayGeometry,
    CandidateSource,
    ClusterConfig,
    OracleSeparator,
    PhaseMaskSeparator,
    Separator,
    StreamingLocSep,
    align_to_angle,
    cluster,
    ipd_ild_features,
    localize_and_separate,
    power_gate,
    search,
    segment_similarity,
    tdoa,
)
from spatial_translate.metrics import si_sdr, si_sdr_binaural
from spatial_translate.scene import SceneSpec, spatialize, synthesize_scene, synthetic_brir_set


def _rms(x):
    return float(np.sqrt(np.mean(np.asarray(x) ** 2)))


def test_tdoa_examples():
    assert tdoa(0.0) == 0.0
    assert tdoa(90.0) * 1e6 == pytest.approx(529.41, abs=0.01)
    assert tdoa(270.0) * 1e6 == pytest.approx(-529.41, abs=0.01)


def test_geometry_invariants():
    with pytest.raises(ValueError):
        ArrayGeometry(d=0.0)
    with pytest.raises(ValueError):
        AngularGrid(7)


@settings(max_examples=200, deadline=None)
@given(az=st.floats(0, 360, exclude_max=True))
def test_grid_coverage(az):
    grid = AngularGrid()
    b = grid.bin_of(az)
    assert 0 <= b < 36
    d = abs((az - grid.centers[b] + 180) % 360 - 180)
    assert d <= grid.half_width + 1e-9


@pytest.mark.parametrize("angle", [float(a) for a in AngularGrid().centers])
def test_alignment_zeroes_lag(angle, rng):
    s = bandlimited_noise(6000, rng)
    x = np.stack([s, fractional_delay(s, tdoa(angle))])
    y = align_to_angle(x, angle)
    assert abs(xcorr_lag(y[0], y[1])) <= 1 / SAMPLE_RATE


def test_alignment_identity_and_inverse(rng):
    x = np.stack([bandlimited_noise(6000, rng), bandlimited_noise(6000, rng)])
    np.testing.assert_allclose(align_to_angle(x, 0.0), x, atol=1e-12)
    y = align_to_angle(x, 40.0)
    back = align_to_angle(y, -40.0)
    assert _rms((back - x)[:, 64:-64]) < 1e-4


def test_ipd_ild_features(rng):
    x = rng.standard_normal(8000)
    L = stft(x)
    ipd, ild = ipd_ild_features(L, L)
    np.testing.assert_allclose(ipd, 0, atol=1e-12)
    assert np.all(ild == 0)
    ipd, ild = ipd_ild_features(L, stft(2 * x))
    np.testing.assert_allclose(ild, 20 * np.log10(2), atol=1e-4)  # eps matters on near-empty bins
    np.testing.assert_allclose(ipd, 0, atol=1e-9)
    s = bandlimited_noise(16000, rng, fade_s=0.0)
    L, R = stft(s[1:]), stft(s[:-1])  # right lags by one sample
    ipd, _ = ipd_ild_features(L, R)
    freqs = np.fft.rfftfreq(1024, 1 / SAMPLE_RATE)
    expected = np.angle(np.exp(-2j * np.pi * freqs / SAMPLE_RATE))
    energy = np.abs(L) ** 2
    top = energy > np.percentile(energy, 90)
    err = np.abs(np.angle(np.exp(1j * (ipd - expected))))
    assert np.median(err[top]) < 0.05


def _stream(sep, x, angle, hop=640):
    state = sep.init()
    n = x.shape[1]
    pad = -(-n // hop) * hop - n
    x = np.pad(x, ((0, 0), (0, pad)))
    return np.concatenate([sep.process(state, x[:, k:k + hop], angle) for k in range(0, x.shape[1], hop)], axis=1)


def test_oracle_separator_definition(rng):
    a, b = rng.standard_normal((2, 3200)), rng.standard_normal((2, 3200))
    sep = OracleSeparator([a, b], [30.0, 34.0])
    mix = a + b
    np.testing.assert_array_equal(_stream(sep, mix, 30.0)[:, :3200], a + b)
    assert not np.any(_stream(sep, mix, 210.0))
    only_a = OracleSeparator([a, b], [30.0, 90.0])
    np.testing.assert_array_equal(_stream(only_a, mix, 30.0)[:, :3200], a)


@pytest.fixture(scope="module")
def anechoic():
    return synthetic_brir_set("anechoic", fractional=True)


def _harness(seed, tgt, itf, brirs, gain=0.8):
    # target at the steering angle plus one interferer at least 60 degrees away
    rng = np.random.default_rng(seed)
    a = spatialize(synthetic_speech(3.0, rng), brirs.nearest(tgt), gain)
    b = spatialize(synthetic_speech(3.0, rng), brirs.nearest(itf), gain)
    return a, b


def _masked(x, angle):
    sep = PhaseMaskSeparator()
    return _stream(sep, align_to_angle(x, angle), angle)[:, sep.latency : sep.latency + x.shape[1]]


HARNESS = [(s, t, i) for s, (t, i) in enumerate([(0, 60), (0, 300), (0, 90), (40, 300), (320, 30),
                                                  (20, 280), (80, 0), (60, 330)])]


@pytest.fixture(scope="module")
def delay_only():
    return synthetic_brir_set("delay", ild_db=0.0, fractional=True)


@pytest.mark.parametrize("angle", [0.0, 40.0, 80.0, 300.0])
def test_phase_mask_single_source_passes(delay_only, angle):
    src = spatialize(synthetic_speech(3.0, np.random.default_rng(11)), delay_only.nearest(angle))
    out = _masked(src, angle)
    assert np.corrcoef(out.ravel(), src.ravel())[0, 1] > 0.99


def test_phase_mask_improves_over_mixture(delay_only):
    gains, corrs = [], []
    for seed, tgt, itf in HARNESS:
        a, b = _harness(seed, tgt, itf, delay_only)
        mix = a + b
        out = _masked(mix, tgt)
        gains.append(si_sdr_binaural(out, a) - si_sdr_binaural(mix, a))
        corrs.append(np.corrcoef(out.ravel(), a.ravel())[0, 1])
    assert np.mean(gains) > 3.0
    assert np.median(gains) >= 0.0
    assert np.median(corrs) > 0.8


def test_phase_mask_attenuates_off_target(delay_only):
    ratios = []
    for seed, tgt, itf in HARNESS:
        _, b = _harness(seed, tgt, itf, delay_only)
        ratios.append(_rms(_masked(b, tgt)) / _rms(b))
    assert max(ratios) < 0.3
    assert np.mean(ratios) < 0.2


@pytest.mark.xfail(strict=True, reason="spatial aliasing: wrapped IPD of an off-target source crosses zero near multiples of 1/tdoa")
def test_phase_mask_per_scene_thresholds(delay_only):
    for seed, tgt, itf in HARNESS:
        a, b = _harness(seed, tgt, itf, delay_only)
        mix = a + b
        out = _masked(mix, tgt)
        assert si_sdr_binaural(out, a) - si_sdr_binaural(mix, a) >= 0.0
        assert np.corrcoef(out.ravel(), a.ravel())[0, 1] > 0.9
        assert _rms(_masked(b, tgt)) < 0.1 * _rms(b)


def test_phase_mask_silence():
    sep = PhaseMaskSeparator()
    assert not np.any(_stream(sep, np.zeros((2, 6400)), 0.0))


def test_separator_is_causal(anechoic, rng):
    x = rng.standard_normal((2, 6400))
    y = x.copy()
    y[:, 3200:] = rng.standard_normal((2, 3200))
    sep = PhaseMaskSeparator()
    a, b = _stream(sep, x, 20.0), _stream(sep, y, 20.0)
    np.testing.assert_array_equal(a[:, :3200], b[:, :3200])


def test_power_gate_examples():
    assert not power_gate(np.zeros((2, 16000)))
    assert power_gate(np.full((2, 16000), 0.2))
    x = np.zeros((2, 16000))
    x[:, 4000:5600] = 0.3
    assert power_gate(x)  # 0.3^2 * 0.1 / 0.75 = 0.012
    x[:, 4000:5600] = 0.25
    assert not power_gate(x)  # 0.00833


def test_search_silence():
    assert search(np.zeros((2, 16000))) == []


def _oracle_scene(angles, gains=(0.8, 0.7), seed=0, duration=3.0):
    rng = np.random.default_rng(seed)
    brirs = synthetic_brir_set()
    speech = [synthetic_speech(duration, rng) for _ in angles]
    return synthesize_scene(SceneSpec(speech, list(gains), [(a, 0.0) for a in angles], brirs))


def test_search_single_source_bins():
    sc = _oracle_scene([30.0, 250.0])
    sep = OracleSeparator(sc.stems[:1], [30.0])
    cands = search(sc.stems[0], separator=sep)
    assert [c.angle for c in cands] == [30.0]
    sep = OracleSeparator(sc.stems[:1], [35.0])
    cands = search(sc.stems[0], separator=sep)
    assert sorted(c.angle for c in cands) == [30.0, 40.0]


def test_search_two_sources_90_apart():
    sc = _oracle_scene([20.0, 110.0])
    cands = search(sc.mixture, separator=OracleSeparator(sc.stems, sc.truth_angles))
    angles = {c.angle for c in cands}
    assert {20.0, 110.0} <= angles


def test_search_survives_failing_bin(caplog):
    sc = _oracle_scene([20.0, 110.0])
    inner = OracleSeparator(sc.stems, sc.truth_angles)

    class Flaky(Separator):
        def init(self, input_latency=0):
            return inner.init(input_latency)

        def process(self, state, chunk, angle):
            if angle == 20.0:
                raise RuntimeError("boom")
            return inner.process(state, chunk, angle)

    cands = search(sc.mixture, separator=Flaky())
    assert [c.angle for c in cands] == [110.0]
    assert "separator failed" in caplog.text


def test_search_workers_match_serial():
    sc = _oracle_scene([20.0, 110.0])
    sep = OracleSeparator(sc.stems, sc.truth_angles)
    a = search(sc.mixture, separator=sep)
    b = search(sc.mixture, separator=sep, workers=4)
    assert [c.angle for c in a] == [c.angle for c in b]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.stem, y.stem)


def test_cluster_examples(rng):
    assert cluster([]) == []
    s = 0.3 * rng.standard_normal((2, 24000))
    one = cluster([CandidateSource(10.0, s, float(np.mean(s**2)))])
    assert len(one) == 1 and one[0].angle == 10.0 and one[0].stem is s
    dup = [CandidateSource(10.0, s, float(np.mean(s**2))),
           CandidateSource(20.0, 0.8 * s, float(np.mean((0.8 * s) ** 2)))]
    out = cluster(dup[::-1])
    assert len(out) == 1 and out[0].angle == 10.0
    t = 0.3 * rng.standard_normal((2, 24000))
    two = cluster([CandidateSource(10.0, s, 1.0), CandidateSource(200.0, t, 0.9)])
    assert [c.angle for c in two] == [10.0, 200.0]
    assert segment_similarity(s, 0.8 * s) == 1.0
    assert segment_similarity(s, np.zeros_like(s)) == 0.0


def test_cluster_idempotent():
    sc = _oracle_scene([20.0, 110.0])
    ests = localize_and_separate(sc.mixture, separator=OracleSeparator(sc.stems, sc.truth_angles))
    again = cluster([CandidateSource(e.angle, e.stem, e.energy) for e in ests])
    assert [(e.angle, e.energy) for e in again] == [(e.angle, e.energy) for e in ests]


@settings(max_examples=15, deadline=None)
@given(b1=st.integers(0, 35), b2=st.integers(0, 35), seed=st.integers(0, 10_000),
       g1=st.floats(0.5, 1.0), g2=st.floats(0.5, 1.0))
def test_oracle_end_to_end(b1, b2, seed, g1, g2):
    assume(b1 != b2)
    sc = _oracle_scene([10.0 * b1, 10.0 * b2], (g1, g2), seed, duration=2.0)
    assume(all(power_gate(s) for s in sc.stems))
    ests = localize_and_separate(sc.mixture, separator=OracleSeparator(sc.stems, sc.truth_angles))
    assert len(ests) == 2
    for e in ests:
        j = int(np.argmin([abs((e.angle - a + 180) % 360 - 180) for a in sc.truth_angles]))
        assert abs((e.angle - sc.truth_angles[j] + 180) % 360 - 180) <= 5.0
        assert _rms(e.stem - sc.stems[j]) < 1e-6


def test_streaming_matches_batch_for_oracle():
    sc = _oracle_scene([20.0, 250.0], duration=2.0)
    sep = OracleSeparator(sc.stems, sc.truth_angles)
    batch = {c.angle: c.stem for c in search(sc.mixture, separator=sep)}
    eng = StreamingLocSep(separator=sep)
    n = sc.mixture.shape[1]
    hops = -(-(n + eng.latency) // 640)
    x = np.pad(sc.mixture, ((0, 0), (0, hops * 640 - n)))
    out = np.concatenate([eng.push(x[:, k * 640:(k + 1) * 640]) for k in range(hops)], axis=2)
    out = out[:, :, eng.latency:eng.latency + n]
    for angle, stem in batch.items():
        np.testing.assert_allclose(out[eng.angles.index(angle)], stem, atol=1e-12)


def test_streaming_phase_mask_close_to_batch(anechoic):
    rng = np.random.default_rng(4)
    src = spatialize(synthetic_speech(2.0, rng), anechoic.nearest(30.0))
    sep = PhaseMaskSeparator()
    eng = StreamingLocSep(separator=sep)
    n = src.shape[1]
    hops = -(-(n + eng.latency) // 640)
    x = np.pad(src, ((0, 0), (0, hops * 640 - n)))
    out = np.concatenate([eng.push(x[:, k * 640:(k + 1) * 640]) for k in range(hops)], axis=2)
    out = out[eng.angles.index(30.0), :, eng.latency:eng.latency + n]
    ref = _stream(sep, align_to_angle(src, 30.0), 30.0)[:, sep.latency:sep.latency + n]
    assert np.corrcoef(out[0], ref[0])[0, 1] > 0.99
    assert np.corrcoef(out[1], ref[1])[0, 1] > 0.99


@pytest.mark.parametrize("angle", [0.0, 35.0, 290.0])
def test_phase_mask_matches_brute_force(angle, rng):
    x = rng.standard_normal((2, 4000)) * 0.3
    aligned = align_to_angle(x, angle)
    sep = PhaseMaskSeparator()
    fast = _stream(sep, aligned, angle)[:, sep.latency : sep.latency + x.shape[1]]
    ref = brute_force_phase_mask(aligned, angle)
    np.testing.assert_allclose(fast, ref, atol=1e-9)
