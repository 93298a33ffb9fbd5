import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatial_translate.audio import SAMPLE_RATE, convolve
from spatial_translate.corpus import synthetic_speech
from spatial_translate.errors import MissingAsset, MissingHrtf, SilentStem
from spatial_translate.metrics import delta_ild, delta_itd, ild_db, itd_us
from spatial_translate.render import (
    GenericHrtfTable,
    RenderMethod,
    SpatialCues,
    band_ild,
    extract_cues,
    l1_ild,
    reconcile_delay,
    render,
    render_tail,
    synthetic_hrtf_table,
)
from spatial_translate.scene import spatialize, synthetic_brir_set


@pytest.fixture(scope="module")
def table():
    return synthetic_hrtf_table()


def _l1_ratio(x):
    return np.abs(x[1]).sum() / np.abs(x[0]).sum()


def test_extract_cues_examples(rng, table):
    s = rng.standard_normal(16000) * 0.3
    assert extract_cues(np.stack([s, s]), 0.0).ild_linear == pytest.approx(1.0)
    assert extract_cues(np.stack([s, 0.5 * s]), 0.0).ild_linear == pytest.approx(0.5)
    cues = extract_cues(np.stack([s, s]), 30.0, table)
    assert cues.itd_us == pytest.approx(table.itd_us(30.0))


@pytest.mark.parametrize("fractional", [False, True])
def test_extract_cues_constructed_brir(fractional):
    # level law gives right/left = +4 dB at 270 degrees
    brirs = synthetic_brir_set(ild_db=4.0, fractional=fractional)
    speech = synthetic_speech(3.0, np.random.default_rng(5))
    stem = spatialize(speech, brirs.nearest(270.0))
    cues = extract_cues(stem, 270.0)
    assert abs(20 * np.log10(cues.ild_linear) - 4.0) < 0.2


def test_extract_cues_rejects_silence():
    with pytest.raises(SilentStem):
        extract_cues(np.zeros((2, 16000)), 0.0)


def test_cues_positive():
    with pytest.raises(ValueError):
        SpatialCues(0.0, 0.0)


def test_duplicate_examples(rng):
    mono = rng.standard_normal(8000) * 0.2
    out = render(mono, "duplicate")
    np.testing.assert_array_equal(out[0], mono)
    np.testing.assert_array_equal(out[1], mono)
    assert np.sum(out[0] ** 2) == np.sum(mono ** 2)
    ref = np.stack([np.pad(mono, (0, 8)), np.pad(mono, (8, 0))])  # 500 us delay-only reference
    out = render(ref[0], "duplicate")
    assert delta_itd(out, ref) == pytest.approx(500.0)
    assert delta_ild(out, ref) == pytest.approx(0.0, abs=1e-3)
    assert _l1_ratio(out) == 1.0


def test_ildcomp_symmetric_hrtf(rng):
    h = np.zeros((2, 8))
    h[:, 2] = [0.9, 0.9]
    h[:, 3] = [0.3, 0.3]
    sym = GenericHrtfTable({az: h for az in range(0, 360, 15)})
    out = render(rng.standard_normal(8000), "hrtf-ild", 0.0, SpatialCues(0.0, 1.0), sym)
    assert _l1_ratio(out) == pytest.approx(1.0, abs=1e-6)


def test_ildcomp_4db(table):
    mono = synthetic_speech(3.0, np.random.default_rng(2))
    out = render(mono, "hrtf-ild", 60.0, SpatialCues(60.0, 10 ** (4 / 20)), table)
    assert abs(20 * np.log10(_l1_ratio(out)) - 4.0) < 0.3


@settings(max_examples=60, deadline=None)
@given(ild=st.floats(0.1, 10.0), az=st.sampled_from(list(range(0, 360, 5))), seed=st.integers(0, 2**31))
def test_ildcomp_exactness(table, ild, az, seed):
    mono = np.random.default_rng(seed).standard_normal(8000)  # stationary input
    out = render(mono, RenderMethod.GENERIC_HRTF_ILD, float(az), SpatialCues(float(az), ild), table)
    assert abs(_l1_ratio(out) / ild - 1) < 0.05


@pytest.mark.parametrize("az", list(range(0, 360, 5)))
def test_itd_fidelity(table, az):
    rng = np.random.default_rng(az)
    mono = rng.standard_normal(8000) * 0.3
    _, h = table.nearest(az)
    truth = np.stack([convolve(mono, h[0]), convolve(mono, h[1])])
    out = render(mono, "hrtf-ild", az, extract_cues(truth, az, table), table)
    assert delta_itd(out, truth) <= 1e6 / SAMPLE_RATE + 1e-6


def test_method_ordering(table):
    # references from a different head (fractional ITDs, 9 dB level law) than the generic table
    heads = synthetic_brir_set("other", ild_db=9.0, fractional=True)
    rng = np.random.default_rng(8)
    d = {m: ([], []) for m in RenderMethod}
    for _ in range(40):
        az = float(rng.choice(np.arange(0, 360, 5)))
        speech = synthetic_speech(2.0, rng)
        truth = spatialize(speech, heads.nearest(az))
        cues = extract_cues(truth, az, table)
        for m in RenderMethod:
            out = render(speech, m, az, cues, table)[:, : truth.shape[1]]
            d[m][0].append(delta_itd(out, truth))
            d[m][1].append(delta_ild(out, truth))
    itd = {m: np.mean(v[0]) for m, v in d.items()}
    ild = {m: np.mean(v[1]) for m, v in d.items()}
    assert itd[RenderMethod.GENERIC_HRTF] == pytest.approx(itd[RenderMethod.GENERIC_HRTF_ILD], abs=1e-9)
    assert itd[RenderMethod.GENERIC_HRTF] + 50 < itd[RenderMethod.DUPLICATE]
    assert ild[RenderMethod.GENERIC_HRTF_ILD] + 0.1 < ild[RenderMethod.GENERIC_HRTF]
    assert ild[RenderMethod.GENERIC_HRTF] + 0.1 < ild[RenderMethod.DUPLICATE]


def test_missing_table(rng):
    with pytest.raises(MissingHrtf):
        render(rng.standard_normal(100), "hrtf", 0.0, SpatialCues(0.0, 1.0))
    with pytest.raises(MissingHrtf):
        GenericHrtfTable.from_manifest("/nonexistent/hrtf.json")


def test_table_coverage():
    h = np.zeros((2, 4))
    h[:, 0] = 1
    with pytest.raises(ValueError):
        GenericHrtfTable({0: h, 20: h, 40: h})


def test_manifest_roundtrip(tmp_path, table):
    path = table.to_manifest(tmp_path / "hrtf.json")
    back = GenericHrtfTable.from_manifest(path)
    assert sorted(back.entries) == sorted(table.entries)
    for az, h in table.entries.items():
        np.testing.assert_allclose(back.entries[az], h, atol=1e-6)
    next(tmp_path.glob("*_hrtf/*.wav")).unlink()
    with pytest.raises(MissingAsset):
        GenericHrtfTable.from_manifest(path)


def test_band_ild_flat_gain(rng):
    s = rng.standard_normal(16000)
    np.testing.assert_allclose(band_ild(np.stack([s, 0.5 * s])), 0.5, rtol=1e-6)


def test_band_render_matches_band_cues(table, rng):
    mono = rng.standard_normal(32000) * 0.2
    target = np.array([0.5, 0.6, 0.8, 1.0, 1.3, 1.8, 2.5])
    out = render(mono, "hrtf-ild", 30.0, SpatialCues(30.0, 1.0, band_ild=target), table)
    np.testing.assert_allclose(band_ild(out[:, 512:-512]), target, rtol=0.1)


def _chunks(mono, size):
    return [mono[i : i + size] for i in range(0, mono.size, size)]


def test_reconcile_d0_equals_batch(table):
    mono = synthetic_speech(4.0, np.random.default_rng(3))
    cues = SpatialCues(40.0, 1.4)
    out = reconcile_delay([cues], _chunks(mono, 15360), 0, "hrtf-ild", table)
    ref = render(mono, "hrtf-ild", 40.0, cues, table)
    assert out.shape == ref.shape
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_reconcile_uses_future_cues(table):
    # source moves 0 -> 90 degrees; chunk i is rendered with cue i + D
    n_chunks, size = 5, 1600
    cues = [SpatialCues(a, 10 ** (-6 * np.sin(np.radians(a)) / 20)) for a in np.linspace(0, 90, n_chunks)]
    rng = np.random.default_rng(4)
    mono = rng.standard_normal(n_chunks * size)
    out = reconcile_delay(cues, _chunks(mono, size), 2, "hrtf-ild", table, fade_s=0.0)
    first = out[:, :size]
    want = render(mono[:size], "hrtf-ild", cues[2].angle, cues[2], table)[:, :size]
    np.testing.assert_allclose(first, want, atol=1e-10)
    assert itd_us(first) == pytest.approx(table.itd_us(cues[2].angle), abs=1e6 / SAMPLE_RATE)
    # exhausted stream holds the last cue
    tail = out[:, 3 * size : 4 * size]
    want = render(mono[3 * size : 4 * size], "hrtf-ild", 90.0, cues[-1], table)[:, :size]
    np.testing.assert_allclose(tail[:, 40:], want[:, 40:], atol=1e-10)


def test_reconcile_crossfade_partition(table, rng):
    # with identical cues on every chunk the fades sum back to the plain render
    mono = rng.standard_normal(4800)
    cues = [SpatialCues(10.0, 0.8)] * 3
    out = reconcile_delay(cues, _chunks(mono, 1600), 1, "hrtf-ild", table)
    np.testing.assert_allclose(out, render(mono, "hrtf-ild", 10.0, cues[0], table), atol=1e-10)


def test_render_tail(table):
    assert render_tail("duplicate", table) == 0
    assert render_tail("hrtf", table) == 39


def test_l1_ild_matches_metric(rng):
    x = rng.standard_normal((2, 4000)) * [[0.3], [0.6]]
    assert 20 * np.log10(l1_ild(x)) == pytest.approx(ild_db(x), abs=1e-6)
