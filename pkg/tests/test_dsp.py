import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from envtrack.core import BANDS, NARROW_BANDS, Recording
from envtrack.dsp import (
    GammatoneBank, average_reference, band_envelopes, design_ls_fir, design_ls_lowpass,
    envelope_bands, erb_rate,
    erb_space, extract_envelope, filtfilt_compensated, inverse_erb_rate, preprocess_eeg, resample,
    zscore,
)

AUDIO_FS = 16384.0


def _audio(x, fs=AUDIO_FS):
    return Recording(np.asarray(x, float), fs, ("audio",), "audio")


def _db(x):
    return 20 * np.log10(x)


# --- ERB scale -------------------------------------------------------------


def test_erb_space_endpoints():
    np.testing.assert_array_equal(erb_space(50, 5000, 2), [50, 5000])


def test_erb_space_equal_steps():
    f = erb_space(50, 5000, 28)
    steps = np.diff(erb_rate(f))
    np.testing.assert_allclose(steps, steps[0], atol=1e-9)
    assert np.all(np.diff(f) > 0)


def test_erb_space_midpoint_closed_form():
    # with 29 points the centre one sits at the mean ERB-rate of the endpoints
    f = erb_space(50, 5000, 29)
    e_mid = 0.5 * (21.4 * np.log10(4.37e-3 * 50 + 1) + 21.4 * np.log10(4.37e-3 * 5000 + 1))
    expected = (10 ** (e_mid / 21.4) - 1) / 4.37e-3
    assert f[14] == pytest.approx(expected, rel=1e-12)
    assert inverse_erb_rate(erb_rate(1234.5)) == pytest.approx(1234.5, rel=1e-12)


def test_erb_space_rejects_single_point():
    with pytest.raises(ValueError):
        erb_space(50, 5000, 1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2000), st.floats(1, 8000), st.integers(2, 64))
def test_erb_space_monotone(lo, width, n):
    f = erb_space(lo, lo + width, n)
    assert len(f) == n and np.all(np.diff(f) > 0)


def test_gammatone_bank_layout():
    bank = GammatoneBank(AUDIO_FS)
    cf = bank.center_freqs
    assert len(cf) == 28 and cf[0] == 50 and cf[-1] == 5000


def test_gammatone_unit_gain_at_centre():
    bank = GammatoneBank(AUDIO_FS)
    t = np.arange(int(AUDIO_FS)) / AUDIO_FS
    for (gain, pole), cf in list(zip(bank.coefficients(), bank.center_freqs))[::9]:
        y = bank.filter_channel(np.sin(2 * np.pi * cf * t), gain, pole)
        amp = np.sqrt(2 * np.mean(y[len(y) // 2:] ** 2))
        assert amp == pytest.approx(1.0, abs=0.02)


# --- Envelope extraction -----------------------------------------------------


def test_envelope_of_silence_is_zero():
    env = extract_envelope(_audio(np.zeros(int(AUDIO_FS))))
    assert env.shape == (512,)
    assert np.all(env == 0)


def test_envelope_of_steady_tone_is_flat():
    t = np.arange(int(2 * AUDIO_FS)) / AUDIO_FS
    env = extract_envelope(_audio(0.5 * np.sin(2 * np.pi * 1000 * t)))
    core = env[int(0.05 * 512):-int(0.1 * 512)]     # skip transient and padded tail
    assert np.std(core) / np.mean(core) < 0.05


def test_envelope_of_am_tone_peaks_at_modulation_rate():
    t = np.arange(int(4 * AUDIO_FS)) / AUDIO_FS
    x = (1 + np.sin(2 * np.pi * 4 * t)) * np.sin(2 * np.pi * 1000 * t)
    env = extract_envelope(_audio(x))
    spec = np.abs(np.fft.rfft(env - env.mean()))
    f = np.fft.rfftfreq(len(env), 1 / 512)
    assert f[np.argmax(spec)] == pytest.approx(4.0, abs=0.25)


def test_envelope_deterministic():
    x = np.random.default_rng(3).normal(size=int(AUDIO_FS))
    a = extract_envelope(_audio(x))
    b = extract_envelope(_audio(x.copy()))
    assert a.tobytes() == b.tobytes()


def test_envelope_rejects_bad_input():
    with pytest.raises(ValueError, match="empty"):
        extract_envelope(_audio(np.zeros(0)))
    with pytest.raises(ValueError, match="10 kHz"):
        extract_envelope(_audio(np.zeros(100), fs=8000.0))


def test_envelope_non_integer_rate():
    fs = 44100.0
    x = np.sin(2 * np.pi * 500 * np.arange(int(fs)) / fs)
    env = extract_envelope(_audio(x, fs), GammatoneBank(fs, n_channels=4))
    assert abs(len(env) - 512) <= 1


def test_band_envelopes_are_zscored():
    t = np.arange(int(40 * AUDIO_FS)) / AUDIO_FS
    rng = np.random.default_rng(0)
    x = rng.normal(size=len(t)) * (1 + 0.5 * np.sin(2 * np.pi * 3 * t))
    envs = band_envelopes(_audio(x), ("theta", "broad"), GammatoneBank(AUDIO_FS, n_channels=4))
    assert envs.fs == 128 and envs.bands == ("theta", "broad")
    for b in envs.bands:
        assert abs(envs[b].mean()) < 1e-9 and abs(envs[b].std() - 1) < 1e-9


# --- FIR design ---------------------------------------------------------------


def test_delta_stop_edges():
    f = design_ls_fir("delta", 512.0)
    # the desired response switches at 0.45 and 4.4 Hz; check the response
    # straddles them in the expected direction
    lo = abs(f.frequency_response([0.45, 0.5]))
    hi = abs(f.frequency_response([4.0, 4.4]))
    assert lo[1] > lo[0] and hi[0] > hi[1]
    assert f.order == 2000 and len(f.taps) == 2001 and f.group_delay == 1000


@pytest.mark.parametrize("band", list(BANDS))
def test_fir_symmetric(band):
    taps = design_ls_fir(band, 512.0).taps
    np.testing.assert_allclose(taps, taps[::-1], atol=1e-12, rtol=0)


@pytest.mark.parametrize("band", list(BANDS))
def test_fir_centre_gain(band):
    f = design_ls_fir(band, 512.0)
    gain = abs(f.frequency_response([BANDS[band].center_hz]))[0]
    assert abs(_db(gain)) <= 0.5


@pytest.mark.parametrize("band", ["theta", "alpha", "beta", "gamma"])
def test_fir_attenuation_both_sides(band):
    b = BANDS[band]
    f = design_ls_fir(band, 512.0)
    resp = abs(f.frequency_response([b.lo_hz * 0.8, b.hi_hz * 1.2]))
    assert np.all(_db(resp) <= -30)


@pytest.mark.parametrize("band", ["delta", "broad"])
def test_fir_attenuation_upper_side(band):
    b = BANDS[band]
    resp = abs(design_ls_fir(band, 512.0).frequency_response([b.hi_hz * 1.2]))
    assert _db(resp[0]) <= -30


@pytest.mark.parametrize("fs", [128.0, 512.0])
@pytest.mark.parametrize("band", list(BANDS))
def test_fir_gain_bounded_everywhere(band, fs):
    # transition bands must not blow up at the long default order
    f = np.linspace(0.0, fs / 2, 20000)
    h = np.abs(design_ls_fir(band, fs).frequency_response(f))
    assert h.max() < 1.1


def test_lowpass_gain_bounded_everywhere():
    lp = design_ls_lowpass(57.6, 64.0, 512.0)
    f = np.linspace(0.0, 256.0, 20000)
    h = np.abs(lp.frequency_response(f))
    assert h.max() < 1.1
    assert _db(abs(lp.frequency_response([10.0])[0])) == pytest.approx(0.0, abs=0.1)
    assert _db(abs(lp.frequency_response([80.0])[0])) < -40


def test_ls_design_matches_direct_weighted_lstsq():
    # dense-basis weighted least squares as an independent oracle
    from envtrack.dsp import GRID_DENSITY, TRANSITION_WEIGHT, _firls
    order, fs = 40, 100.0
    edges, desired = (0.0, 9.0, 10.0, 20.0, 22.0, 50.0), (0, 0, 1, 1, 0, 0)
    f = np.linspace(0.0, fs / 2, GRID_DENSITY * (order + 1))
    w = np.full(f.shape, TRANSITION_WEIGHT)
    w[(f <= 9.0) | ((f >= 10.0) & (f <= 20.0)) | (f >= 22.0)] = 1.0
    d = np.interp(f, edges, desired)
    m = order // 2
    basis = np.cos(np.outer(2 * np.pi * f / fs, np.arange(m + 1)))
    a = np.linalg.lstsq(basis * np.sqrt(w)[:, None], d * np.sqrt(w), rcond=None)[0]
    expected = np.concatenate([a[1:][::-1] / 2, [a[0]], a[1:] / 2])
    np.testing.assert_allclose(_firls(order, edges, desired, fs), expected, atol=1e-10)


def test_fir_rejects_nyquist_violation():
    with pytest.raises(ValueError, match="Nyquist"):
        design_ls_fir("gamma", 100.0)


# --- Filtering and resampling -----------------------------------------------


def test_impulse_stays_in_place():
    x = np.zeros(6000)
    x[3000] = 1.0
    assert np.argmax(filtfilt_compensated(x, design_ls_fir("broad", 128.0))) == 3000
    # narrow band-pass: the response is centred on the impulse even where
    # its largest ripple is not
    y = filtfilt_compensated(x, design_ls_fir("theta", 128.0))
    np.testing.assert_allclose(y[3000 - 1000:3000], y[3001:3001 + 1000][::-1], atol=1e-15)


def test_inband_sine_amplitude_and_phase():
    fs = 128.0
    f = design_ls_fir("theta", fs)
    t = np.arange(int(120 * fs)) / fs
    x = np.sin(2 * np.pi * 6 * t + 0.3)
    y = filtfilt_compensated(x, f)
    core = slice(2500, len(t) - 2500)
    # least-squares fit of a sin/cos pair gives amplitude and phase
    A = np.column_stack([np.sin(2 * np.pi * 6 * t[core]), np.cos(2 * np.pi * 6 * t[core])])
    (s, c), *_ = np.linalg.lstsq(A, y[core], rcond=None)
    assert abs(_db(np.hypot(s, c))) < 0.5
    assert abs(np.degrees(np.arctan2(c, s) - 0.3)) < 1.0


def test_outband_sine_attenuated():
    fs = 128.0
    f = design_ls_fir("theta", fs)
    t = np.arange(int(120 * fs)) / fs
    y = filtfilt_compensated(np.sin(2 * np.pi * 20 * t), f)
    core = y[2500:-2500]
    assert _db(np.sqrt(2 * np.mean(core ** 2))) <= -30


def test_filter_rejects_short_signal():
    with pytest.raises(ValueError, match="order"):
        filtfilt_compensated(np.zeros(1500), design_ls_fir("theta", 128.0))


def test_resample_constant_interior():
    y = resample(np.full(4096, 3.0), 512, 128)
    assert len(y) == 1024
    np.testing.assert_allclose(y[100:-100], 3.0, rtol=1e-3)


def test_resample_length():
    assert len(resample(np.ones(1001), 512, 128)) == 251


def test_resample_keeps_low_sine():
    t = np.arange(int(20 * 512)) / 512
    y = resample(np.sin(2 * np.pi * 10 * t), 512, 128)[200:-200]
    assert np.sqrt(2 * np.mean(y ** 2)) == pytest.approx(1.0, rel=0.01)


def test_resample_removes_alias():
    t = np.arange(int(20 * 512)) / 512
    y = resample(np.sin(2 * np.pi * 70 * t), 512, 128)[200:-200]
    assert _db(np.sqrt(2 * np.mean(y ** 2))) <= -30


def test_resample_rejects_non_integer():
    with pytest.raises(ValueError, match="integer"):
        resample(np.ones(100), 500, 128)


def test_band_energy_stays_in_band():
    rng = np.random.default_rng(1)
    x = rng.normal(size=512 * 300)
    for band in BANDS:
        y = filtfilt_compensated(x, design_ls_fir(band, 512.0))
        p = np.abs(np.fft.rfft(y)) ** 2
        f = np.fft.rfftfreq(len(y), 1 / 512)
        b = BANDS[band]
        out = p[(f < 0.9 * b.lo_hz) | (f > 1.1 * b.hi_hz)].sum() / p.sum()
        assert out <= 0.01, band


# --- Referencing and normalisation ------------------------------------------------


def test_average_reference_cases():
    rec = Recording(np.array([[1.0, -1.0], [2.0, -2.0]]), 128, ("a", "b"))
    np.testing.assert_array_equal(average_reference(rec).samples, rec.samples)
    x = np.random.default_rng(0).normal(size=(50, 4))
    out = average_reference(Recording(x, 128, tuple("abcd"))).samples
    expected = np.array([[v - row.mean() for v in row] for row in x])
    np.testing.assert_allclose(out, expected, atol=1e-15)
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-12)
    with pytest.raises(ValueError):
        average_reference(Recording(x[:, :1], 128, ("a",)))


def test_zscore_cases():
    np.testing.assert_array_equal(zscore([0.0, 2.0]), [-1.0, 1.0])
    # population std of [1, 2, 3, 4] is sqrt(1.25)
    np.testing.assert_allclose(zscore([1.0, 2, 3, 4]), np.array([-1.5, -0.5, 0.5, 1.5]) / 1.25 ** 0.5,
                               atol=1e-12)
    np.testing.assert_allclose(zscore([1.0, 2, 3, 4]), [-1.3416, -0.4472, 0.4472, 1.3416],
                               atol=1e-4)
    x = np.random.default_rng(0).normal(size=100)
    np.testing.assert_allclose(zscore(zscore(x)), zscore(x), atol=1e-15)
    with pytest.raises(ValueError):
        zscore(np.ones(5))


def test_envelope_bands_identical_lengths():
    env = np.random.default_rng(2).normal(size=512 * 30)
    envs = envelope_bands(env, 512.0, NARROW_BANDS)
    assert {len(v) for v in envs.series.values()} == {128 * 30}


def test_preprocess_eeg_shapes():
    x = np.random.default_rng(4).normal(size=(512 * 20, 3))
    out = preprocess_eeg(Recording(x, 512.0, ("a", "b", "c")), ("alpha",))
    rec = out["alpha"]
    assert rec.fs == 128 and rec.samples.shape == (128 * 20, 3)
    np.testing.assert_allclose(rec.samples.std(axis=0), 1.0, atol=1e-12)
