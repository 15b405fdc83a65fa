"""Speech-envelope extraction and the EEG / envelope band-filtering chain.

Audio path::

    wav -> 28-channel gammatone bank -> |x|**0.6 -> mean over channels
        -> 512 Hz -> band filter (LS FIR, order 2000) -> 128 Hz -> z-score

EEG path::

    eeg -> 512 Hz -> average reference -> band filter -> 128 Hz -> z-score

All FIR filtering is a single forward convolution with the output advanced by
half the filter order (linear phase, so the group delay is removed exactly)
and zero padding at both edges.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .core import ALL_BANDS, BandSpec, Recording, get_band

ENVELOPE_FS = 512.0
ANALYSIS_FS = 128.0
FIR_ORDER = 2000
ANTIALIAS_ORDER = 500
TRANSITION = 0.10


# ---------------------------------------------------------------------------
# ERB scale and gammatone filterbank
# ---------------------------------------------------------------------------


def erb_rate(f):
    """Glasberg & Moore ERB-rate (number of ERBs below ``f`` Hz)."""
    return 21.4 * np.log10(4.37e-3 * np.asarray(f, dtype=float) + 1.0)


def inverse_erb_rate(e):
    return (10.0 ** (np.asarray(e, dtype=float) / 21.4) - 1.0) / 4.37e-3


def erb_bandwidth(f):
    """Equivalent rectangular bandwidth (Hz) of the auditory filter at ``f``."""
    return 24.7 * (4.37e-3 * np.asarray(f, dtype=float) + 1.0)


def erb_space(lo_hz: float, hi_hz: float, n: int) -> np.ndarray:
    """``n`` frequencies from ``lo_hz`` to ``hi_hz`` equally spaced in ERB-rate."""
    if n < 2:
        raise ValueError("erb_space needs n >= 2")
    if not 0 <= lo_hz < hi_hz:
        raise ValueError("erb_space needs 0 <= lo < hi")
    e = np.linspace(erb_rate(lo_hz), erb_rate(hi_hz), n)
    f = inverse_erb_rate(e)
    f[0], f[-1] = lo_hz, hi_hz
    return f


@dataclass(frozen=True)
class GammatoneBank:
    """All-pole gammatone filterbank built from cascaded complex one-pole sections.

    Each channel is ``order`` identical first-order sections with pole
    ``lambda * exp(i*2*pi*cf/fs)``; the bandwidth parameter is set so that the
    equivalent rectangular bandwidth of the magnitude response equals
    :func:`erb_bandwidth` (Hohmann 2002).  Gain is unity at the centre frequency
    for the real part of the output.
    """

    fs: float
    n_channels: int = 28
    lo_hz: float = 50.0
    hi_hz: float = 5000.0
    order: int = 4

    @property
    def center_freqs(self) -> np.ndarray:
        return erb_space(self.lo_hz, self.hi_hz, self.n_channels)

    def coefficients(self):
        """Yield ``(gain, pole)`` per channel."""
        n = self.order
        a_gamma = (math.pi * math.factorial(2 * n - 2) * 2.0 ** -(2 * n - 2)
                   / math.factorial(n - 1) ** 2)
        for cf in self.center_freqs:
            b = erb_bandwidth(cf) / a_gamma
            lam = math.exp(-2 * math.pi * b / self.fs)
            pole = lam * np.exp(2j * math.pi * cf / self.fs)
            gain = 2.0 * (1.0 - abs(pole)) ** n
            yield gain, pole

    def filter_channel(self, x: np.ndarray, gain: float, pole: complex) -> np.ndarray:
        y = x.astype(np.complex128) * gain
        for _ in range(self.order):
            y = signal.lfilter([1.0], [1.0, -pole], y)
        return y.real

    def __call__(self, x) -> np.ndarray:
        """Real sub-band signals, shape (n_channels, n_times)."""
        x = np.asarray(x, dtype=float)
        return np.stack([self.filter_channel(x, g, p) for g, p in self.coefficients()])


def extract_envelope(audio: Recording, bank: GammatoneBank | None = None,
                     fs_out: float = ENVELOPE_FS, power: float = 0.6) -> np.ndarray:
    """Power-law sub-band envelope averaged over the filterbank, at ``fs_out``."""
    if audio.kind != "audio":
        raise ValueError("extract_envelope needs an audio recording")
    if audio.n_times == 0:
        raise ValueError("empty audio signal")
    if audio.fs < 10_000:
        raise ValueError(f"audio sampled at {audio.fs} Hz; need at least 10 kHz")
    if bank is None:
        bank = GammatoneBank(audio.fs)
    elif bank.fs != audio.fs:
        raise ValueError("filterbank and audio sampling rates differ")
    x = audio.samples[:, 0]
    env = np.zeros_like(x)
    for gain, pole in bank.coefficients():
        env += np.abs(bank.filter_channel(x, gain, pole)) ** power
    env /= bank.n_channels
    ratio = Fraction(audio.fs / fs_out).limit_denominator(10_000)
    if ratio.denominator == 1:
        return resample(env, audio.fs, fs_out)
    # arbitrary audio rates (44.1 kHz, 48 kHz): polyphase rational resampling
    return signal.resample_poly(env, ratio.denominator, ratio.numerator)


# ---------------------------------------------------------------------------
# FIR design and filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FirFilter:
    taps: np.ndarray
    fs: float
    band: BandSpec | None = None

    @property
    def order(self) -> int:
        return len(self.taps) - 1

    @property
    def group_delay(self) -> int:
        return self.order // 2

    def frequency_response(self, freqs_hz) -> np.ndarray:
        _, h = signal.freqz(self.taps, worN=np.atleast_1d(freqs_hz), fs=self.fs)
        return h


TRANSITION_WEIGHT = 0.01
GRID_DENSITY = 16


@lru_cache(maxsize=64)
def _firls(order: int, edges: tuple, desired: tuple, fs: float) -> np.ndarray:
    """Weighted least-squares type I FIR on a dense frequency grid.

    ``edges``/``desired`` list piecewise-linear bands as in ``(f0, f1, f2, ...)``
    with one desired value per edge.  Gaps between bands are transition
    regions: their target is the straight line joining the neighbouring band
    edges and their weight is ``TRANSITION_WEIGHT``.  Leaving the transitions
    unweighted makes the normal equations near-singular at long orders and
    lets the gain there grow without bound.
    """
    m = order // 2
    f = np.linspace(0.0, fs / 2.0, GRID_DENSITY * (order + 1))
    # every grid point lies in a band or a gap; interpolate the target over both
    target = np.interp(f, edges, desired)
    weight = np.full(f.shape, TRANSITION_WEIGHT)
    for k in range(0, len(edges), 2):
        weight[(f >= edges[k]) & (f <= edges[k + 1])] = 1.0
    # the grid is uniform on [0, pi] in radians, so every weighted cosine
    # sum sum_i w_i cos(k * pi * i / (n - 1)) is the real part of one FFT
    nfft = 2 * (len(f) - 1)
    r = np.fft.rfft(weight, nfft).real[:2 * m + 1]
    rhs = np.fft.rfft(weight * target, nfft).real[:m + 1]
    # Gram matrix sum_i w_i cos(j t_i) cos(k t_i) = (r[j - k] + r[j + k]) / 2
    j = np.arange(m + 1)
    gram = 0.5 * (r[np.abs(j[:, None] - j[None, :])] + r[j[:, None] + j[None, :]])
    a = np.linalg.solve(gram, rhs)
    taps = np.empty(order + 1)
    taps[m] = a[0]
    taps[m + 1:] = a[1:] / 2.0
    taps[:m] = a[1:][::-1] / 2.0
    taps.setflags(write=False)
    return taps


def design_ls_fir(band: BandSpec | str, fs: float, order: int = FIR_ORDER,
                  transition: float = TRANSITION) -> FirFilter:
    """Least-squares linear-phase band-pass FIR.

    Desired response is 1 on [lo, hi] and 0 below ``lo*(1-transition)`` and
    above ``hi*(1+transition)``.  The transition bands follow a linear ramp
    with a small weight, which keeps the gain there bounded by about one.
    """
    band = get_band(band)
    if order % 2:
        raise ValueError("order must be even (type I linear phase)")
    nyq = fs / 2.0
    stop_lo = band.lo_hz * (1.0 - transition)
    stop_hi = band.hi_hz * (1.0 + transition)
    if stop_hi >= nyq:
        raise ValueError(f"band {band.name}: upper stop edge {stop_hi:g} Hz "
                         f"is not below Nyquist ({nyq:g} Hz)")
    edges = (0.0, stop_lo, band.lo_hz, band.hi_hz, stop_hi, nyq)
    taps = _firls(order, edges, (0, 0, 1, 1, 0, 0), float(fs))
    return FirFilter(taps, float(fs), band)


def design_ls_lowpass(pass_hz: float, stop_hz: float, fs: float,
                      order: int = ANTIALIAS_ORDER) -> FirFilter:
    if not 0 < pass_hz < stop_hz <= fs / 2:
        raise ValueError("need 0 < pass < stop <= Nyquist")
    taps = _firls(order, (0.0, pass_hz, stop_hz, fs / 2.0), (1, 1, 0, 0), float(fs))
    return FirFilter(taps, float(fs))


def filtfilt_compensated(x, filt: FirFilter) -> np.ndarray:
    """Zero-phase FIR filtering along axis 0 with a single forward pass.

    The full convolution is advanced by ``order // 2`` samples so that the
    output is aligned with the input; edges are zero padded.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n <= filt.order:
        raise ValueError(f"signal of {n} samples is not longer than the filter order {filt.order}")
    taps = filt.taps if x.ndim == 1 else filt.taps.reshape((-1,) + (1,) * (x.ndim - 1))
    y = signal.oaconvolve(x, taps, mode="full", axes=0)
    d = filt.group_delay
    return y[d:d + n]


def resample(x, fs_in: float, fs_out: float) -> np.ndarray:
    """Anti-aliased integer-factor decimation along axis 0."""
    ratio = fs_in / fs_out
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9:
        raise ValueError(f"resample needs an integer factor, got {fs_in}/{fs_out}")
    x = np.asarray(x, dtype=float)
    if factor == 1:
        return x.copy()
    nyq_out = fs_out / 2.0
    lp = design_ls_lowpass(0.9 * nyq_out, nyq_out, fs_in)
    return filtfilt_compensated(x, lp)[::factor].copy()


def average_reference(eeg: Recording) -> Recording:
    if eeg.n_channels < 2:
        raise ValueError("average reference needs at least two channels")
    x = eeg.samples - eeg.samples.mean(axis=1, keepdims=True)
    return Recording(x, eeg.fs, eeg.channel_names, eeg.kind)


def zscore(x, axis: int = 0) -> np.ndarray:
    """Zero mean, unit population standard deviation along ``axis``."""
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=axis, keepdims=True)
    sd = x.std(axis=axis, keepdims=True)
    if np.any(sd == 0):
        raise ValueError("cannot z-score a constant signal")
    return (x - mu) / sd


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvelopeSet:
    """Band-filtered, z-scored envelopes sharing one sampling rate and length."""

    fs: float
    series: dict
    normalization: str = "zscore"

    def __post_init__(self):
        lengths = {len(v) for v in self.series.values()}
        if len(lengths) > 1:
            raise ValueError("all band envelopes must have the same length")

    def __getitem__(self, band: str) -> np.ndarray:
        return self.series[band]

    @property
    def bands(self) -> tuple:
        return tuple(self.series)


def _filter_rate(fs: float, preferred: float = ENVELOPE_FS) -> float:
    return preferred if fs >= preferred else fs


def band_envelopes(audio: Recording, bands=ALL_BANDS, bank: GammatoneBank | None = None,
                   fs_out: float = ANALYSIS_FS) -> EnvelopeSet:
    env = extract_envelope(audio, bank)
    return envelope_bands(env, ENVELOPE_FS, bands, fs_out)


def envelope_bands(env, fs: float, bands=ALL_BANDS, fs_out: float = ANALYSIS_FS) -> EnvelopeSet:
    """Band-filter a broadband envelope, decimate to ``fs_out`` and z-score."""
    env = np.asarray(env, dtype=float)
    fs_f = _filter_rate(fs)
    if fs != fs_f:
        env = resample(env, fs, fs_f)
    series = {}
    for name in bands:
        filt = design_ls_fir(name, fs_f)
        y = resample(filtfilt_compensated(env, filt), fs_f, fs_out)
        series[get_band(name).name] = zscore(y)
    return EnvelopeSet(fs_out, series)


def preprocess_eeg(eeg: Recording, bands=ALL_BANDS, fs_out: float = ANALYSIS_FS) -> dict:
    """Return ``{band: Recording}`` of referenced, band-filtered, z-scored EEG at ``fs_out``."""
    if eeg.kind != "eeg":
        raise ValueError("preprocess_eeg needs an EEG recording")
    fs_f = _filter_rate(eeg.fs)
    x = eeg.samples if eeg.fs == fs_f else resample(eeg.samples, eeg.fs, fs_f)
    ref = average_reference(Recording(x, fs_f, eeg.channel_names))
    out = {}
    for name in bands:
        filt = design_ls_fir(name, fs_f)
        y = resample(filtfilt_compensated(ref.samples, filt), fs_f, fs_out)
        out[get_band(name).name] = Recording(zscore(y, axis=0), fs_out, eeg.channel_names)
    return out


def read_wav(path) -> Recording:
    """Read a mono PCM16 or float32 WAV file as an audio recording."""
    fs, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected a mono WAV file, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV sample type {data.dtype}")
    return Recording(x, float(fs), ("audio",), "audio")
