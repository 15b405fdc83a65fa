"""Forward-model synthetic cohorts with known envelope tracking.

Each subject hears its own band-limited envelope.  Every EEG channel is the
sum over the five narrow bands of ``gain_c * effect_b * (trf_b * env_b)``
plus band-limited Gaussian noise whose power in each band is set relative to
the control-group signal power (``snr_db``).  Patients get the per-band
multiplicative ``group_effect``; 1.0 makes the groups exchangeable.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
from scipy import signal

from ._parallel import pmap
from .core import (
    ALL_BANDS, BANDS, DEFAULT_CHANNEL_SELECTION, NARROW_BANDS, CohortManifest, Recording,
    SubjectEntry, load_layout, write_matrix,
)
from .cohort import SubjectSignals
from .dsp import EnvelopeSet, preprocess_eeg, zscore

#: two-peak template: positive deflection near 50 ms, negative near 170 ms
DEFAULT_TRF = ((50.0, 15.0, 1.0), (170.0, 30.0, -0.8))
TRF_SPAN_MS = 500.0


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic cohort.

    ``trf`` maps a band to a tuple of Gaussian components
    ``(latency_ms, width_ms, amplitude)``; bands not listed use
    :data:`DEFAULT_TRF`.  ``group_effect`` scales the patients' response per
    band.  ``snr_db`` is the per-band, per-channel SNR of a control subject
    with the default template; ``inf`` produces noise-free EEG.
    """

    n_controls: int = 22
    n_patients: int = 27
    fs: float = 128.0
    duration_min: float = 10.0
    n_channels: int = 22
    trf: dict = field(default_factory=dict)
    group_effect: dict = field(default_factory=lambda: {"delta": 0.5, "theta": 0.5, "gamma": 0.5})
    snr_db: float = -20.0
    subject_gain_sd: float = 0.3
    latency_jitter_ms: float = 5.0
    age_range: tuple = (60.0, 85.0)
    seed: int = 0

    def __post_init__(self):
        if self.duration_min <= 0:
            raise ValueError("duration_min must be positive")
        if self.n_controls < 0 or self.n_patients < 0 or self.n_controls + self.n_patients == 0:
            raise ValueError("cohort must contain at least one subject")
        if self.n_channels < 1:
            raise ValueError("need at least one channel")
        if self.fs <= 2 * BANDS["gamma"].hi_hz:
            raise ValueError("fs must exceed twice the top band edge")
        for band, eff in self.group_effect.items():
            if band not in NARROW_BANDS:
                raise ValueError(f"group_effect: unknown band {band!r}")
            if eff < 0:
                raise ValueError(f"group_effect[{band}] must be >= 0")
        for band in self.trf:
            if band not in NARROW_BANDS:
                raise ValueError(f"trf: unknown band {band!r}")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_min * 60.0 * self.fs))

    def effect(self, band: str, group: str) -> float:
        return float(self.group_effect.get(band, 1.0)) if group == "aphasia" else 1.0

    def trf_components(self, band: str) -> tuple:
        """TRF components for ``band``.

        The default template keeps its latencies in every band but narrows
        each Gaussian to at most 15% of the band's centre period, so that
        the response stays phase-locked to fast envelopes too.
        """
        if band in self.trf:
            return tuple(tuple(c) for c in self.trf[band])
        cap = 150.0 / BANDS[band].center_hz
        return tuple((lat, min(w, cap), amp) for lat, w, amp in DEFAULT_TRF)

    def channel_names(self) -> tuple:
        names = list(DEFAULT_CHANNEL_SELECTION)
        names += [c for c in load_layout() if c not in names]
        if self.n_channels > len(names):
            raise ValueError(f"at most {len(names)} channels available")
        return tuple(names[:self.n_channels])

    def as_dict(self) -> dict:
        d = asdict(self)
        d["age_range"] = list(self.age_range)
        d["trf"] = {b: [list(c) for c in v] for b, v in self.trf.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "age_range" in d:
            d["age_range"] = tuple(d["age_range"])
        if "trf" in d:
            d["trf"] = {b: tuple(tuple(c) for c in v) for b, v in d["trf"].items()}
        if "snr_db" in d and d["snr_db"] in ("inf", "Infinity"):
            d["snr_db"] = math.inf
        return cls(**d)


def band_limited(white: np.ndarray, fs: float, lo: float, hi: float) -> np.ndarray:
    """Brick-wall FFT band-pass along axis 0."""
    n = white.shape[0]
    spec = np.fft.rfft(white, axis=0)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    mask = (f >= lo) & (f <= hi)
    spec[~mask] = 0.0
    return np.fft.irfft(spec, n, axis=0)


def trf_kernel(components, fs: float, jitter_ms: float = 0.0) -> np.ndarray:
    """Sum of Gaussians sampled on [0, TRF_SPAN_MS] ms."""
    t = np.arange(int(TRF_SPAN_MS * fs / 1000.0) + 1) * 1000.0 / fs
    h = np.zeros_like(t)
    for latency, width, amp in components:
        h += amp * np.exp(-0.5 * ((t - latency - jitter_ms) / width) ** 2)
    return h


def channel_gains(spec: SynthSpec) -> np.ndarray:
    """Fixed mixed-sign topography shared by every subject."""
    rng = np.random.default_rng([spec.seed, 0x70B0])
    g = rng.normal(size=spec.n_channels)
    return g / np.sqrt(np.mean(g * g))


def generate_subject(spec: SynthSpec, group: str, subject_seed) -> tuple:
    """Simulate one subject.

    Returns
    -------
    eeg : Recording
        Broadband EEG at ``spec.fs``.
    envelopes : EnvelopeSet
        Z-scored envelopes for the broad band and the five narrow bands.
    """
    if group not in ("control", "aphasia"):
        raise ValueError(f"unknown group {group!r}")
    fs, n = spec.fs, spec.n_samples
    rng = np.random.default_rng(subject_seed)
    # 1/f power spectrum over the analysis range
    white = rng.normal(size=n)
    spec_f = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec_f[1:] /= np.sqrt(f[1:])
    spec_f[0] = 0.0
    raw_env = np.fft.irfft(spec_f, n)
    broad = BANDS["broad"]
    envs = {"broad": zscore(band_limited(raw_env, fs, broad.lo_hz, broad.hi_hz))}
    for b in NARROW_BANDS:
        envs[b] = zscore(band_limited(raw_env, fs, BANDS[b].lo_hz, BANDS[b].hi_hz))

    gains = channel_gains(spec)
    subject_gain = float(np.exp(spec.subject_gain_sd * rng.normal()))
    jitter = float(rng.uniform(-spec.latency_jitter_ms, spec.latency_jitter_ms))
    eeg = np.zeros((n, spec.n_channels))
    noise_white = rng.normal(size=(n, spec.n_channels))
    for b in NARROW_BANDS:
        h = trf_kernel(spec.trf_components(b), fs, jitter)
        resp = signal.oaconvolve(envs[b], h)[:n]
        eeg += np.outer(resp * subject_gain * spec.effect(b, group), gains)
        if math.isfinite(spec.snr_db):
            # noise is referenced to the default template so that a custom or
            # silent TRF changes the SNR rather than the noise floor
            ref = trf_kernel(SynthSpec().trf_components(b), fs, jitter)
            power = float(np.var(signal.oaconvolve(envs[b], ref)[:n]))
            nb = band_limited(noise_white, fs, BANDS[b].lo_hz, BANDS[b].hi_hz)
            nb /= nb.std(axis=0, keepdims=True)
            eeg += nb * math.sqrt(power * 10.0 ** (-spec.snr_db / 10.0))
    rec = Recording(eeg, fs, spec.channel_names())
    return rec, EnvelopeSet(fs, {b: envs[b] for b in ALL_BANDS})


def subject_plan(spec: SynthSpec) -> list:
    """``(id, group, age, seed)`` for every subject in manifest order."""
    lo, hi = spec.age_range
    age_rng = np.random.default_rng([spec.seed, 0xA6E])
    plan = []
    for k in range(spec.n_controls):
        plan.append((f"C{k + 1:02d}", "control"))
    for k in range(spec.n_patients):
        plan.append((f"P{k + 1:02d}", "aphasia"))
    ages = age_rng.uniform(lo, hi, len(plan))
    return [(sid, grp, round(float(a), 3), [spec.seed, i + 1])
            for i, ((sid, grp), a) in enumerate(zip(plan, ages))]


def _signals_one(item, spec: SynthSpec, bands) -> SubjectSignals:
    sid, group, age, seed = item
    eeg, envs = generate_subject(spec, group, seed)
    band_eeg = preprocess_eeg(eeg, bands, spec.fs)
    return SubjectSignals(sid, group, age, band_eeg,
                          EnvelopeSet(envs.fs, {b: envs[b] for b in bands}))


def cohort_signals(spec: SynthSpec, bands=NARROW_BANDS, jobs: int = 1) -> list:
    """Simulate and preprocess a cohort in memory.

    Equivalent to :func:`generate_cohort` followed by loading the manifest,
    without the round trip through disk.
    """
    return pmap(partial(_signals_one, spec=spec, bands=tuple(bands)), subject_plan(spec), jobs)


def _write_subject(item, spec: SynthSpec, root: Path) -> SubjectEntry:
    sid, group, age, seed = item
    eeg, envs = generate_subject(spec, group, seed)
    write_matrix(eeg, root / "eeg" / sid)
    env_stems = {}
    for b in envs.bands:
        stem = f"envelope/{sid}_{b}"
        write_matrix(Recording(envs[b], envs.fs, (f"envelope_{b}",), "audio"), root / stem)
        env_stems[b] = stem
    return SubjectEntry(sid, group, age, eeg=f"eeg/{sid}", envelope=env_stems)


def generate_cohort(spec: SynthSpec, out_dir, jobs: int = 1) -> CohortManifest:
    """Write every subject's EEG and envelopes plus ``manifest.json`` to ``out_dir``."""
    root = Path(out_dir)
    try:
        (root / "eeg").mkdir(parents=True, exist_ok=True)
        (root / "envelope").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write synthetic cohort to {root}: {exc}") from exc
    entries = pmap(partial(_write_subject, spec=spec, root=root), subject_plan(spec), jobs)
    names = spec.channel_names()
    sel = [c for c in DEFAULT_CHANNEL_SELECTION if c in names]
    manifest = CohortManifest(entries, spec.fs, sel, {"layout": "biosemi64", "k": 4}, root)
    manifest.save(root / "manifest.json")
    return manifest
