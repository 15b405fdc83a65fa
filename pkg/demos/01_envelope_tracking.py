"""How strongly does one listener's EEG follow the speech envelope?

A speech-like sound (noise whose loudness waxes and wanes at syllable rates)
is passed through the gammatone front end to get band envelopes.  A simulated
EEG recording responds to the envelope with a fixed delay.  For each band we
compute the temporal mutual information function (TMIF), read off its peak
latency, and check the peak against a spectrum-matched permutation null.

Run:  python demos/01_envelope_tracking.py
"""
import numpy as np

from envtrack.core import LagGrid, Recording
from envtrack.dsp import band_envelopes, preprocess_eeg
from envtrack.gcmi import mean_mi, tmif_multivariate
from envtrack.nullperm import exceeds_null, significance_level
from envtrack.synth import band_limited

rng = np.random.default_rng(0)
seconds, audio_fs = 120, 16_000

# syllable-rate loudness contour applied to broadband noise
contour = np.exp(1.5 * band_limited(rng.normal(size=seconds * 128), 128.0, 1.0, 8.0))
loudness = np.interp(np.arange(seconds * audio_fs) / audio_fs, np.arange(len(contour)) / 128.0,
                     contour)
audio = Recording((loudness * rng.normal(size=loudness.size))[:, None], audio_fs, ("mic",),
                  "audio")
envs = band_envelopes(audio, ("delta", "theta", "alpha"))
print(f"envelopes: {envs.bands} at {envs.fs:g} Hz, {len(envs['theta'])} samples")

# four EEG channels that echo the theta envelope 100 ms later, buried in noise
grid = LagGrid(envs.fs)
n = len(envs["theta"])
delay = round(0.100 * envs.fs)
echo = np.concatenate([np.zeros(delay), envs["theta"][:-delay]])
gains = np.array([1.0, -0.7, 0.4, 0.2])
eeg = Recording(np.outer(echo, gains) + 2.0 * rng.normal(size=(n, 4)), envs.fs,
                ("Fz", "Cz", "T7", "T8"))
band_eeg = preprocess_eeg(eeg, envs.bands)

for band in envs.bands:
    tm = tmif_multivariate(band_eeg[band], envs[band], grid)
    peak = grid.times_ms[np.argmax(tm.values)]
    null = significance_level(band_eeg[band], envs[band], grid, n_perm=200, seed=1)
    verdict = "tracks" if exceeds_null(tm.values, null) else "does not track"
    print(f"{band:>6}: peak {tm.values.max():.4f} bits at {peak:6.1f} ms, "
          f"mean MI {mean_mi(tm):.4f} bits, 95% null {null.significance_level:.4f} "
          f"-> EEG {verdict} the envelope")
