"""How long must a recording be?

Crops of increasing length are analysed for the same synthetic cohort.  The
knee of the accuracy-versus-minutes curve marks where extra recording time
stops paying off.  Split-half reliability then asks whether a subject's mean
MI in the first half of the recording predicts the second half.

Run:  python demos/04_recording_length.py     (a few minutes on one core)
"""
import numpy as np

from envtrack.core import NARROW_BANDS, LagGrid
from envtrack.synth import SynthSpec, cohort_signals
from envtrack.timecourse import (
    DurationGrid, classification_vs_duration, duration_tmifs, split_half_means,
    split_half_reliability, within_subject_stability,
)

spec = SynthSpec(n_channels=8, duration_min=6.0, snr_db=-25.0, seed=0)
signals = cohort_signals(spec)
grid = LagGrid(spec.fs)

dt = duration_tmifs(signals, DurationGrid((1, 2, 3, 4, 5, 6)), grid, None, NARROW_BANDS)
curve = classification_vs_duration(dt, C_grid=(1.0, 10.0), prune_grid=(200.0, 400.0))
for minutes, acc in zip(curve.minutes, curve.accuracy):
    print(f"{minutes:4.0f} min: accuracy {acc:.3f}")
print(f"classification knee: {curve.knee} min")
within = within_subject_stability(dt)
print(f"within-subject TMIF stability knee: {within.knee} min")

table = split_half_reliability([s.group for s in signals],
                               split_half_means(signals, grid, None, NARROW_BANDS))
for row in table.rows:
    print(f"{row.band:>6} {row.group:>8}: r = {row.r:.2f} "
          f"[{row.ci_low:.2f}, {row.ci_high:.2f}], corrected p = {row.p_corrected:.3g}")
for band, z, p, pc in table.comparisons:
    print(f"{band:>6} aphasia vs control: z = {z:+.2f}, corrected p = {pc:.3g}")
