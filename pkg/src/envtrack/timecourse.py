"""Recording-length curves, stability, knee points and split-half reliability.

Durations always refer to the first ``t`` minutes of the analysis-rate band
signals.  Correlations are Pearson throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy import stats

from ._parallel import pmap
from .classifier import nested_loso_evaluate
from .cohort import SubjectSignals, subject_tmifs
from .core import ALL_BANDS, NARROW_BANDS, LagGrid, Subject, Tmif
from .gcmi import mean_mi, window_mask

MEAN_MI_WINDOW_MS = (0.0, 400.0)


@dataclass(frozen=True)
class DurationGrid:
    """Strictly increasing crop lengths in minutes."""

    minutes: tuple = tuple(range(1, 26, 2))

    def __post_init__(self):
        m = tuple(float(v) for v in self.minutes)
        if not m:
            raise ValueError("duration grid is empty")
        if m[0] <= 0 or any(b <= a for a, b in zip(m, m[1:])):
            raise ValueError("durations must be positive and strictly increasing")
        object.__setattr__(self, "minutes", m)

    def check(self, recording_minutes: float) -> None:
        if self.minutes[-1] > recording_minutes + 1e-9:
            raise ValueError(f"duration {self.minutes[-1]:g} min exceeds the "
                             f"{recording_minutes:g} min recording")

    @classmethod
    def up_to(cls, recording_minutes: float, step: float = 2.0, start: float = 1.0):
        n = int(math.floor((recording_minutes - start) / step + 1e-9)) + 1
        return cls(tuple(start + step * k for k in range(max(n, 1))))


def _n_samples(minutes: float, fs: float) -> int:
    return int(math.floor(minutes * 60.0 * fs + 1e-9))


def crop_and_tmif(sig: SubjectSignals, minutes: float, band: str, grid: LagGrid,
                  sel=None) -> Tmif:
    """Multivariate TMIF on the first ``minutes`` of a subject's recording."""
    if minutes <= 0:
        raise ValueError("crop length must be positive")
    n = _n_samples(minutes, sig.fs)
    if n > sig.n_samples:
        raise ValueError(f"{sig.id}: cannot crop {minutes:g} min from a "
                         f"{sig.n_samples / sig.fs / 60.0:g} min recording")
    return subject_tmifs(sig, grid, sel, (band,), n_samples=n)[band]


@dataclass
class DurationTmifs:
    """TMIFs for every subject, band and duration plus the full-length ones."""

    grid: DurationGrid
    bands: tuple
    subjects: list                       # Subject with full-recording TMIFs
    by_duration: dict                    # minutes -> list of {band: Tmif}

    def cohort_at(self, minutes: float) -> list:
        return [Subject(s.id, s.group, s.age, t)
                for s, t in zip(self.subjects, self.by_duration[minutes])]


def _duration_one(sig, minutes, grid, sel, bands):
    full = subject_tmifs(sig, grid, sel, bands)
    per = {}
    for m in minutes:
        n = _n_samples(m, sig.fs)
        per[m] = full if n == sig.n_samples else subject_tmifs(sig, grid, sel, bands, n_samples=n)
    return full, per


def duration_tmifs(signals, durations: DurationGrid, grid: LagGrid, sel=None,
                   bands=ALL_BANDS, jobs: int = 1) -> DurationTmifs:
    signals = list(signals)
    for s in signals:
        durations.check(s.n_samples / s.fs / 60.0)
    work = partial(_duration_one, minutes=durations.minutes, grid=grid, sel=sel,
                   bands=tuple(bands))
    results = pmap(work, signals, jobs)
    subjects = [Subject(s.id, s.group, s.age, full) for s, (full, _) in zip(signals, results)]
    by_duration = {m: [per[m] for _, per in results] for m in durations.minutes}
    return DurationTmifs(durations, tuple(bands), subjects, by_duration)


# ---------------------------------------------------------------------------
# Stability
# ---------------------------------------------------------------------------


def pearson(a, b) -> float:
    """Pearson r, or NaN when either input has zero variance."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    da, db = a - a.mean(), b - b.mean()
    den = math.sqrt(float(da @ da) * float(db @ db))
    if den == 0:
        return math.nan
    return float(np.clip((da @ db) / den, -1.0, 1.0))


@dataclass
class StabilityCurve:
    """Correlation against recording length per band.

    ``value[band]`` and ``stderr[band]`` are aligned with ``minutes``; the
    stderr is NaN for between-subject curves.  ``knee`` is taken on the
    across-band average curve.
    """

    kind: str
    minutes: tuple
    value: dict
    stderr: dict
    per_subject: dict = field(default_factory=dict)
    knee: float | None = None

    def average(self) -> np.ndarray:
        return np.nanmean(np.array([self.value[b] for b in self.value]), axis=0)

    def rows(self):
        for band in self.value:
            for m, v, se in zip(self.minutes, self.value[band], self.stderr[band]):
                yield band, m, v, se

    def to_csv(self, path) -> None:
        write_tidy_csv(path, self.rows())


def write_tidy_csv(path, rows) -> None:
    """``band,duration_min,value,stderr``; missing values are written empty."""
    def fmt(v):
        return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("band,duration_min,value,stderr\n")
        for band, m, v, se in rows:
            fh.write(f"{band},{float(m)!r},{fmt(v)},{fmt(se)}\n")


def _knee_or_none(minutes, ys):
    ys = np.asarray(ys, dtype=float)
    if len(minutes) < 3 or not np.isfinite(ys).all():
        return None
    return knee_point(minutes, ys)


def within_subject_stability(dt: DurationTmifs, bands=None, window_ms=None) -> StabilityCurve:
    """Per subject, r between each cropped TMIF and the full-recording TMIF.

    ``window_ms=None`` correlates over the full lag range.  Zero-variance
    TMIFs give a missing value that is skipped in the mean.
    """
    bands = tuple(bands or dt.bands)
    minutes = dt.grid.minutes
    value, stderr, per_subject = {}, {}, {}
    for b in bands:
        r = np.full((len(dt.subjects), len(minutes)), np.nan)
        for k, m in enumerate(minutes):
            for i, s in enumerate(dt.subjects):
                full = s.tmifs[b]
                crop = dt.by_duration[m][i][b]
                mask = (np.ones(len(full.grid), bool) if window_ms is None
                        else window_mask(full.grid, window_ms))
                r[i, k] = pearson(crop.values[mask], full.values[mask])
        per_subject[b] = r
        n_ok = np.sum(np.isfinite(r), axis=0)
        mean = np.array([np.nanmean(col) if c else np.nan for col, c in zip(r.T, n_ok)])
        se = np.array([np.nanstd(col, ddof=1) / math.sqrt(c) if c > 1 else np.nan
                       for col, c in zip(r.T, n_ok)])
        value[b], stderr[b] = mean, se
    curve = StabilityCurve("within_subject", minutes, value, stderr, per_subject)
    curve.knee = _knee_or_none(minutes, curve.average())
    return curve


def between_subject_stability(dt: DurationTmifs, bands=None,
                              window_ms=MEAN_MI_WINDOW_MS) -> StabilityCurve:
    """Across subjects, r between mean MI at each duration and at full length."""
    if len(dt.subjects) < 3:
        raise ValueError("between-subject stability needs at least three subjects")
    bands = tuple(bands or dt.bands)
    minutes = dt.grid.minutes
    value, stderr = {}, {}
    for b in bands:
        full = np.array([mean_mi(s.tmifs[b], window_ms) for s in dt.subjects])
        vals = []
        for m in minutes:
            crop = np.array([mean_mi(t[b], window_ms) for t in dt.by_duration[m]])
            vals.append(pearson(crop, full))
        value[b] = np.array(vals)
        stderr[b] = np.full(len(minutes), np.nan)
    curve = StabilityCurve("between_subject", minutes, value, stderr)
    curve.knee = _knee_or_none(minutes, curve.average())
    return curve


# ---------------------------------------------------------------------------
# Knee detection
# ---------------------------------------------------------------------------


def knee_point(xs, ys, sensitivity: float = 1.0):
    """Knee of a concave increasing curve (Kneedle, offline).

    Both axes are min-max normalised and the difference curve
    ``d = y_n - x_n`` is scanned.  Each strict local maximum ``m`` of ``d``
    sets a threshold ``d[m] - S * mean(diff(x_n))``; ``x[m]`` is the knee if
    ``d`` falls below that threshold before the next local minimum.  The
    first such maximum wins.  Returns ``None`` when no maximum qualifies.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError("xs and ys must be 1-D and of equal length")
    if len(x) < 3:
        raise ValueError("knee detection needs at least three points")
    if np.any(np.diff(x) <= 0):
        raise ValueError("xs must be strictly increasing")
    y_span = y.max() - y.min()
    if y_span == 0:
        return None
    xn = (x - x.min()) / (x.max() - x.min())
    yn = (y - y.min()) / y_span
    d = yn - xn
    inner = np.arange(1, len(d) - 1)
    maxima = inner[(d[inner] > d[inner - 1]) & (d[inner] > d[inner + 1])]
    minima = inner[(d[inner] < d[inner - 1]) & (d[inner] < d[inner + 1])]
    step = float(np.mean(np.diff(xn)))
    for m in maxima:
        threshold = d[m] - sensitivity * step
        later_min = minima[minima > m]
        stop = int(later_min[0]) if later_min.size else len(d) - 1
        if np.any(d[m + 1:stop + 1] < threshold):
            return float(x[m])
    return None


# ---------------------------------------------------------------------------
# Classification against recording length
# ---------------------------------------------------------------------------


@dataclass
class DurationCurve:
    minutes: tuple
    accuracy: np.ndarray
    f1: np.ndarray
    auc: np.ndarray
    knee: float | None
    reports: list

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("duration_min,accuracy,f1,auc\n")
            for row in zip(self.minutes, self.accuracy, self.f1, self.auc):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def classification_vs_duration(dt: DurationTmifs, bands=NARROW_BANDS, **kw) -> DurationCurve:
    """Nested-LOSO evaluation at every duration; knee on the accuracy curve."""
    reports = [nested_loso_evaluate(dt.cohort_at(m), bands=bands, **kw) for m in dt.grid.minutes]
    acc = np.array([r.accuracy for r in reports])
    knee = knee_point(dt.grid.minutes, acc) if len(acc) >= 3 else None
    return DurationCurve(dt.grid.minutes, acc, np.array([r.f1 for r in reports]),
                         np.array([r.auc for r in reports]), knee, reports)


# ---------------------------------------------------------------------------
# Reliability and correlation comparisons
# ---------------------------------------------------------------------------


def fisher_z_compare(r1: float, n1: int, r2: float, n2: int) -> tuple:
    """z statistic and two-tailed p for the difference of two independent r."""
    for r in (r1, r2):
        if not -1.0 < r < 1.0:
            raise ValueError(f"correlation must lie strictly inside (-1, 1), got {r}")
    for n in (n1, n2):
        if n <= 3:
            raise ValueError(f"sample size must exceed 3, got {n}")
    z = (math.atanh(r1) - math.atanh(r2)) / math.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3))
    return z, float(2.0 * stats.norm.sf(abs(z)))


def correlation_ci(r: float, n: int, level: float = 0.95) -> tuple:
    """Fisher-z confidence interval for a Pearson correlation."""
    if abs(r) >= 1.0:
        return r, r
    half = stats.norm.ppf(0.5 + level / 2.0) / math.sqrt(n - 3)
    z = math.atanh(r)
    return math.tanh(z - half), math.tanh(z + half)


def correlation_p(r: float, n: int) -> float:
    """Two-tailed p of H0: rho = 0 via t = r sqrt(n-2) / sqrt(1-r^2)."""
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * stats.t.sf(abs(t), n - 2))


@dataclass
class ReliabilityRow:
    band: str
    group: str
    n: int
    r: float
    ci_low: float
    ci_high: float
    p: float
    p_corrected: float


@dataclass
class ReliabilityTable:
    rows: list
    comparisons: list                    # (band, z, p, p_corrected)

    def row(self, band: str, group: str) -> ReliabilityRow:
        return next(r for r in self.rows if r.band == band and r.group == group)

    def to_csv(self, path) -> None:
        """One line per band with both groups side by side and the Fisher z test."""
        groups = sorted({r.group for r in self.rows})
        cols = ["band"]
        for g in groups:
            cols += [f"r_{g}", f"ci_low_{g}", f"ci_high_{g}", f"p_{g}", f"p_corrected_{g}", f"n_{g}"]
        cols += ["fisher_z", "p_fisher", "p_fisher_corrected"]
        comp = {c[0]: c[1:] for c in self.comparisons}
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(cols) + "\n")
            for band in dict.fromkeys(r.band for r in self.rows):
                vals = [band]
                for g in groups:
                    r = self.row(band, g)
                    vals += [repr(r.r), repr(r.ci_low), repr(r.ci_high), repr(r.p),
                             repr(r.p_corrected), str(r.n)]
                vals += [repr(v) if v is not None else "" for v in comp.get(band, (None,) * 3)]
                fh.write(",".join(vals) + "\n")


def _halves_one(sig, grid, sel, bands, window_ms):
    half = sig.n_samples // 2
    first = subject_tmifs(sig, grid, sel, bands, n_samples=half, start=0)
    second = subject_tmifs(sig, grid, sel, bands, n_samples=half, start=half)
    return ({b: mean_mi(first[b], window_ms) for b in bands},
            {b: mean_mi(second[b], window_ms) for b in bands})


def split_half_means(signals, grid: LagGrid, sel=None, bands=NARROW_BANDS,
                     window_ms=MEAN_MI_WINDOW_MS, jobs: int = 1) -> list:
    """``(first, second)`` mean-MI dicts per subject; odd lengths drop the last sample."""
    work = partial(_halves_one, grid=grid, sel=sel, bands=tuple(bands), window_ms=window_ms)
    return pmap(work, list(signals), jobs)


def split_half_reliability(groups, halves, bands=NARROW_BANDS) -> ReliabilityTable:
    """Per band and group: r between halves, Fisher CI and Bonferroni-corrected p.

    ``groups`` gives each subject's group and ``halves`` the matching
    ``(first, second)`` mean-MI dicts from :func:`split_half_means`.
    """
    groups = list(groups)
    k = len(bands)
    rows, comparisons = [], []
    for b in bands:
        per_group = {}
        for g in sorted(set(groups)):
            idx = [i for i, gi in enumerate(groups) if gi == g]
            if len(idx) < 4:
                raise ValueError(f"group {g!r} needs at least four subjects")
            a = [halves[i][0][b] for i in idx]
            c = [halves[i][1][b] for i in idx]
            r = pearson(a, c)
            if math.isnan(r):
                raise ValueError(f"{b}/{g}: zero-variance mean MI")
            lo, hi = correlation_ci(r, len(idx))
            p = correlation_p(r, len(idx))
            rows.append(ReliabilityRow(b, g, len(idx), r, lo, hi, p, min(1.0, p * k)))
            per_group[g] = (r, len(idx))
        if len(per_group) == 2:
            (r1, n1), (r2, n2) = per_group.values()
            if abs(r1) < 1 and abs(r2) < 1:
                z, p = fisher_z_compare(r1, n1, r2, n2)
                comparisons.append((b, z, p, min(1.0, p * k)))
    return ReliabilityTable(rows, comparisons)


def band_correlation_matrix(mean_mi_by_band: dict, bands=ALL_BANDS) -> np.ndarray:
    """Pearson r across subjects between the mean MI of every band pair."""
    data = np.array([np.asarray(mean_mi_by_band[b], dtype=float) for b in bands])
    if data.shape[1] < 3:
        raise ValueError("band correlation needs at least three subjects")
    sd = data.std(axis=1)
    if np.any(sd == 0):
        flat = [b for b, s in zip(bands, sd) if s == 0]
        raise ValueError(f"zero-variance mean MI in band(s) {flat}")
    z = (data - data.mean(axis=1, keepdims=True)) / sd[:, None]
    m = (z @ z.T) / data.shape[1]
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 1.0)
    return np.clip(m, -1.0, 1.0)


def write_matrix_csv(path, bands, matrix) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("band," + ",".join(bands) + "\n")
        for b, row in zip(bands, matrix):
            fh.write(b + "," + ",".join(repr(float(v)) for v in row) + "\n")
