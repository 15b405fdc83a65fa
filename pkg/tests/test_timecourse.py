import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scipy import stats

from envtrack.cohort import SubjectSignals, subject_tmifs
from envtrack.core import LagGrid, Recording, Subject, Tmif
from envtrack.dsp import EnvelopeSet
from envtrack.timecourse import (
    DurationGrid, band_correlation_matrix, between_subject_stability, classification_vs_duration,
    correlation_ci, correlation_p, crop_and_tmif, duration_tmifs, fisher_z_compare, knee_point,
    pearson, split_half_means, split_half_reliability, within_subject_stability,
    write_matrix_csv,
)

FS = 128.0
GRID = LagGrid(FS, -100.0, 450.0)
BANDS = ("delta", "theta")


def _signals(n_subjects, minutes, seed, snr=None, duplicate_halves=False, gains=None):
    """Subjects whose EEG is a delayed, scaled copy of their envelope plus noise."""
    rng = np.random.default_rng(seed)
    n = int(minutes * 60 * FS)
    out = []
    for i in range(n_subjects):
        envs, eeg = {}, {}
        g = 1.0 if gains is None else gains[i]
        for b in BANDS:
            e = rng.normal(size=n)
            if duplicate_halves:
                e[n // 2:] = e[:n // 2]
            resp = np.roll(e, 10)
            noise = rng.normal(size=(n, 2))
            if duplicate_halves:
                noise[n // 2:] = noise[:n // 2]
            x = g * np.outer(resp, [1.0, 0.5]) + (0.0 if snr is None else snr) * noise
            envs[b] = e
            eeg[b] = Recording(x, FS, ("Fz", "Pz"))
        group = "aphasia" if i % 2 else "control"
        out.append(SubjectSignals(f"S{i:02d}", group, 70.0, eeg, EnvelopeSet(FS, envs)))
    return out


# --- Durations and cropping --------------------------------------------------------


def test_duration_grid_defaults_and_errors():
    assert DurationGrid().minutes == tuple(float(m) for m in range(1, 26, 2))
    with pytest.raises(ValueError):
        DurationGrid((3, 1))
    with pytest.raises(ValueError):
        DurationGrid(())
    with pytest.raises(ValueError, match="exceeds"):
        DurationGrid((1, 30)).check(25.0)
    assert DurationGrid.up_to(5.0).minutes == (1.0, 3.0, 5.0)


def test_crop_full_length_matches_uncropped():
    sig = _signals(1, 2.0, 0, snr=3.0)[0]
    full = crop_and_tmif(sig, 2.0, "delta", GRID)
    ref = subject_tmifs(sig, GRID, None, ("delta",))["delta"]
    assert full.values.tobytes() == ref.values.tobytes()


def test_crop_errors():
    sig = _signals(1, 1.0, 0, snr=1.0)[0]
    with pytest.raises(ValueError):
        crop_and_tmif(sig, 0.0, "delta", GRID)
    with pytest.raises(ValueError, match="cannot crop"):
        crop_and_tmif(sig, 2.0, "delta", GRID)


def test_short_crop_is_noisier():
    signals = _signals(8, 6.0, 1, snr=8.0)
    dt = duration_tmifs(signals, DurationGrid((1, 5)), GRID, bands=BANDS)
    curve = within_subject_stability(dt)
    for b in BANDS:
        assert curve.value[b][1] > curve.value[b][0]


# --- Stability curves -----------------------------------------------------------------


def test_within_subject_full_duration_is_one():
    dt = duration_tmifs(_signals(4, 3.0, 2, snr=4.0), DurationGrid((1, 3)), GRID, bands=BANDS)
    curve = within_subject_stability(dt)
    for b in BANDS:
        assert np.all(curve.per_subject[b][:, -1] == 1.0)
        assert curve.value[b][-1] == 1.0
        assert np.all(np.abs(curve.per_subject[b]) <= 1.0)


def test_within_subject_zero_variance_recorded_missing():
    dt = duration_tmifs(_signals(3, 3.0, 2, snr=4.0), DurationGrid((1, 3)), GRID, bands=BANDS)
    flat = Tmif(GRID, np.full(len(GRID), 0.3), "delta")
    dt.by_duration[1.0][0] = {**dt.by_duration[1.0][0], "delta": flat}
    curve = within_subject_stability(dt)
    assert math.isnan(curve.per_subject["delta"][0, 0])
    assert np.isfinite(curve.value["delta"][0])


def test_between_subject_full_is_one_and_spread_ranks_hold():
    gains = np.linspace(0.05, 1.5, 8)
    dt = duration_tmifs(_signals(8, 3.0, 3, snr=1.0, gains=gains), DurationGrid((1, 3)),
                        GRID, bands=BANDS)
    curve = between_subject_stability(dt)
    for b in BANDS:
        assert curve.value[b][-1] == pytest.approx(1.0)
        assert curve.value[b][0] > 0.95


def test_between_subject_needs_three():
    dt = duration_tmifs(_signals(2, 2.0, 3, snr=1.0), DurationGrid((1, 2)), GRID, bands=BANDS)
    with pytest.raises(ValueError, match="three"):
        between_subject_stability(dt)


def test_tidy_csv(tmp_path):
    dt = duration_tmifs(_signals(3, 2.0, 4, snr=2.0), DurationGrid((1, 2)), GRID, bands=BANDS)
    between_subject_stability(dt).to_csv(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "band,duration_min,value,stderr"
    assert len(lines) == 1 + 2 * 2
    assert lines[1].startswith("delta,1.0,") and lines[1].endswith(",")


# --- Knee detection -----------------------------------------------------------------------


def _kneed(x, y):
    kneed = pytest.importorskip("kneed")
    return kneed.KneeLocator(x, y, S=1.0, curve="concave", direction="increasing",
                             online=False).knee


CANONICAL = {
    "exp": lambda x: 1 - np.exp(-x / 2),
    "saturating": lambda x: x / (x + 2),
    "log": lambda x: np.log1p(x),
    "sqrt": lambda x: np.sqrt(x),
    "tanh": lambda x: np.tanh(x / 3),
}


@pytest.mark.parametrize("name", list(CANONICAL))
def test_knee_matches_reference(name):
    x = np.arange(0, 10.5, 0.5)
    y = CANONICAL[name](x)
    ours, ref = knee_point(x, y), _kneed(x, y)
    assert ref is not None and ours is not None
    assert abs(ours - ref) <= 0.5


def test_knee_straight_line_none():
    x = np.arange(10.0)
    assert knee_point(x, x) is None
    assert knee_point(x, np.ones(10)) is None


def test_knee_needs_three_points():
    with pytest.raises(ValueError):
        knee_point([1, 2], [1, 2])
    with pytest.raises(ValueError):
        knee_point([1, 1, 2], [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 100), st.floats(-100, 100), st.floats(0.2, 5))
def test_knee_affine_invariant(scale, shift, tau):
    x = np.arange(0, 12.0)
    y = 1 - np.exp(-x / tau)
    assert knee_point(x, scale * y + shift) == knee_point(x, y)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=15))
def test_knee_is_a_grid_point_or_none(ys):
    x = np.arange(len(ys), dtype=float)
    k = knee_point(x, ys)
    assert k is None or k in x


# --- Classification against duration -------------------------------------------------------


def test_single_duration_curve_has_no_knee():
    rng = np.random.default_rng(0)
    subs = []
    g = LagGrid(FS, 0.0, 50.0)
    for i in range(8):
        grp = "aphasia" if i < 4 else "control"
        t = {b: Tmif(g, rng.normal(size=len(g)) + (3.0 if grp == "aphasia" else 0.0), b)
             for b in ("delta", "theta", "alpha", "beta", "gamma")}
        subs.append(Subject(f"S{i}", grp, 70.0, t))

    class _One:
        grid = DurationGrid((5,))

        def cohort_at(self, m):
            return subs

    curve = classification_vs_duration(_One(), C_grid=(1.0,), prune_grid=(50.0,))
    assert len(curve.accuracy) == 1 and curve.knee is None
    assert curve.accuracy[0] == 1.0


# --- Fisher z and reliability ------------------------------------------------------------


def test_fisher_z_hand_example():
    z, p = fisher_z_compare(0.8, 30, 0.3, 30)
    assert z == pytest.approx(2.899, abs=1e-3)
    assert p == pytest.approx(0.00374, abs=1e-4)


def test_fisher_z_equal_r():
    assert fisher_z_compare(0.4, 20, 0.4, 50) == (0.0, 1.0)


@settings(max_examples=100)
@given(st.floats(-0.99, 0.99), st.integers(4, 200), st.floats(-0.99, 0.99), st.integers(4, 200))
def test_fisher_z_antisymmetric(r1, n1, r2, n2):
    z, p = fisher_z_compare(r1, n1, r2, n2)
    z2, p2 = fisher_z_compare(r2, n2, r1, n1)
    assert z2 == pytest.approx(-z, abs=1e-12) and p2 == pytest.approx(p)
    assert 0 < p <= 1


def test_fisher_z_errors():
    with pytest.raises(ValueError):
        fisher_z_compare(1.0, 10, 0.3, 10)
    with pytest.raises(ValueError):
        fisher_z_compare(0.5, 3, 0.3, 10)


def test_correlation_ci_and_p():
    lo, hi = correlation_ci(0.5, 30)
    assert lo == pytest.approx(math.tanh(math.atanh(0.5) - 1.959964 / math.sqrt(27)), abs=1e-6)
    assert lo < 0.5 < hi
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 25))
    r = pearson(a, b)
    assert correlation_p(r, 25) == pytest.approx(stats.pearsonr(a, b).pvalue, rel=1e-9)


def test_pearson_zero_variance_is_nan():
    assert math.isnan(pearson([1, 1, 1], [1, 2, 3]))


def test_split_half_duplicate_gives_one():
    signals = _signals(8, 2.0, 5, snr=1.0, duplicate_halves=True,
                       gains=np.linspace(0.2, 1.5, 8))
    halves = split_half_means(signals, GRID, bands=BANDS)
    table = split_half_reliability([s.group for s in signals], halves, BANDS)
    for b in BANDS:
        for g in ("aphasia", "control"):
            assert table.row(b, g).r == pytest.approx(1.0, abs=1e-12)


def test_split_half_bonferroni_and_csv(tmp_path):
    signals = _signals(10, 2.0, 6, snr=1.0, gains=np.linspace(0.2, 1.5, 10))
    halves = split_half_means(signals, GRID, bands=BANDS)
    table = split_half_reliability([s.group for s in signals], halves, BANDS)
    for row in table.rows:
        assert row.p_corrected == pytest.approx(min(1.0, row.p * len(BANDS)))
        assert -1 <= row.r <= 1 and row.ci_low <= row.r <= row.ci_high
    table.to_csv(tmp_path / "rel.csv")
    header = (tmp_path / "rel.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "band" and header[-3:] == ["fisher_z", "p_fisher", "p_fisher_corrected"]


def test_split_half_group_too_small():
    signals = _signals(6, 1.0, 7, snr=1.0)
    halves = split_half_means(signals, GRID, bands=BANDS)
    with pytest.raises(ValueError, match="four"):
        split_half_reliability([s.group for s in signals], halves, BANDS)


# --- Band correlation matrix ------------------------------------------------------------------


def test_band_matrix_properties(rng):
    data = {b: rng.normal(size=27) for b in ("broad", "delta", "theta", "alpha", "beta", "gamma")}
    data["theta"] = data["delta"].copy()
    m = band_correlation_matrix(data)
    assert m.shape == (6, 6)
    assert np.all(np.diag(m) == 1.0)
    np.testing.assert_allclose(m, m.T, atol=1e-12)
    assert m[1, 2] == pytest.approx(1.0)
    assert np.all(np.abs(m) <= 1.0)
    np.testing.assert_allclose(m[0, 3], np.corrcoef(data["broad"], data["alpha"])[0, 1], atol=1e-12)


def test_band_matrix_independent_features_small():
    vals = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        m = band_correlation_matrix({b: r.normal(size=27) for b in
                                     ("broad", "delta", "theta", "alpha", "beta", "gamma")})
        vals.append(np.abs(m[np.triu_indices(6, 1)]).mean())
    assert np.mean(vals) < 0.25


def test_band_matrix_errors(rng):
    data = {b: rng.normal(size=5) for b in ("broad", "delta", "theta", "alpha", "beta", "gamma")}
    data["beta"] = np.ones(5)
    with pytest.raises(ValueError, match="beta"):
        band_correlation_matrix(data)
    with pytest.raises(ValueError, match="three"):
        band_correlation_matrix({b: v[:2] for b, v in data.items()})


def test_matrix_csv(tmp_path):
    write_matrix_csv(tmp_path / "m.csv", ("a", "b"), np.eye(2))
    assert (tmp_path / "m.csv").read_text().splitlines() == ["band,a,b", "a,1.0,0.0", "b,0.0,1.0"]
