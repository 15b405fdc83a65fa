import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from envtrack.core import (
    BANDS, CohortManifest, LagGrid, ManifestError, MatrixFormatError, Recording, Subject,
    SubjectEntry, Tmif, get_band, load_layout, read_matrix, validate_recording, write_matrix,
)


def test_band_edges():
    edges = {n: (b.lo_hz, b.hi_hz) for n, b in BANDS.items()}
    assert edges == {"delta": (0.5, 4), "theta": (4, 8), "alpha": (8, 12), "beta": (12, 30),
                     "gamma": (30, 49), "broad": (0.5, 49)}
    with pytest.raises(ValueError):
        get_band("mu")


def test_recording_invariants():
    with pytest.raises(ValueError):
        Recording(np.zeros((10, 2)), 128, ("a",))
    with pytest.raises(ValueError):
        Recording(np.zeros((10, 2)), 0, ("a", "b"))
    with pytest.raises(ValueError):
        Recording(np.zeros((10, 2)), 8000, ("a", "b"), "audio")
    rec = Recording(np.zeros((10, 2)), 128, ("a", "b"))
    with pytest.raises(ValueError):
        rec.samples[0, 0] = 1.0


def test_validate_flat_channel():
    x = np.random.default_rng(0).normal(size=(100, 2))
    x[:, 1] = 0.0
    report = validate_recording(Recording(x, 128, ("a", "b")))
    assert report.flat == ("b",)
    assert report.non_finite == ()


def test_validate_nan():
    x = np.random.default_rng(0).normal(size=(100, 2))
    x[5, 0] = np.nan
    report = validate_recording(Recording(x, 128, ("a", "b")))
    assert report.non_finite == ("a",)


def test_validate_clean_sines_and_fs_mismatch():
    t = np.arange(512) / 128.0
    x = np.column_stack([np.sin(2 * np.pi * 3 * t), np.cos(2 * np.pi * 5 * t)])
    rec = Recording(x, 128, ("a", "b"))
    assert validate_recording(rec).ok
    assert validate_recording(rec, expected_fs=128).ok
    assert validate_recording(rec, expected_fs=256).fs_mismatch == (128.0, 256.0)


def test_matrix_roundtrip(tmp_path):
    x = np.arange(6, dtype=float).reshape(3, 2) / 4.0
    write_matrix(Recording(x, 128, ("a", "b")), tmp_path / "m")
    back = read_matrix(tmp_path / "m")
    np.testing.assert_array_equal(back.samples, x)
    assert back.channel_names == ("a", "b") and back.fs == 128.0


def test_matrix_header_key_order(tmp_path):
    write_matrix(Recording(np.zeros((2, 1)), 64, ("c",)), tmp_path / "m")
    header = json.loads((tmp_path / "m.json").read_text())
    assert list(header) == ["version", "fs", "rows", "cols", "channels", "kind"]


def test_matrix_short_payload(tmp_path):
    write_matrix(Recording(np.ones((3, 2)), 128, ("a", "b")), tmp_path / "m")
    raw = (tmp_path / "m.f32").read_bytes()
    (tmp_path / "m.f32").write_bytes(raw[:-4])
    with pytest.raises(MatrixFormatError, match="payload"):
        read_matrix(tmp_path / "m")


def test_matrix_unknown_version(tmp_path):
    write_matrix(Recording(np.ones((3, 2)), 128, ("a", "b")), tmp_path / "m")
    header = json.loads((tmp_path / "m.json").read_text())
    header["version"] = 7
    (tmp_path / "m.json").write_text(json.dumps(header))
    with pytest.raises(MatrixFormatError, match="version"):
        read_matrix(tmp_path / "m")


def test_matrix_known_bytes(tmp_path):
    # handcrafted little-endian float32 payload, 2 x 2, sample-major
    values = [1.5, -2.0, 0.25, 1e-3]
    (tmp_path / "h.f32").write_bytes(struct.pack("<4f", *values))
    (tmp_path / "h.json").write_text(json.dumps(
        {"version": 1, "fs": 100.0, "rows": 2, "cols": 2, "channels": ["x", "y"], "kind": "eeg"}))
    rec = read_matrix(tmp_path / "h")
    expected = np.array(values, dtype=np.float32).astype(float).reshape(2, 2)
    np.testing.assert_array_equal(rec.samples, expected)
    assert rec.samples[1, 1] == float(np.float32(1e-3))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=9),
                  elements=st.floats(-1e30, 1e30, allow_nan=False)))
def test_matrix_roundtrip_property(tmp_path_factory, x):
    d = tmp_path_factory.mktemp("m")
    rec = Recording(x, 128, tuple(f"c{i}" for i in range(x.shape[1])))
    write_matrix(rec, d / "a")
    back = read_matrix(d / "a")
    np.testing.assert_array_equal(back.samples, x.astype(np.float32).astype(float))
    write_matrix(back, d / "b")
    assert (d / "a.f32").read_bytes() == (d / "b.f32").read_bytes()
    assert (d / "a.json").read_bytes() == (d / "b.json").read_bytes()


def test_lag_grid_default():
    g = LagGrid(128.0)
    assert len(g) == 91
    assert g.lags[0] == -26 and g.lags[-1] == 64
    assert np.all(np.diff(g.lags) == 1)


def test_lag_grid_rounds_outward():
    g = LagGrid(100.0, -15.0, 25.0)
    assert g.lags[0] == -2 and g.lags[-1] == 3


def test_tmif_csv_roundtrip(tmp_path):
    g = LagGrid(128.0)
    v = np.linspace(0, 1, len(g)) ** 2
    Tmif(g, v, "delta").to_csv(tmp_path / "t.csv")
    back = Tmif.from_csv(tmp_path / "t.csv", 128.0, "delta")
    assert back.grid == g
    np.testing.assert_array_equal(back.values, v)
    multi = Tmif(g, np.vstack([v, 2 * v]), "delta", ("Fz", "Cz"))
    multi.to_csv(tmp_path / "m.csv")
    back = Tmif.from_csv(tmp_path / "m.csv", 128.0)
    assert back.channels == ("Fz", "Cz")
    np.testing.assert_array_equal(back.values, multi.values)


def test_subject_label_and_age():
    assert Subject("a", "aphasia", 70).label == 1
    assert Subject("b", "control", 70).label == -1
    with pytest.raises(ValueError):
        Subject("c", "control", 0)


def _write_cohort(root, ids):
    entries = []
    for i in ids:
        write_matrix(Recording(np.ones((4, 2)), 128, ("a", "b")), root / f"{i}")
        entries.append(SubjectEntry(i, "control", 70.0, eeg=i))
    return entries


def test_manifest_order_and_files(tmp_path):
    ids = ["s3", "s1", "s2"]
    CohortManifest(_write_cohort(tmp_path, ids), root=tmp_path).save(tmp_path / "m.json")
    back = CohortManifest.load(tmp_path / "m.json")
    assert [s.id for s in back] == ids
    (tmp_path / "s1.f32").unlink()
    with pytest.raises(ManifestError, match="missing"):
        CohortManifest.load(tmp_path / "m.json")


def test_manifest_duplicate_ids(tmp_path):
    with pytest.raises(ManifestError, match="duplicate"):
        CohortManifest([SubjectEntry("a", "control", 60), SubjectEntry("a", "aphasia", 61)])


def test_layout_contains_selection():
    from envtrack.core import DEFAULT_CHANNEL_SELECTION
    layout = load_layout()
    assert len(layout) == 64
    assert set(DEFAULT_CHANNEL_SELECTION) <= set(layout)
    assert len(set(layout.values())) == 64
