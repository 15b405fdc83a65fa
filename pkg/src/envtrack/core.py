"""Domain types, recording validation and on-disk matrix / manifest I/O.

All numeric payloads are handled in float64 in memory and stored as raw
little-endian float32 (sample-major) next to a small JSON sidecar::

    <name>.f32   rows x cols float32, row-major (time x channels)
    <name>.json  {"version": 1, "fs": ..., "rows": ..., "cols": ...,
                  "channels": [...], "kind": "eeg" | "audio"}
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MATRIX_VERSION = 1
MANIFEST_VERSION = 1
GROUPS = ("control", "aphasia")
KINDS = ("eeg", "audio")


class MatrixFormatError(ValueError):
    """Raised when a matrix file pair is malformed."""


class ManifestError(ValueError):
    """Raised when a cohort manifest is inconsistent."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Frequency bands
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BandSpec:
    name: str
    lo_hz: float
    hi_hz: float

    def __post_init__(self):
        if not 0 < self.lo_hz < self.hi_hz:
            raise ValueError(
                f"band {self.name!r}: need 0 < lo < hi, got {self.lo_hz}, {self.hi_hz}")

    @property
    def center_hz(self) -> float:
        return 0.5 * (self.lo_hz + self.hi_hz)


BANDS = {
    "delta": BandSpec("delta", 0.5, 4.0),
    "theta": BandSpec("theta", 4.0, 8.0),
    "alpha": BandSpec("alpha", 8.0, 12.0),
    "beta": BandSpec("beta", 12.0, 30.0),
    "gamma": BandSpec("gamma", 30.0, 49.0),
    "broad": BandSpec("broad", 0.5, 49.0),
}
NARROW_BANDS = ("delta", "theta", "alpha", "beta", "gamma")
ALL_BANDS = ("broad",) + NARROW_BANDS


def get_band(band: str | BandSpec) -> BandSpec:
    if isinstance(band, BandSpec):
        return band
    try:
        return BANDS[band]
    except KeyError:
        raise ValueError(f"unknown band {band!r}; expected one of {sorted(BANDS)}") from None


# ---------------------------------------------------------------------------
# Recordings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Recording:
    """Multichannel time series, shape (n_times, n_channels).

    Structural invariants are enforced here; data-quality problems (non-finite
    samples, flat channels) are left to :func:`validate_recording` so that
    damaged files can still be loaded and inspected.
    """

    samples: np.ndarray
    fs: float
    channel_names: tuple[str, ...]
    kind: str = "eeg"

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2:
            raise ValueError("samples must be a (time x channels) matrix")
        object.__setattr__(self, "samples", _frozen(samples))
        object.__setattr__(self, "fs", float(self.fs))
        object.__setattr__(self, "channel_names", tuple(str(c) for c in self.channel_names))
        if not self.fs > 0 or not math.isfinite(self.fs):
            raise ValueError(f"fs must be positive, got {self.fs}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if samples.shape[1] != len(self.channel_names):
            raise ValueError(
                f"{samples.shape[1]} channels in samples but "
                f"{len(self.channel_names)} channel names")
        if len(set(self.channel_names)) != len(self.channel_names):
            raise ValueError("channel names must be unique")
        if self.kind == "audio" and samples.shape[1] != 1:
            raise ValueError("audio recordings must have exactly one channel")

    @property
    def n_times(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_times / self.fs

    def pick(self, names: Sequence[str]) -> "Recording":
        missing = [n for n in names if n not in self.channel_names]
        if missing:
            raise KeyError(f"channels not in recording: {missing}")
        idx = [self.channel_names.index(n) for n in names]
        return Recording(self.samples[:, idx], self.fs, tuple(names), self.kind)

    def crop(self, n_samples: int, start: int = 0) -> "Recording":
        return Recording(self.samples[start:start + n_samples], self.fs,
                         self.channel_names, self.kind)


@dataclass(frozen=True)
class ValidationReport:
    non_finite: tuple[str, ...] = ()
    flat: tuple[str, ...] = ()
    fs_mismatch: tuple[float, float] | None = None

    @property
    def ok(self) -> bool:
        return not (self.non_finite or self.flat or self.fs_mismatch)

    def as_dict(self) -> dict:
        return {"non_finite": list(self.non_finite), "flat": list(self.flat),
                "fs_mismatch": None if self.fs_mismatch is None else list(self.fs_mismatch)}


def validate_recording(rec: Recording, expected_fs: float | None = None) -> ValidationReport:
    """Report non-finite samples, flat channels and a sampling-rate mismatch.

    Nothing is raised and nothing is dropped; flat means an exact zero
    standard deviation.
    """
    x = rec.samples
    finite = np.isfinite(x).all(axis=0)
    non_finite = tuple(n for n, ok in zip(rec.channel_names, finite) if not ok)
    flat = []
    for j, name in enumerate(rec.channel_names):
        if finite[j] and x.shape[0] > 0 and np.std(x[:, j]) == 0:
            flat.append(name)
    mismatch = None
    if expected_fs is not None and float(expected_fs) != rec.fs:
        mismatch = (rec.fs, float(expected_fs))
    return ValidationReport(non_finite, tuple(flat), mismatch)


# ---------------------------------------------------------------------------
# Lag grid and TMIF containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LagGrid:
    """Contiguous integer lags covering [t_min_ms, t_max_ms], rounded outward."""

    fs: float
    t_min_ms: float = -200.0
    t_max_ms: float = 500.0
    lags: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.fs > 0:
            raise ValueError("fs must be positive")
        if not self.t_min_ms < self.t_max_ms:
            raise ValueError("t_min_ms must be below t_max_ms")
        lo = math.floor(round(self.t_min_ms * self.fs / 1000.0, 9))
        hi = math.ceil(round(self.t_max_ms * self.fs / 1000.0, 9))
        object.__setattr__(self, "lags", _frozen(np.arange(lo, hi + 1), dtype=np.int64))

    @property
    def times_ms(self) -> np.ndarray:
        return self.lags * 1000.0 / self.fs

    def __len__(self) -> int:
        return len(self.lags)

    def __eq__(self, other):
        return (isinstance(other, LagGrid) and self.fs == other.fs
                and np.array_equal(self.lags, other.lags))

    def __hash__(self):
        return hash((self.fs, int(self.lags[0]), int(self.lags[-1])))


@dataclass(frozen=True)
class Tmif:
    """Mutual information (bits) against lag.

    ``values`` is 1-D (n_lags,) for a multivariate TMIF, or 2-D
    (n_channels, n_lags) for single-channel TMIFs.
    """

    grid: LagGrid
    values: np.ndarray
    band: str | None = None
    channels: tuple[str, ...] | None = None
    unit: str = "bits"

    def __post_init__(self):
        v = _frozen(self.values)
        object.__setattr__(self, "values", v)
        if v.shape[-1] != len(self.grid):
            raise ValueError(f"TMIF has {v.shape[-1]} lags, grid has {len(self.grid)}")
        if v.ndim == 2:
            if self.channels is None or len(self.channels) != v.shape[0]:
                raise ValueError("single-channel TMIF needs one name per row")
        elif v.ndim != 1:
            raise ValueError("TMIF values must be 1-D or 2-D")
        if not np.isfinite(v).all():
            raise ValueError("TMIF values must be finite")

    @property
    def multivariate(self) -> bool:
        return self.values.ndim == 1

    def to_csv(self, path) -> None:
        """Write ``lag_ms,value`` or ``lag_ms,<chan1>,...`` with full precision."""
        t = self.grid.times_ms
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if self.multivariate:
                fh.write("lag_ms,value\n")
                for ti, vi in zip(t, self.values):
                    fh.write(f"{float(ti)!r},{float(vi)!r}\n")
            else:
                fh.write("lag_ms," + ",".join(self.channels) + "\n")
                for k, ti in enumerate(t):
                    fh.write(f"{float(ti)!r}," + ",".join(repr(float(v)) for v in self.values[:, k]) + "\n")

    @classmethod
    def from_csv(cls, path, fs: float, band: str | None = None) -> "Tmif":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            rows = [list(map(float, line.split(","))) for line in fh if line.strip()]
        arr = np.array(rows)
        lags = np.rint(arr[:, 0] * fs / 1000.0).astype(int)
        if np.any(np.diff(lags) != 1):
            raise ValueError("TMIF CSV lags are not contiguous")
        grid = LagGrid(fs, lags[0] * 1000.0 / fs, lags[-1] * 1000.0 / fs)
        if header[1:] == ["value"]:
            return cls(grid, arr[:, 1], band)
        return cls(grid, arr[:, 1:].T, band, tuple(header[1:]))


# ---------------------------------------------------------------------------
# Subjects and cohort manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Subject:
    id: str
    group: str
    age: float
    tmifs: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"group must be one of {GROUPS}, got {self.group!r}")
        if not self.age > 0:
            raise ValueError(f"age must be positive, got {self.age}")

    @property
    def label(self) -> int:
        """+1 for aphasia (the positive class), -1 for control."""
        return 1 if self.group == "aphasia" else -1


@dataclass(frozen=True)
class SubjectEntry:
    """One manifest row: metadata plus file stems relative to the manifest."""

    id: str
    group: str
    age: float
    eeg: str | None = None
    envelope: dict = field(default_factory=dict)
    band_eeg: dict = field(default_factory=dict)
    tmif: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {"id": self.id, "group": self.group, "age": self.age}
        if self.eeg is not None:
            d["eeg"] = self.eeg
        for key in ("envelope", "band_eeg", "tmif"):
            value = getattr(self, key)
            if value:
                d[key] = dict(sorted(value.items()))
        return d


@dataclass
class CohortManifest:
    """Ordered list of subjects with the files that belong to them.

    Paths in ``subjects`` are file stems (no ``.f32``/``.json`` suffix)
    relative to ``root``.
    """

    subjects: list
    fs: float = 128.0
    channel_selection: list = field(default_factory=list)
    adjacency: dict = field(default_factory=lambda: {"layout": "biosemi64", "k": 4})
    root: Path = Path(".")

    def __post_init__(self):
        ids = [s.id for s in self.subjects]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ManifestError(f"duplicate subject ids: {dupes}")
        for s in self.subjects:
            if s.group not in GROUPS:
                raise ManifestError(f"{s.id}: bad group {s.group!r}")
            if not s.age > 0:
                raise ManifestError(f"{s.id}: age must be positive")

    def __iter__(self) -> Iterator[SubjectEntry]:
        return iter(self.subjects)

    def __len__(self) -> int:
        return len(self.subjects)

    def resolve(self, stem: str) -> Path:
        return (self.root / stem).resolve()

    def referenced_stems(self) -> list:
        stems = []
        for s in self.subjects:
            if s.eeg:
                stems.append(s.eeg)
            for key in ("envelope", "band_eeg"):
                stems.extend(getattr(s, key).values())
        return stems

    def check_files(self) -> None:
        missing = []
        for stem in self.referenced_stems():
            p = self.resolve(stem)
            for suffix in (".f32", ".json"):
                if not p.with_name(p.name + suffix).exists():
                    missing.append(str(p) + suffix)
        for s in self.subjects:
            for stem in s.tmif.values():
                if not self.resolve(stem).exists():
                    missing.append(str(self.resolve(stem)))
        if missing:
            raise ManifestError(f"manifest references missing files: {missing[:5]}"
                                + (" ..." if len(missing) > 5 else ""))

    def as_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "fs": self.fs,
            "channel_selection": list(self.channel_selection),
            "adjacency": dict(self.adjacency),
            "subjects": [s.as_dict() for s in self.subjects],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.as_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, check: bool = True) -> "CohortManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {doc.get('version')!r}")
        try:
            subjects = [
                SubjectEntry(id=str(s["id"]), group=s["group"], age=float(s["age"]),
                             eeg=s.get("eeg"), envelope=dict(s.get("envelope", {})),
                             band_eeg=dict(s.get("band_eeg", {})), tmif=dict(s.get("tmif", {})))
                for s in doc["subjects"]
            ]
        except KeyError as exc:
            raise ManifestError(f"subject entry missing key {exc}") from None
        manifest = cls(subjects, float(doc.get("fs", 128.0)),
                       list(doc.get("channel_selection", [])),
                       dict(doc.get("adjacency", {"layout": "biosemi64", "k": 4})),
                       path.parent)
        if check:
            manifest.check_files()
        return manifest


# ---------------------------------------------------------------------------
# Matrix I/O
# ---------------------------------------------------------------------------


def _matrix_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".f32", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".f32"), p.with_name(p.name + ".json")


def write_matrix(rec: Recording, path) -> None:
    """Write ``rec`` as ``<path>.f32`` + ``<path>.json``."""
    payload_path, header_path = _matrix_paths(path)
    header = {
        "version": MATRIX_VERSION,
        "fs": rec.fs,
        "rows": rec.n_times,
        "cols": rec.n_channels,
        "channels": list(rec.channel_names),
        "kind": rec.kind,
    }
    payload_path.write_bytes(np.ascontiguousarray(rec.samples, dtype="<f4").tobytes())
    header_path.write_text(json.dumps(header) + "\n", encoding="utf-8")


def read_matrix(path) -> Recording:
    payload_path, header_path = _matrix_paths(path)
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise MatrixFormatError(f"missing sidecar header {header_path}") from None
    if header.get("version") != MATRIX_VERSION:
        raise MatrixFormatError(f"unknown matrix version {header.get('version')!r}")
    try:
        rows, cols = int(header["rows"]), int(header["cols"])
        fs, channels, kind = header["fs"], header["channels"], header["kind"]
    except KeyError as exc:
        raise MatrixFormatError(f"sidecar header missing {exc}") from None
    raw = payload_path.read_bytes()
    if len(raw) != rows * cols * 4:
        raise MatrixFormatError(
            f"{payload_path.name}: header claims {rows}x{cols} float32 "
            f"({rows * cols * 4} bytes), payload has {len(raw)} bytes")
    samples = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return Recording(samples, fs, tuple(channels), kind)


# ---------------------------------------------------------------------------
# Electrode layout
# ---------------------------------------------------------------------------


def load_layout(name: str = "biosemi64") -> dict:
    """Return ``{channel: (x, y)}`` for a bundled 2-D layout, or read a JSON file."""
    if name.endswith(".json"):
        doc = json.loads(Path(name).read_text(encoding="utf-8"))
    else:
        text = resources.files("envtrack.data").joinpath(f"{name}.json").read_text(encoding="utf-8")
        doc = json.loads(text)
    return {ch: (float(x), float(y)) for ch, (x, y) in doc["positions"].items()}


# Fronto-central and parieto-occipital channels used for the multivariate TMIF.
# Reconstructed from a figure; override through the manifest when known.
DEFAULT_CHANNEL_SELECTION = (
    "F1", "Fz", "F2", "FC3", "FC1", "FCz", "FC2", "FC4", "C1", "Cz", "C2",
    "P3", "P1", "Pz", "P2", "P4", "PO3", "POz", "PO4", "O1", "Oz", "O2",
)
