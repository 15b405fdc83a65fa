"""Loading manifest subjects into analysis-ready signals and TMIFs."""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import partial
from pathlib import Path

from ._parallel import pmap
from .core import CohortManifest, LagGrid, ManifestError, Recording, Subject, Tmif, read_matrix
from .dsp import EnvelopeSet, preprocess_eeg
from .gcmi import tmif_multivariate


@dataclass(frozen=True)
class SubjectSignals:
    """Band-filtered EEG and matching envelopes for one subject, both at 128 Hz."""

    id: str
    group: str
    age: float
    band_eeg: dict
    envelopes: EnvelopeSet

    @property
    def n_samples(self) -> int:
        return len(next(iter(self.envelopes.series.values())))

    @property
    def fs(self) -> float:
        return self.envelopes.fs


def load_signals(manifest: CohortManifest, entry, bands) -> SubjectSignals:
    """Read (and if needed preprocess) one manifest entry."""
    missing = [b for b in bands if b not in entry.envelope]
    if missing:
        raise ManifestError(f"{entry.id}: no envelope for bands {missing}")
    envs = {b: read_matrix(manifest.resolve(entry.envelope[b])).samples[:, 0] for b in bands}
    envset = EnvelopeSet(manifest.fs, envs)
    if all(b in entry.band_eeg for b in bands):
        band_eeg = {b: read_matrix(manifest.resolve(entry.band_eeg[b])) for b in bands}
    elif entry.eeg:
        band_eeg = preprocess_eeg(read_matrix(manifest.resolve(entry.eeg)), bands, manifest.fs)
    else:
        raise ManifestError(f"{entry.id}: neither band EEG nor raw EEG listed")
    for b, rec in band_eeg.items():
        if rec.fs != envset.fs or rec.n_times != len(envs[b]):
            raise ManifestError(f"{entry.id}/{b}: EEG ({rec.n_times} @ {rec.fs} Hz) and "
                                f"envelope ({len(envs[b])} @ {envset.fs} Hz) do not match")
    return SubjectSignals(entry.id, entry.group, entry.age, band_eeg, envset)


def load_cohort(manifest: CohortManifest, bands, jobs: int = 1) -> list:
    return pmap(partial(_load_one, manifest=manifest, bands=tuple(bands)), list(manifest), jobs)


def _load_one(entry, manifest, bands):
    return load_signals(manifest, entry, bands)


def selected_channels(manifest: CohortManifest, rec: Recording) -> tuple:
    sel = tuple(manifest.channel_selection) or rec.channel_names
    return sel


def subject_tmifs(sig: SubjectSignals, grid: LagGrid, sel, bands,
                  n_samples: int | None = None, start: int = 0) -> dict:
    """Multivariate TMIF per band, optionally on ``[start, start + n_samples)``."""
    out = {}
    for b in bands:
        rec = sig.band_eeg[b]
        env = sig.envelopes[b]
        if n_samples is not None:
            if start + n_samples > len(env):
                raise ValueError(f"{sig.id}: segment ends at sample {start + n_samples}, "
                                 f"recording has {len(env)}")
            rec = rec.crop(n_samples, start)
            env = env[start:start + n_samples]
        out[b] = tmif_multivariate(rec, env, grid, sel, band=b)
    return out


def _tmifs_one(sig, grid, sel, bands):
    return subject_tmifs(sig, grid, sel, bands)


def cohort_tmifs(signals, grid: LagGrid, sel, bands, jobs: int = 1) -> list:
    """:class:`Subject` objects carrying full-recording TMIFs."""
    tm = pmap(partial(_tmifs_one, grid=grid, sel=sel, bands=tuple(bands)), signals, jobs)
    return [Subject(s.id, s.group, s.age, t) for s, t in zip(signals, tm)]


def write_tmif_manifest(manifest: CohortManifest, subjects, out_dir) -> CohortManifest:
    """Write TMIF CSVs to ``out_dir/tmif`` and a manifest that references them."""
    out_dir = Path(out_dir)
    (out_dir / "tmif").mkdir(parents=True, exist_ok=True)
    by_id = {s.id: s for s in subjects}
    entries = []
    for e in manifest:
        s = by_id[e.id]
        stems = {}
        for band, tm in s.tmifs.items():
            stem = f"tmif/{e.id}_{band}.csv"
            tm.to_csv(out_dir / stem)
            stems[band] = stem

        def rel(stem):
            return os.path.relpath(manifest.resolve(stem), out_dir.resolve())

        entries.append(type(e)(e.id, e.group, e.age,
                               eeg=rel(e.eeg) if e.eeg else None,
                               envelope={b: rel(v) for b, v in e.envelope.items()},
                               band_eeg={b: rel(v) for b, v in e.band_eeg.items()},
                               tmif=stems))
    new = CohortManifest(entries, manifest.fs, list(manifest.channel_selection),
                         dict(manifest.adjacency), out_dir)
    new.save(out_dir / "manifest.json")
    return new


def read_subjects(manifest: CohortManifest, bands) -> list:
    """Subjects with TMIFs read back from the manifest's CSV files."""
    subjects = []
    for e in manifest:
        missing = [b for b in bands if b not in e.tmif]
        if missing:
            raise ManifestError(f"{e.id}: no TMIF for bands {missing}; run the tmif stage first")
        tm = {b: Tmif.from_csv(manifest.resolve(e.tmif[b]), manifest.fs, b) for b in bands}
        subjects.append(Subject(e.id, e.group, e.age, tm))
    return subjects

