"""Command-line driver exposing every analysis stage as a subcommand.

::

    python -m envtrack <stage> [--config cfg.json] [--set section.key=value ...]
                               [--seed N] [--jobs N] [--out DIR] [--run-id ID]

Each stage reads its own section of a single JSON config.  Precedence, from
highest: explicit flags, ``--set`` overrides, the config file (or the bundled
default when ``--config`` is omitted).  Keys are never filled in silently: a
key missing from the config is a usage error (exit code 2).

Outputs land in ``<out>/<run-id>/<stage>/`` next to a ``run.json`` log.  A
stage writes into a temporary sibling directory that is renamed into place
only on success, so a failed run leaves no partial output.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import platform
import shutil
import sys
from functools import partial
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from ._parallel import default_jobs, pmap
from .classifier import ablate_band, nested_loso_evaluate
from .clusterstats import build_adjacency, spatiotemporal_cluster_test, temporal_cluster_test
from .cohort import cohort_tmifs, load_cohort, read_subjects, write_tmif_manifest
from .core import (
    ALL_BANDS, CohortManifest, LagGrid, Recording, Tmif, load_layout, read_matrix,
    validate_recording, write_matrix,
)
from .dsp import band_envelopes, preprocess_eeg, read_wav
from .gcmi import mean_mi, tmif_multivariate, tmif_single_channel
from .nullperm import significance_level
from .synth import SynthSpec, generate_cohort
from .timecourse import (
    DurationGrid, band_correlation_matrix, between_subject_stability,
    classification_vs_duration, duration_tmifs, split_half_means, split_half_reliability,
    within_subject_stability, write_matrix_csv,
)

STAGES = ("envelope", "preprocess", "tmif", "null", "cluster", "classify", "duration",
          "reliability", "bandcorr", "synth", "report")
SIGNAL_SOURCES = ("preprocess", "synth")


class ConfigError(Exception):
    """Invalid or incomplete configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def default_config() -> dict:
    text = resources.files("envtrack.data").joinpath("default_config.json").read_text("utf-8")
    return json.loads(text)


def load_config(path) -> dict:
    if path is None:
        return default_config()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def apply_overrides(cfg: dict, assignments) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in assignments or ():
        key, sep, raw = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        *path, last = key.split(".")
        node = cfg
        for part in path:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part!r} is not a section")
        node[last] = value
    return cfg


class Section:
    """Read-only view of one config section that names missing keys."""

    def __init__(self, cfg: dict, name: str):
        if name not in cfg or not isinstance(cfg[name], dict):
            raise ConfigError(f"missing config section '{name}'")
        self.name = name
        self.data = cfg[name]

    def __getitem__(self, key):
        try:
            return self.data[key]
        except KeyError:
            raise ConfigError(f"missing config key '{self.name}.{key}'") from None

    def get(self, key, default=None):
        return self.data.get(key, default)


# ---------------------------------------------------------------------------
# Run directory bookkeeping
# ---------------------------------------------------------------------------


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hashes(root: Path, exclude=("run.json",)) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            out[p.relative_to(root).as_posix()] = sha256(p)
    return out


def manifest_inputs(manifest: CohortManifest, manifest_path: Path) -> dict:
    files = [manifest_path]
    for stem in manifest.referenced_stems():
        p = manifest.resolve(stem)
        files += [p.with_name(p.name + ".f32"), p.with_name(p.name + ".json")]
    for e in manifest:
        files += [manifest.resolve(s) for s in e.tmif.values()]
    return {str(Path(f).resolve()): sha256(f) for f in files if Path(f).exists()}


class Run:
    def __init__(self, out_dir, run_id: str, stage: str):
        self.root = Path(out_dir) / str(run_id)
        self.stage = stage
        self.final = self.root / stage
        self.tmp = self.root / f".{stage}.partial"
        self.inputs: dict = {}

    def open(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir()
        return self.tmp

    def abort(self) -> None:
        if self.tmp.exists():
            shutil.rmtree(self.tmp)

    def commit(self, log: dict) -> None:
        log = dict(log, inputs=self.inputs, outputs=tree_hashes(self.tmp))
        (self.tmp / "run.json").write_text(json.dumps(log, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)

    def upstream(self, stage: str) -> Path:
        return self.root / stage / "manifest.json"


def resolve_manifest(sec: Section, run: Run, sources) -> Path:
    value = sec["manifest"]
    if value != "auto":
        return Path(value)
    for stage in sources:
        p = run.upstream(stage)
        if p.exists():
            return p
    raise ConfigError(f"'{sec.name}.manifest' is 'auto' but no upstream manifest exists in "
                      f"{run.root} (looked for stages {list(sources)})")


def open_manifest(sec: Section, run: Run, sources) -> CohortManifest:
    path = resolve_manifest(sec, run, sources)
    manifest = CohortManifest.load(path)
    run.inputs.update(manifest_inputs(manifest, path))
    return manifest


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _grid(sec: Section, fs: float) -> LagGrid:
    return LagGrid(fs, float(sec["t_min_ms"]), float(sec["t_max_ms"]))


def _selection(manifest: CohortManifest):
    return list(manifest.channel_selection) or None


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_synth(cfg, run: Run, out: Path, jobs: int) -> dict:
    sec = Section(cfg, "synth")
    fields = ("n_controls", "n_patients", "fs", "duration_min", "n_channels", "trf",
              "group_effect", "snr_db", "subject_gain_sd", "latency_jitter_ms", "age_range",
              "seed")
    spec = SynthSpec.from_dict({k: sec[k] for k in fields})
    manifest = generate_cohort(spec, out, jobs)
    return {"seed": spec.seed, "n_subjects": len(manifest)}


def stage_envelope(cfg, run: Run, out: Path, jobs: int) -> dict:
    sec = Section(cfg, "envelope")
    bands = tuple(sec["bands"])
    index = {}
    for path in sec["audio"]:
        path = Path(path)
        audio = read_wav(path) if path.suffix.lower() == ".wav" else read_matrix(path)
        if audio.kind != "audio":
            raise ValueError(f"{path}: not an audio recording")
        run.inputs[str(path.resolve())] = sha256(path)
        envs = band_envelopes(audio, bands)
        stem = path.name.split(".")[0]
        index[stem] = {}
        for b in envs.bands:
            write_matrix(Recording(envs[b], envs.fs, (f"envelope_{b}",), "audio"),
                         out / f"{stem}_{b}")
            index[stem][b] = f"{stem}_{b}"
    write_json(out / "envelopes.json", index)
    return {"n_inputs": len(index)}


def _preprocess_one(entry, manifest, bands, out):
    rec = read_matrix(manifest.resolve(entry.eeg))
    report = validate_recording(rec).as_dict()
    stems = {}
    for b, r in preprocess_eeg(rec, bands, manifest.fs).items():
        stem = f"band_eeg/{entry.id}_{b}"
        write_matrix(r, out / stem)
        stems[b] = stem
    return stems, report


def stage_preprocess(cfg, run: Run, out: Path, jobs: int) -> dict:
    sec = Section(cfg, "preprocess")
    bands = tuple(sec["bands"])
    manifest = open_manifest(sec, run, ("synth",))
    (out / "band_eeg").mkdir()
    entries = [e for e in manifest if e.eeg]
    if len(entries) != len(manifest):
        raise ValueError("every subject needs raw EEG for preprocessing")
    results = pmap(partial(_preprocess_one, manifest=manifest, bands=bands, out=out),
                   entries, jobs)
    new_entries, validation = [], {}
    def rel(stem):
        return os.path.relpath(manifest.resolve(stem), out.resolve())

    for e, (stems, report) in zip(entries, results):
        new_entries.append(type(e)(e.id, e.group, e.age, eeg=rel(e.eeg),
                                   envelope={b: rel(v) for b, v in e.envelope.items()},
                                   band_eeg=stems))
        validation[e.id] = report
    CohortManifest(new_entries, manifest.fs, list(manifest.channel_selection),
                   dict(manifest.adjacency), out).save(out / "manifest.json")
    write_json(out / "validation.json", validation)
    return {"bands": list(bands)}


def _channel_tmifs(sig, grid, bands):
    return {f"{b}_channels": tmif_single_channel(sig.band_eeg[b], sig.envelopes[b], grid, band=b)
            for b in bands}


def stage_tmif(cfg, run: Run, out: Path, jobs: int) -> dict:
    sec = Section(cfg, "tmif")
    bands = tuple(sec["bands"])
    single = bool(sec["single_channel"])
    manifest = open_manifest(sec, run, SIGNAL_SOURCES)
    grid = _grid(sec, manifest.fs)
    signals = load_cohort(manifest, bands, jobs)
    subjects = cohort_tmifs(signals, grid, _selection(manifest), bands, jobs)
    if single:
        extra = pmap(partial(_channel_tmifs, grid=grid, bands=bands), signals, jobs)
        subjects = [type(s)(s.id, s.group, s.age, {**s.tmifs, **x})
                    for s, x in zip(subjects, extra)]
    write_tmif_manifest(manifest, subjects, out)
    with open(out / "mean_mi.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,group,band,mean_mi\n")
        for s in subjects:
            for b in bands:
                fh.write(f"{s.id},{s.group},{b},{mean_mi(s.tmifs[b])!r}\n")
    return {"bands": list(bands), "n_lags": len(grid)}


def _null_one(item, grid, sel, bands, n_perm, seed, percentile):
    index, sig = item
    rows = []
    for b in bands:
        null = significance_level(sig.band_eeg[b], sig.envelopes[b], grid, sel, b, n_perm,
                                  (seed, index), percentile)
        peak = float(np.max(tmif_multivariate(sig.band_eeg[b], sig.envelopes[b], grid, sel).values))
        rows.append((b, null, peak))
    return rows


def stage_null(cfg, run: Run, out: Path, jobs: int) -> dict:
    sec = Section(cfg, "null")
    bands = tuple(sec["bands"])
    n_perm, seed, pct = int(sec["n_perm"]), int(sec["seed"]), float(sec["percentile"])
    manifest = open_manifest(sec, run, SIGNAL_SOURCES)
    grid = _grid(sec, manifest.fs)
    signals = load_cohort(manifest, bands, jobs)
    work = partial(_null_one, grid=grid, sel=_selection(manifest), bands=bands,
                   n_perm=n_perm, seed=seed, percentile=pct)
    results = pmap(work, list(enumerate(signals)), jobs)
    with open(out / "levels.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,group,band,level,tmif_max,exceeds\n")
        for sig, rows in zip(signals, results):
            for b, null, peak in rows:
                null.to_csv(out / f"{sig.id}_{b}.csv")
                level = null.significance_level
                fh.write(f"{sig.id},{sig.group},{b},{level!r},{peak!r},{int(peak > level)}\n")
    return {"seed": seed, "n_perm": n_perm}


def _groups(subjects):
    ctrl = [s for s in subjects if s.group == "control"]
    aph = [s for s in subjects if s.group == "aphasia"]
    return ctrl, aph


def stage_cluster(cfg, run: Run, out: Path, jobs: int) -> dict:
    sec = Section(cfg, "cluster")
    bands = tuple(sec["bands"])
    n_perm, alpha, seed = int(sec["n_perm"]), float(sec["cluster_alpha"]), int(sec["seed"])
    manifest = open_manifest(sec, run, ("tmif",))
    subjects = read_subjects(manifest, bands)
    ctrl, aph = _groups(subjects)
    summary = {}
    for b in bands:
        res = temporal_cluster_test([s.tmifs[b] for s in ctrl], [s.tmifs[b] for s in aph],
                                    n_perm, alpha, seed)
        res.to_json(out / f"{b}_temporal.json")
        res.to_csv(out / f"{b}_temporal_t.csv")
        summary[b] = {"temporal": [c["p_value"] for c in res.as_dict()["clusters"]]}
    if sec["spatiotemporal"]:
        layout = load_layout(manifest.adjacency.get("layout", "biosemi64"))
        k = int(sec["adjacency_k"])
        for b in bands:
            key = f"{b}_channels"
            tm = []
            for e in manifest:
                if key not in e.tmif:
                    raise ValueError(f"{e.id}: no single-channel TMIF for {b}; "
                                     "rerun tmif with single_channel=true")
                tm.append((e.group, Tmif.from_csv(manifest.resolve(e.tmif[key]), manifest.fs, b)))
            channels = tm[0][1].channels
            missing = [c for c in channels if c not in layout]
            if missing:
                raise ValueError(f"channels missing from layout: {missing}")
            adj = build_adjacency({c: layout[c] for c in channels}, k)
            res = spatiotemporal_cluster_test([t for g, t in tm if g == "control"],
                                              [t for g, t in tm if g == "aphasia"],
                                              adj, channels, n_perm, alpha, seed)
            res.to_json(out / f"{b}_spatiotemporal.json")
            res.to_csv(out / f"{b}_spatiotemporal_t.csv")
            summary[b]["spatiotemporal"] = [c["p_value"] for c in res.as_dict()["clusters"]]
    write_json(out / "summary.json", summary)
    return {"seed": seed, "n_perm": n_perm}


def _classify_kw(sec: Section, jobs: int) -> dict:
    return {"C_grid": tuple(float(c) for c in sec["C_grid"]),
            "prune_grid": tuple(float(p) for p in sec["prune_grid_ms"]),
            "seed": int(sec["seed"]), "n_inner": int(sec["n_inner"]),
            "with_age": bool(sec["with_age"]), "jobs": jobs}


def stage_classify(cfg, run: Run, out: Path, jobs: int) -> dict:
    sec = Section(cfg, "classify")
    bands = tuple(sec["bands"])
    kw = _classify_kw(sec, jobs)
    ablate = bool(sec["ablate"])
    manifest = open_manifest(sec, run, ("tmif",))
    subjects = read_subjects(manifest, bands)
    report = nested_loso_evaluate(subjects, bands=bands, **kw)
    report.to_json(out / "report.json")
    report.roc_to_csv(out / "roc.csv")
    if ablate:
        drops = [ablate_band(subjects, b, bands, full=report, **kw) for b in bands]
        write_json(out / "ablation.json", drops)
    return {"seed": kw["seed"]}


def stage_duration(cfg, run: Run, out: Path, jobs: int) -> dict:
    sec = Section(cfg, "duration")
    bands = tuple(sec["bands"])
    grid_min = DurationGrid(tuple(sec["minutes"]))
    window = sec["within_window_ms"]
    do_classify = bool(sec["classify"])
    manifest = open_manifest(sec, run, SIGNAL_SOURCES)
    grid = _grid(sec, manifest.fs)
    signals = load_cohort(manifest, bands, jobs)
    dt = duration_tmifs(signals, grid_min, grid, _selection(manifest), bands, jobs)
    within = within_subject_stability(dt, window_ms=None if window is None else tuple(window))
    between = between_subject_stability(dt)
    within.to_csv(out / "within_subject.csv")
    between.to_csv(out / "between_subject.csv")
    summary = {"minutes": list(grid_min.minutes), "within_subject_knee": within.knee,
               "between_subject_knee": between.knee}
    if do_classify:
        ccfg = Section(cfg, "classify")
        kw = _classify_kw(ccfg, jobs)
        kw["seed"] = int(sec["seed"])
        curve = classification_vs_duration(dt, tuple(ccfg["bands"]), **kw)
        curve.to_csv(out / "classification.csv")
        summary["classification_knee"] = curve.knee
    write_json(out / "duration.json", summary)
    return {"seed": int(sec["seed"])}


def stage_reliability(cfg, run: Run, out: Path, jobs: int) -> dict:
    sec = Section(cfg, "reliability")
    bands = tuple(sec["bands"])
    manifest = open_manifest(sec, run, SIGNAL_SOURCES)
    grid = _grid(sec, manifest.fs)
    signals = load_cohort(manifest, bands, jobs)
    halves = split_half_means(signals, grid, _selection(manifest), bands, jobs=jobs)
    table = split_half_reliability([s.group for s in signals], halves, bands)
    table.to_csv(out / "reliability.csv")
    return {"bands": list(bands)}


def stage_bandcorr(cfg, run: Run, out: Path, jobs: int) -> dict:
    sec = Section(cfg, "bandcorr")
    groups = list(sec["groups"])
    manifest = open_manifest(sec, run, ("tmif",))
    subjects = read_subjects(manifest, ALL_BANDS)
    for g in groups:
        members = [s for s in subjects if s.group == g]
        table = {b: [mean_mi(s.tmifs[b]) for s in members] for b in ALL_BANDS}
        write_matrix_csv(out / f"bandcorr_{g}.csv", ALL_BANDS, band_correlation_matrix(table))
    return {"groups": groups}


def stage_report(cfg, run: Run, out: Path, jobs: int) -> dict:
    Section(cfg, "report")
    summary = {"stages": {}}
    for stage in STAGES:
        d = run.root / stage
        if stage == "report" or not (d / "run.json").exists():
            continue
        log = json.loads((d / "run.json").read_text(encoding="utf-8"))
        entry = {"outputs": log["outputs"]}
        if stage == "classify":
            rep = json.loads((d / "report.json").read_text(encoding="utf-8"))
            entry["metrics"] = {k: rep[k] for k in
                                ("accuracy", "f1", "sensitivity", "specificity", "auc")}
        if stage == "cluster":
            entry["clusters"] = json.loads((d / "summary.json").read_text(encoding="utf-8"))
        if stage == "duration":
            entry["knees"] = json.loads((d / "duration.json").read_text(encoding="utf-8"))
        summary["stages"][stage] = entry
    if not summary["stages"]:
        raise ValueError(f"no completed stages found in {run.root}")
    write_json(out / "report.json", summary)
    return {}


RUNNERS = {name: globals()[f"stage_{name}"] for name in STAGES}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="envtrack", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"envtrack {__version__}")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="STAGE")
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="JSON config (default: bundled defaults)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--seed", type=int, help="override this stage's seed")
        p.add_argument("--jobs", type=int, help="worker processes (default: available cores)")
        p.add_argument("--out", help="output root (overrides run.out_dir)")
        p.add_argument("--run-id", help="run identifier (overrides run.run_id)")
    sub.add_parser("show-config", help="print the bundled default config")
    return parser


def effective_config(args) -> dict:
    cfg = apply_overrides(load_config(args.config), args.set)
    cfg.setdefault("run", {})
    if not isinstance(cfg["run"], dict):
        raise ConfigError("config section 'run' must be an object")
    if args.out is not None:
        cfg["run"]["out_dir"] = args.out
    if args.run_id is not None:
        cfg["run"]["run_id"] = args.run_id
    if args.jobs is not None:
        cfg["run"]["jobs"] = args.jobs
    if args.seed is not None:
        Section(cfg, args.stage)
        cfg[args.stage]["seed"] = args.seed
    return cfg


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.stage == "show-config":
        print(json.dumps(default_config(), indent=2))
        return 0
    run = None
    try:
        cfg = effective_config(args)
        rsec = Section(cfg, "run")
        jobs = rsec["jobs"]
        jobs = default_jobs() if jobs is None else int(jobs)
        if jobs < 1:
            raise ConfigError("run.jobs must be at least 1")
        Section(cfg, args.stage)
        run = Run(rsec["out_dir"], rsec["run_id"], args.stage)
        out = run.open()
        info = RUNNERS[args.stage](cfg, run, out, jobs)
        run.commit({
            "stage": args.stage, "argv": argv, "config": cfg, "jobs": jobs, "info": info,
            "versions": {"envtrack": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
        })
    except ConfigError as exc:
        if run is not None:
            run.abort()
        print(f"envtrack: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # every other failure is a runtime error
        if run is not None:
            run.abort()
        print(f"envtrack {args.stage}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"envtrack {args.stage}: wrote {run.final}")
    return 0
