"""Surrogate envelopes and per-subject significance levels for TMIFs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import LagGrid
from .gcmi import LaggedGaussianMI, _as_matrix, _check_overlap, _env_vector, copula_transform

MIN_PERMUTATIONS = 20


def spectrum_matched_noise(env, seed) -> np.ndarray:
    """Random-phase surrogate with exactly the magnitude spectrum of ``env``.

    DC and (for even lengths) Nyquist bins keep their original real values;
    every other bin gets an independent uniform phase.
    """
    env = np.asarray(env, dtype=float)
    if env.ndim != 1 or len(env) < 4:
        raise ValueError("need a 1-D signal of at least 4 samples")
    return _surrogates(env, [np.random.default_rng(seed)])[0]


def _surrogates(env: np.ndarray, rngs) -> np.ndarray:
    n = len(env)
    spec = np.fft.rfft(env)
    mag = np.abs(spec)
    n_free = (n - 1) // 2            # bins 1 .. n_free get random phases
    out = np.empty((len(rngs), len(spec)), dtype=complex)
    for i, rng in enumerate(rngs):
        phase = rng.uniform(0.0, 2.0 * np.pi, n_free)
        out[i, 0] = spec[0]
        out[i, 1:n_free + 1] = mag[1:n_free + 1] * np.exp(1j * phase)
        if n % 2 == 0:
            out[i, -1] = spec[-1]
    return np.fft.irfft(out, n, axis=1)


def permutation_rng(seed, index: int) -> np.random.Generator:
    """Independent stream for permutation ``index``; order-independent.

    ``seed`` is an int or a sequence of ints (e.g. ``(run_seed, subject)``).
    """
    base = [int(s) for s in np.atleast_1d(seed)]
    return np.random.default_rng(base + [int(index)])


@dataclass(frozen=True)
class NullDistribution:
    values: np.ndarray
    percentile: float = 95.0
    band: str | None = None
    statistic_kind: str = "max_over_lags"

    @property
    def n_permutations(self) -> int:
        return len(self.values)

    @property
    def significance_level(self) -> float:
        return order_statistic(self.values, self.percentile)

    def level(self, percentile: float) -> float:
        return order_statistic(self.values, percentile)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("permutation,value\n")
            for i, v in enumerate(self.values):
                fh.write(f"{i},{float(v)!r}\n")


def order_statistic(values, percentile: float) -> float:
    """Sorted value at 0-based index ``ceil(percentile/100 * n) - 1``."""
    v = np.sort(np.asarray(values, dtype=float))
    k = max(0, math.ceil(round(percentile / 100.0 * len(v), 9)) - 1)
    return float(v[k])


def null_statistics(eeg, env, grid: LagGrid, sel=None, n_perm: int = 1000, seed=0,
                    statistic: str = "max") -> np.ndarray:
    """Statistic of the multivariate TMIF for ``n_perm`` surrogate envelopes."""
    if n_perm < MIN_PERMUTATIONS:
        raise ValueError(f"need at least {MIN_PERMUTATIONS} permutations, got {n_perm}")
    x, names = _as_matrix(eeg, grid)
    if sel is not None:
        x = x[:, [names.index(s) for s in sel]]
    e = _env_vector(env)
    if len(e) != x.shape[0]:
        raise ValueError("EEG and envelope must have equal length")
    _check_overlap(len(e), grid)
    est = LaggedGaussianMI(copula_transform(x), grid.lags)
    reduce = {"max": np.max, "mean": np.mean}[statistic]
    stats = np.empty(n_perm)
    block = 50
    for start in range(0, n_perm, block):
        idx = range(start, min(n_perm, start + block))
        surr = _surrogates(e, [permutation_rng(seed, i) for i in idx])
        mi = est(copula_transform(surr, axis=1))
        stats[start:start + len(idx)] = reduce(mi, axis=1)
    return stats


def significance_level(eeg, env, grid: LagGrid, sel=None, band: str | None = None,
                       n_perm: int = 1000, seed=0,
                       percentile: float = 95.0) -> NullDistribution:
    """Null distribution of the lag-maximum of the multivariate TMIF.

    Each permutation replaces the envelope by a spectrum-matched surrogate
    and recomputes the TMIF against the real EEG.
    """
    values = null_statistics(eeg, env, grid, sel, n_perm, seed)
    return NullDistribution(values, percentile, band)


def exceeds_null(tmif_values, null: NullDistribution) -> bool:
    return float(np.max(tmif_values)) > null.significance_level

