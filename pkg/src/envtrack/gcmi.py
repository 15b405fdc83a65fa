"""Gaussian-copula mutual information and temporal MI functions (TMIFs).

The estimator is the closed-form MI of jointly Gaussian variables applied to
copula-normalised data::

    I(X;Y) = 1/(2 ln 2) * ln( |S_X| |S_Y| / |S_XY| )      [bits]

where ``S_*`` are sample covariance matrices.  Copula normalisation maps each
variable through its empirical CDF (rank / (n + 1), ties averaged) and the
inverse standard-normal CDF, so the estimate is invariant to any strictly
increasing transform of each variable.

A TMIF pairs ``env(t)`` with ``eeg(t + lag)``: positive lags mean the brain
response follows the stimulus.  Only samples where both shifted series are
defined enter the covariance (no wrap-around).
"""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from scipy import fft as sp_fft
from scipy.special import ndtri, psi
from scipy.stats import rankdata

from .core import LagGrid, Recording, Tmif

LN2 = np.log(2.0)
SINGULAR_PIVOT = 1e-12


class SingularCovarianceError(np.linalg.LinAlgError):
    """Joint covariance is (numerically) singular; MI is unbounded."""


# ---------------------------------------------------------------------------
# Copula transform and plain Gaussian MI
# ---------------------------------------------------------------------------


def copula_transform(x, axis: int = 0) -> np.ndarray:
    """Map each series along ``axis`` to standard-normal marginals by rank."""
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    if n < 3:
        raise ValueError("copula transform needs at least 3 samples")
    lo = np.min(x, axis=axis)
    hi = np.max(x, axis=axis)
    if np.any(lo == hi):
        raise ValueError("copula transform of a constant series (degenerate ranks)")
    r = rankdata(x, method="average", axis=axis)
    return ndtri(r / (n + 1.0))


def _bias_terms(n: int, dim: int) -> np.ndarray:
    """Per-dimension analytic bias of the Gaussian entropy (nats), cumulative."""
    terms = psi((n - np.arange(1, dim + 1)) / 2.0) / 2.0
    dterm = (LN2 - np.log(n - 1.0)) / 2.0
    return np.cumsum(terms + dterm)


def _half_logdet(c: np.ndarray) -> np.ndarray:
    """Half log-determinant via Cholesky, raising on tiny relative pivots."""
    try:
        chol = np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("covariance matrix is not positive definite") from None
    d = np.diagonal(chol, axis1=-2, axis2=-1)
    diag = np.diagonal(c, axis1=-2, axis2=-1)
    if np.any(d * d <= SINGULAR_PIVOT * diag):
        raise SingularCovarianceError("covariance matrix is numerically singular")
    return np.sum(np.log(d), axis=-1)


def gaussian_mi(X, Y, biascorrect: bool = False, ridge: float | None = None) -> float:
    """MI in bits between the columns of ``X`` (n x p) and ``Y`` (n x q).

    Inputs are assumed to be copula-normalised already.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    Y = Y[:, None] if Y.ndim == 1 else Y
    n, p = X.shape
    q = Y.shape[1]
    if Y.shape[0] != n:
        raise ValueError("X and Y must have the same number of samples")
    if n <= p + q + 2:
        raise ValueError(f"need more than p+q+2 = {p + q + 2} samples, got {n}")
    Z = np.hstack([X, Y])
    Z = Z - Z.mean(axis=0)
    C = Z.T @ Z / (n - 1.0)
    if ridge:
        C = C + ridge * np.eye(p + q)
    hxy = _half_logdet(C)
    hx = _half_logdet(C[:p, :p])
    hy = _half_logdet(C[p:, p:])
    if biascorrect:
        b = _bias_terms(n, p + q)
        hx, hy, hxy = hx - b[p - 1], hy - b[q - 1], hxy - b[p + q - 1]
    return float((hx + hy - hxy) / LN2)


def gcmi(x, y, **kw) -> float:
    """Copula-normalise both variables and return their MI in bits."""
    return gaussian_mi(copula_transform(x), copula_transform(y), **kw)


# ---------------------------------------------------------------------------
# Lagged covariances
# ---------------------------------------------------------------------------


def _segments(n: int, lags: np.ndarray):
    """Envelope segment [start, stop) per lag; the EEG segment is shifted by lag."""
    start = np.maximum(0, -lags)
    stop = np.minimum(n, n - lags)
    return start, stop


class _EdgeSums:
    """First and second moments of any segment that trims at most K samples per edge."""

    def __init__(self, x: np.ndarray, k: int):
        # x: (..., n, p)
        self.n = x.shape[-2]
        p = x.shape[-1]
        zero1 = np.zeros(x.shape[:-2] + (1, p))
        zero2 = np.zeros(x.shape[:-2] + (1, p, p))
        self.total1 = x.sum(axis=-2)
        self.total2 = np.swapaxes(x, -1, -2) @ x
        head = x[..., :k, :]
        tail = x[..., ::-1, :][..., :k, :]
        self.head1 = np.concatenate([zero1, np.cumsum(head, axis=-2)], axis=-2)
        self.tail1 = np.concatenate([zero1, np.cumsum(tail, axis=-2)], axis=-2)
        self.head2 = np.concatenate(
            [zero2, np.cumsum(head[..., :, :, None] * head[..., :, None, :], axis=-3)], axis=-3)
        self.tail2 = np.concatenate(
            [zero2, np.cumsum(tail[..., :, :, None] * tail[..., :, None, :], axis=-3)], axis=-3)

    def sums(self, start: np.ndarray, stop: np.ndarray):
        cut_tail = self.n - stop
        s1 = self.total1[..., None, :] - self.head1[..., start, :] - self.tail1[..., cut_tail, :]
        s2 = (self.total2[..., None, :, :] - self.head2[..., start, :, :]
              - self.tail2[..., cut_tail, :, :])
        return s1, s2


class LaggedGaussianMI:
    """MI between fixed (copula-normalised) EEG channels and one or many envelopes.

    The EEG-side statistics are computed once; each envelope then costs one
    FFT cross-correlation with the channels plus O(lags * p^2) work.  This is
    what makes surrogate null distributions affordable.
    """

    def __init__(self, eeg_cop: np.ndarray, lags, biascorrect: bool = False,
                 ridge: float | None = None):
        x = np.asarray(eeg_cop, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        self.x = x
        self.n, self.p = x.shape
        self.lags = np.asarray(lags, dtype=np.int64)
        self.kmax = int(np.max(np.abs(self.lags)))
        self.biascorrect = biascorrect
        self.ridge = ridge
        self.env_start, self.env_stop = _segments(self.n, self.lags)
        self.m = (self.env_stop - self.env_start).astype(float)
        if self.m.min() <= self.p + 3:
            raise ValueError("lag window leaves too few overlapping samples")
        self.nfft = sp_fft.next_fast_len(self.n + self.kmax + 1, real=True)
        self.x_fft = sp_fft.rfft(x, self.nfft, axis=0)

        eeg_sums = _EdgeSums(x, self.kmax + 1)
        sx, sxx = eeg_sums.sums(self.env_start + self.lags, self.env_stop + self.lags)
        m = self.m[:, None, None]
        cxx = (sxx - sx[:, :, None] * sx[:, None, :] / m) / (m - 1.0)
        if ridge:
            cxx = cxx + ridge * np.eye(self.p)
        self.sx = sx                                   # (L, p)
        self.half_logdet_x = _half_logdet(cxx)         # (L,)
        self.cxx_inv = np.linalg.inv(cxx)              # (L, p, p)

    def __call__(self, env_cop) -> np.ndarray:
        """MI per lag; ``env_cop`` is (n,) or (B, n), result (L,) or (B, L)."""
        e = np.asarray(env_cop, dtype=float)
        single = e.ndim == 1
        e = np.atleast_2d(e)
        if e.shape[1] != self.n:
            raise ValueError("envelope and EEG lengths differ")
        b = e.shape[0]
        # chunk the batch so the cross-spectrum stays modest in memory
        chunk = max(1, int(2e7 // (self.nfft * max(self.p, 1))))
        out = np.empty((b, len(self.lags)))
        for i in range(0, b, chunk):
            out[i:i + chunk] = self._mi(e[i:i + chunk])
        return out[0] if single else out

    def _mi(self, e: np.ndarray) -> np.ndarray:
        b = e.shape[0]
        env_sums = _EdgeSums(e[:, :, None], self.kmax + 1)
        se, see = env_sums.sums(self.env_start, self.env_stop)
        se, see = se[..., 0], see[..., 0, 0]                  # (B, L)
        e_fft = sp_fft.rfft(e, self.nfft, axis=1)
        xcorr = sp_fft.irfft(np.conj(e_fft)[:, :, None] * self.x_fft[None], self.nfft, axis=1)
        sxy = xcorr[:, self.lags % self.nfft, :]              # (B, L, p)
        m = self.m
        cyy = (see - se * se / m) / (m - 1.0)
        cxy = (sxy - self.sx[None] * (se / m)[:, :, None]) / (m - 1.0)[:, None]
        if self.ridge:
            cyy = cyy + self.ridge
        # quadratic form of an SPD matrix; clip round-off below zero
        explained = np.maximum(np.einsum("blp,lpq,blq->bl", cxy, self.cxx_inv, cxy), 0.0)
        schur = cyy - explained
        if np.any(cyy <= 0) or np.any(schur <= SINGULAR_PIVOT * cyy):
            raise SingularCovarianceError("joint EEG/envelope covariance is singular")
        hx = self.half_logdet_x[None]
        hy = 0.5 * np.log(cyy)
        hxy = hx + 0.5 * np.log(schur)
        if self.biascorrect:
            corr = np.array([_bias_terms(int(mi), self.p + 1) for mi in self.m])
            hx = hx - corr[:, self.p - 1]
            hy = hy - corr[:, 0]
            hxy = hxy - corr[:, self.p]
        return (hx + hy - hxy) / LN2


# ---------------------------------------------------------------------------
# TMIFs
# ---------------------------------------------------------------------------


def _as_matrix(eeg, grid: LagGrid):
    if isinstance(eeg, Recording):
        if eeg.fs != grid.fs:
            raise ValueError(f"EEG at {eeg.fs} Hz but lag grid at {grid.fs} Hz")
        return eeg.samples, eeg.channel_names
    x = np.asarray(eeg, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    return x, tuple(f"ch{i}" for i in range(x.shape[1]))


def _check_overlap(n: int, grid: LagGrid):
    lags = grid.lags
    overlap = n - int(np.max(np.abs(lags)))
    if overlap < 10 * len(lags):
        raise ValueError(f"only {overlap} overlapping samples for {len(lags)} lags; "
                         f"need at least {10 * len(lags)}")


def _env_vector(env) -> np.ndarray:
    if isinstance(env, Recording):
        return env.samples[:, 0]
    return np.asarray(env, dtype=float).ravel()


def tmif_single_channel(eeg, env, grid: LagGrid, band: str | None = None,
                        biascorrect: bool = False, ridge: float | None = None) -> Tmif:
    """Per-channel TMIF, values shaped (n_channels, n_lags)."""
    x, names = _as_matrix(eeg, grid)
    e = _env_vector(env)
    if len(e) != x.shape[0]:
        raise ValueError("EEG and envelope must have equal length")
    _check_overlap(len(e), grid)
    xc = copula_transform(x)
    ec = copula_transform(e)
    rows = [LaggedGaussianMI(xc[:, [c]], grid.lags, biascorrect, ridge)(ec)
            for c in range(xc.shape[1])]
    return Tmif(grid, np.array(rows), band, tuple(names))


def tmif_multivariate(eeg, env, grid: LagGrid, sel: Sequence[str] | None = None,
                      band: str | None = None, biascorrect: bool = False,
                      ridge: float | None = None) -> Tmif:
    """TMIF of the selected channels taken jointly against the envelope."""
    x, names = _as_matrix(eeg, grid)
    if sel is not None:
        missing = [s for s in sel if s not in names]
        if missing:
            raise KeyError(f"selected channels not in recording: {missing}")
        if not sel:
            raise ValueError("channel selection is empty")
        x = x[:, [names.index(s) for s in sel]]
    e = _env_vector(env)
    if len(e) != x.shape[0]:
        raise ValueError("EEG and envelope must have equal length")
    _check_overlap(len(e), grid)
    est = LaggedGaussianMI(copula_transform(x), grid.lags, biascorrect, ridge)
    return Tmif(grid, est(copula_transform(e)), band)


def window_mask(grid: LagGrid, window_ms=(0.0, 400.0)) -> np.ndarray:
    lo, hi = window_ms
    t = grid.times_ms
    eps = 1e-9
    if lo > hi or lo < t[0] - eps or hi > t[-1] + eps:
        raise ValueError(f"window {window_ms} ms is outside the lag grid "
                         f"[{t[0]:g}, {t[-1]:g}] ms")
    mask = (t >= lo - eps) & (t <= hi + eps)
    if not mask.any():
        raise ValueError(f"window {window_ms} ms contains no lags")
    return mask


def mean_mi(tmif: Tmif, window_ms=(0.0, 400.0)):
    """Mean MI over lags whose latency lies in ``window_ms`` (inclusive)."""
    mask = window_mask(tmif.grid, window_ms)
    v = tmif.values[..., mask].mean(axis=-1)
    return float(v) if np.ndim(v) == 0 else v
