"""Cluster-based permutation tests for two-group TMIF comparisons.

Sample statistic is Welch's t.  Samples whose two-tailed p falls below
``cluster_alpha`` are grouped into clusters (positive and negative t
separately); a cluster's mass is the sum of its t values.  The null
distribution is the largest absolute cluster mass over random relabelings of
the pooled subjects, and a cluster's p-value is::

    (1 + #{null >= |mass|}) / (1 + n_perm)          Monte Carlo
    #{relabelings with null >= |mass|} / n_total    exhaustive

Exhaustive enumeration is used automatically when ``n_perm`` reaches the
number of distinct relabelings.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist
from scipy.stats import t as t_dist

from .core import Tmif

TIE_RTOL = 1e-10


# ---------------------------------------------------------------------------
# Channel adjacency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Adjacency:
    names: tuple
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        edges = frozenset(tuple(sorted(e)) for e in self.edges)
        for a, b in edges:
            if a == b:
                raise ValueError(f"self edge on {a!r}")
            if a not in names or b not in names:
                raise ValueError(f"edge ({a}, {b}) references an unknown channel")
        object.__setattr__(self, "edges", edges)

    def __contains__(self, pair) -> bool:
        a, b = pair
        return tuple(sorted((a, b))) in self.edges

    def neighbors(self, name: str) -> set:
        return {b if a == name else a for a, b in self.edges if name in (a, b)}

    def matrix(self, channels) -> sparse.csr_matrix:
        """Symmetric boolean adjacency in the order of ``channels``."""
        missing = [c for c in channels if c not in self.names]
        if missing:
            raise ValueError(f"adjacency does not cover channels {missing}")
        pos = {c: i for i, c in enumerate(channels)}
        rows, cols = [], []
        for a, b in self.edges:
            if a in pos and b in pos:
                rows += [pos[a], pos[b]]
                cols += [pos[b], pos[a]]
        n = len(channels)
        return sparse.csr_matrix((np.ones(len(rows), bool), (rows, cols)), shape=(n, n))

    @classmethod
    def full(cls, names) -> "Adjacency":
        return cls(tuple(names), frozenset(itertools.combinations(names, 2)))

    @classmethod
    def empty(cls, names) -> "Adjacency":
        return cls(tuple(names))

    def as_dict(self) -> dict:
        return {"channels": list(self.names), "edges": sorted(list(e) for e in self.edges)}


def build_adjacency(layout: dict, k: int = 4, mode: str = "mutual",
                    radius: float | None = None) -> Adjacency:
    """Channel graph from 2-D positions.

    Neighbours of a channel are the points that fit, ties included, within its
    ``k`` nearest; points tied at the k-th distance that would overflow ``k``
    are left out.  ``mode="mutual"`` keeps an edge only when each end lists
    the other, ``"union"`` when either does.  With ``radius`` set, every pair
    closer than ``radius`` is connected instead.
    """
    names = list(layout)
    pts = np.array([layout[n] for n in names], dtype=float)
    if len(names) < 2:
        return Adjacency(tuple(names))
    d = cdist(pts, pts)
    np.fill_diagonal(d, np.inf)
    if np.any(d == 0):
        raise ValueError("duplicate channel positions")
    if radius is not None:
        iu = np.argwhere(np.triu(d < radius, 1))
        return Adjacency(tuple(names), frozenset((names[i], names[j]) for i, j in iu))
    near = np.zeros_like(d, dtype=bool)
    for i in range(len(names)):
        # j is a neighbour when everything at least as close still fits in k
        at_most = (d[i][None, :] <= d[i][:, None]).sum(axis=1)
        near[i] = at_most <= k
        near[i, i] = False
    if mode == "mutual":
        sym = near & near.T
    elif mode == "union":
        sym = near | near.T
    else:
        raise ValueError(f"mode must be 'mutual' or 'union', got {mode!r}")
    iu = np.argwhere(np.triu(sym, 1))
    return Adjacency(tuple(names), frozenset((names[i], names[j]) for i, j in iu))


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cluster:
    members: tuple          # lag indices, or (channel index, lag index) pairs
    mass: float
    p_value: float

    @property
    def sign(self) -> int:
        return 1 if self.mass > 0 else -1


@dataclass
class ClusterResult:
    clusters: list
    t_values: np.ndarray
    null_distribution: np.ndarray
    n_permutations: int
    cluster_alpha: float
    exhaustive: bool
    times_ms: np.ndarray | None = None
    channels: tuple | None = None

    def significant(self, alpha: float = 0.05) -> list:
        return [c for c in self.clusters if c.p_value < alpha]

    def lag_span(self, cluster: Cluster) -> tuple:
        lags = [m if isinstance(m, (int, np.integer)) else m[1] for m in cluster.members]
        return min(lags), max(lags)

    def as_dict(self) -> dict:
        out = []
        for c in self.clusters:
            entry = {"mass": c.mass, "p_value": c.p_value,
                     "members": [list(m) if isinstance(m, tuple) else int(m) for m in c.members]}
            if self.times_ms is not None:
                lo, hi = self.lag_span(c)
                entry["t_start_ms"] = float(self.times_ms[lo])
                entry["t_stop_ms"] = float(self.times_ms[hi])
            if self.channels is not None:
                entry["channels"] = sorted({self.channels[m[0]] for m in c.members})
            out.append(entry)
        return {"n_permutations": self.n_permutations, "cluster_alpha": self.cluster_alpha,
                "exhaustive": self.exhaustive, "clusters": out}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.as_dict(), fh, indent=2)
            fh.write("\n")

    def to_csv(self, path) -> None:
        """t-values per lag (and channel) in plot-ready long format."""
        t = np.atleast_2d(self.t_values)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if self.channels is None:
                fh.write("lag_ms,t\n")
                for k, v in enumerate(t[0]):
                    fh.write(f"{self._time(k)!r},{float(v)!r}\n")
            else:
                fh.write("channel,lag_ms,t\n")
                for c, name in enumerate(self.channels):
                    for k, v in enumerate(t[c]):
                        fh.write(f"{name},{self._time(k)!r},{float(v)!r}\n")

    def _time(self, k: int) -> float:
        return float(self.times_ms[k]) if self.times_ms is not None else float(k)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def welch_t(a, b):
    """Welch t and Satterthwaite degrees of freedom along axis 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = a.shape[0], b.shape[0]
    va = a.var(axis=0, ddof=1) / na
    vb = b.var(axis=0, ddof=1) / nb
    return _welch(a.mean(axis=0) - b.mean(axis=0), va, vb, na, nb)


def _welch(diff, va, vb, na, nb):
    se2 = va + vb
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / np.sqrt(se2)
        df = se2 ** 2 / (va ** 2 / (na - 1) + vb ** 2 / (nb - 1))
    t = np.where(np.isnan(t), 0.0, t)
    df = np.where(np.isfinite(df), df, na + nb - 2.0)
    return t, df


def _relabeled_t(data: np.ndarray, member: np.ndarray):
    """Welch t for many relabelings at once.

    data: (n_subjects, n_features); member: (n_perm, n_subjects) boolean, True = group a.
    """
    m = member.astype(float)
    na = int(member[0].sum())
    nb = data.shape[0] - na
    sq = data * data
    sum_a = m @ data
    sum_b = data.sum(axis=0) - sum_a
    ssq_a = m @ sq
    ssq_b = sq.sum(axis=0) - ssq_a
    mean_a, mean_b = sum_a / na, sum_b / nb
    var_a = np.maximum(ssq_a - na * mean_a ** 2, 0.0) / (na - 1)
    var_b = np.maximum(ssq_b - nb * mean_b ** 2, 0.0) / (nb - 1)
    return _welch(mean_a - mean_b, var_a / na, var_b / nb, na, nb)


def _supra(t, df, alpha):
    p = 2.0 * t_dist.sf(np.abs(t), df)
    return p < alpha


def _max_mass_1d(t: np.ndarray, supra: np.ndarray) -> np.ndarray:
    """Largest |cluster mass| per row for lag-contiguous, sign-separated clusters."""
    n_rows, n_lags = t.shape
    best = np.zeros(n_rows)
    for sign in (1, -1):
        mask = supra & (np.sign(t) == sign)
        starts = mask & ~np.concatenate([np.zeros((n_rows, 1), bool), mask[:, :-1]], axis=1)
        run = np.cumsum(starts, axis=1)
        label = np.where(mask, run + (np.arange(n_rows) * (n_lags + 1))[:, None], 0)
        masses = np.bincount(label.ravel(), weights=np.where(mask, t, 0.0).ravel(),
                             minlength=n_rows * (n_lags + 1) + 1)
        masses[0] = 0.0
        best = np.maximum(best, np.abs(masses[1:n_rows * (n_lags + 1) + 1])
                          .reshape(n_rows, n_lags + 1).max(axis=1))
    return best


def _clusters_1d(t: np.ndarray, supra: np.ndarray) -> list:
    clusters = []
    for sign in (1, -1):
        mask = supra & (np.sign(t) == sign)
        k = 0
        while k < len(mask):
            if mask[k]:
                j = k
                while j + 1 < len(mask) and mask[j + 1]:
                    j += 1
                members = tuple(range(k, j + 1))
                clusters.append((members, float(t[k:j + 1].sum())))
                k = j + 1
            else:
                k += 1
    return clusters


def _graph(n_channels: int, n_lags: int, adjacency: sparse.csr_matrix | None):
    """Node (c, l) -> c * n_lags + l; edges along lags and between adjacent channels."""
    n = n_channels * n_lags
    idx = np.arange(n).reshape(n_channels, n_lags)
    rows = [idx[:, :-1].ravel()]
    cols = [idx[:, 1:].ravel()]
    if adjacency is not None and adjacency.nnz:
        a = sparse.triu(adjacency, 1).tocoo()
        for ci, cj in zip(a.row, a.col):
            rows.append(idx[ci])
            cols.append(idx[cj])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    g = sparse.csr_matrix((np.ones(len(r), bool), (r, c)), shape=(n, n))
    return (g + g.T).tocsr()


def _clusters_graph(t: np.ndarray, supra: np.ndarray, graph) -> list:
    flat_t = t.ravel()
    clusters = []
    for sign in (1, -1):
        nodes = np.flatnonzero(supra.ravel() & (np.sign(flat_t) == sign))
        if not len(nodes):
            continue
        sub = graph[nodes][:, nodes]
        _, labels = connected_components(sub, directed=False)
        masses = np.bincount(labels, weights=flat_t[nodes])
        for lab, mass in enumerate(masses):
            clusters.append((nodes[labels == lab], float(mass)))
    return clusters


def _relabelings(n: int, na: int, n_perm: int, seed: int, exhaustive: bool | None):
    n_total = math.comb(n, na)
    if exhaustive is None:
        exhaustive = n_perm >= n_total
    if exhaustive:
        member = np.zeros((n_total, n), bool)
        for i, combo in enumerate(itertools.combinations(range(n), na)):
            member[i, list(combo)] = True
        return member, True
    member = np.zeros((n_perm, n), bool)
    for i in range(n_perm):
        perm = np.random.default_rng([int(seed), i]).permutation(n)
        member[i, perm[:na]] = True
    return member, False


def _p_values(masses, null, exhaustive):
    out = []
    for m in masses:
        hits = int(np.sum(null >= abs(m) * (1.0 - TIE_RTOL)))
        if exhaustive:
            out.append(hits / len(null))
        else:
            out.append((1 + hits) / (1 + len(null)))
    return out


def _canonical(a: np.ndarray, b: np.ndarray) -> bool:
    """True when (b, a) is the canonical order, so results are swap-invariant."""
    if a.shape[0] != b.shape[0]:
        return a.shape[0] < b.shape[0]
    return a.tobytes() > b.tobytes()


def _stack(group, expect_ndim: int):
    arrays, grid = [], None
    for item in group:
        if isinstance(item, Tmif):
            if grid is None:
                grid = item.grid
            elif item.grid != grid:
                raise ValueError("TMIFs are on different lag grids")
            arrays.append(item.values)
        else:
            arrays.append(np.asarray(item, dtype=float))
    data = np.array(arrays, dtype=float)
    if data.ndim != expect_ndim + 1:
        raise ValueError(f"expected {expect_ndim}-D TMIFs")
    return data, grid


def temporal_cluster_test(group_a, group_b, n_perm: int = 5000, cluster_alpha: float = 0.05,
                          seed: int = 0, exhaustive: bool | None = None) -> ClusterResult:
    """Cluster test over lags for multivariate TMIFs (one curve per subject)."""
    a, grid_a = _stack(group_a, 1)
    b, grid_b = _stack(group_b, 1)
    if grid_a is not None and grid_b is not None and grid_a != grid_b:
        raise ValueError("groups are on different lag grids")
    if a.shape[1] != b.shape[1]:
        raise ValueError("groups have different numbers of lags")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each group needs at least two subjects")
    swapped = _canonical(a, b)
    if swapped:
        a, b = b, a
    pooled = np.concatenate([a, b])
    t, df = welch_t(a, b)
    supra = _supra(t, df, cluster_alpha)
    found = _clusters_1d(t, supra)
    member, exh = _relabelings(len(pooled), len(a), n_perm, seed, exhaustive)
    null = np.empty(len(member))
    block = 2000
    for s in range(0, len(member), block):
        tp, dfp = _relabeled_t(pooled, member[s:s + block])
        null[s:s + block] = _max_mass_1d(tp, _supra(tp, dfp, cluster_alpha))
    sign = -1.0 if swapped else 1.0
    pvals = _p_values([m for _, m in found], null, exh)
    clusters = sorted((Cluster(members, sign * mass, p)
                       for (members, mass), p in zip(found, pvals)),
                      key=lambda c: (c.p_value, c.members))
    grid = grid_a or grid_b
    return ClusterResult(clusters, sign * t, null, len(member), cluster_alpha, exh,
                         None if grid is None else grid.times_ms)


def spatiotemporal_cluster_test(group_a, group_b, adjacency: Adjacency, channels=None,
                                n_perm: int = 5000, cluster_alpha: float = 0.05,
                                seed: int = 0, exhaustive: bool | None = None) -> ClusterResult:
    """Cluster test over channels x lags for single-channel TMIFs."""
    a, grid_a = _stack(group_a, 2)
    b, grid_b = _stack(group_b, 2)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError("groups have different channel x lag shapes")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each group needs at least two subjects")
    if channels is None:
        first = next(iter(group_a))
        channels = first.channels if isinstance(first, Tmif) else adjacency.names
    channels = tuple(channels)
    if len(channels) != a.shape[1]:
        raise ValueError("channel names do not match the data")
    graph = _graph(len(channels), a.shape[2], adjacency.matrix(channels))
    swapped = _canonical(a, b)
    if swapped:
        a, b = b, a
    n_ch, n_lags = a.shape[1:]
    pooled = np.concatenate([a, b]).reshape(len(a) + len(b), -1)
    t, df = welch_t(a, b)
    supra = _supra(t, df, cluster_alpha)
    found = _clusters_graph(t, supra, graph)
    member, exh = _relabelings(len(pooled), len(a), n_perm, seed, exhaustive)
    null = np.zeros(len(member))
    block = 500
    for s in range(0, len(member), block):
        tp, dfp = _relabeled_t(pooled, member[s:s + block])
        sp = _supra(tp, dfp, cluster_alpha)
        for i in range(len(tp)):
            masses = [abs(m) for _, m in _clusters_graph(tp[i], sp[i], graph)]
            null[s + i] = max(masses, default=0.0)
    sign = -1.0 if swapped else 1.0
    pvals = _p_values([m for _, m in found], null, exh)
    clusters = []
    for (nodes, mass), p in zip(found, pvals):
        members = tuple((int(n // n_lags), int(n % n_lags)) for n in nodes)
        clusters.append(Cluster(members, sign * mass, p))
    clusters.sort(key=lambda c: (c.p_value, c.members))
    grid = grid_a or grid_b
    return ClusterResult(clusters, sign * t, null, len(member), cluster_alpha, exh,
                         None if grid is None else grid.times_ms, channels)
