"""RBF-kernel SVM, nested leave-one-subject-out evaluation and band ablation.

Labels are +1 for the aphasia group (the positive class for F1, sensitivity
and ROC) and -1 for controls.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from ._parallel import pmap
from .core import NARROW_BANDS, Subject

C_GRID = (0.1, 1.0, 10.0, 100.0)
PRUNE_GRID_MS = (100.0, 200.0, 300.0, 400.0, 500.0)
TAU = 1e-12


# ---------------------------------------------------------------------------
# SVM
# ---------------------------------------------------------------------------


def rbf_kernel(A, B, gamma: float) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass(frozen=True)
class SvmModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray            # alpha_i * y_i, within [-C, C]
    bias: float
    gamma: float
    C: float
    mean: np.ndarray
    scale: np.ndarray
    n_iter: int = 0
    kkt_gap: float = 0.0

    @property
    def n_features(self) -> int:
        return len(self.mean)


def _smo(K: np.ndarray, y: np.ndarray, C: float, tol: float, max_iter: int):
    """Solve the soft-margin dual with second-order working-set selection.

    Minimises 1/2 a'Qa - e'a subject to 0 <= a <= C and y'a = 0, where
    Q = (y y') * K.  Returns (alpha, rho, n_iter, gap); the decision function
    is sum_i a_i y_i K(x_i, x) - rho.
    """
    n = len(y)
    Q = y[:, None] * y[None, :] * K
    qd = np.diag(Q).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)
    pos = y > 0
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        at_lo = alpha <= 0
        at_hi = alpha >= C
        up = np.where(pos, ~at_hi, ~at_lo)
        low = np.where(pos, ~at_lo, ~at_hi)
        yG = -y * G
        g_up = np.where(up, yG, -np.inf)
        i = int(np.argmax(g_up))
        g_max = g_up[i]
        g_min = np.min(np.where(low, yG, np.inf))
        gap = g_max - g_min
        if gap < tol:
            break
        b = g_max - yG
        a = qd[i] + qd - 2.0 * y[i] * y * Q[i]
        a = np.where(a > 0, a, TAU)
        cand = low & (yG < g_max)
        score = np.where(cand, -(b * b) / a, np.inf)
        j = int(np.argmin(score))

        old_i, old_j = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = max(qd[i] + qd[j] + 2.0 * Q[i, j], TAU)
            delta = (-G[i] - G[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, C - diff
            elif alpha[j] > C:
                alpha[j], alpha[i] = C, C + diff
        else:
            quad = max(qd[i] + qd[j] - 2.0 * Q[i, j], TAU)
            delta = (G[i] - G[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, total - C
            elif alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, total
            if total > C:
                if alpha[j] > C:
                    alpha[j], alpha[i] = C, total - C
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, total
        G += Q[:, i] * (alpha[i] - old_i) + Q[:, j] * (alpha[j] - old_j)

    yG = -y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = -float(np.mean(yG[free]))
    else:
        at_hi = alpha >= C
        ub_mask = np.where(pos, alpha <= 0, at_hi)
        lb_mask = np.where(pos, at_hi, alpha <= 0)
        ub = np.min(np.where(ub_mask, -yG, np.inf))
        lb = np.max(np.where(lb_mask, -yG, -np.inf))
        rho = float((ub + lb) / 2.0)
    return alpha, rho, it, float(gap)


def svm_train(X, y, C: float, gamma: float, tol: float = 1e-3, max_iter: int = 100_000,
              mean=None, scale=None) -> SvmModel:
    """Train an RBF soft-margin SVM on (already standardised) features.

    ``mean``/``scale`` record the standardisation that produced ``X`` so that
    :func:`svm_decide` can apply it to raw inputs.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    classes = set(np.unique(y))
    if not classes <= {-1.0, 1.0}:
        raise ValueError("labels must be -1 or +1")
    if len(classes) < 2:
        raise ValueError("training data contain a single class")
    K = rbf_kernel(X, X, gamma)
    alpha, rho, n_iter, gap = _smo(K, y, C, tol, max_iter)
    sv = alpha > 0
    d = X.shape[1]
    return SvmModel(
        support_vectors=X[sv], dual_coef=(alpha * y)[sv], bias=-rho, gamma=float(gamma),
        C=float(C), mean=np.zeros(d) if mean is None else np.asarray(mean, float),
        scale=np.ones(d) if scale is None else np.asarray(scale, float),
        n_iter=n_iter, kkt_gap=gap)


def svm_decide(model: SvmModel, x) -> np.ndarray | float:
    """Signed decision value(s); positive means the +1 (aphasia) class."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {x.shape[1]}")
    z = (x - model.mean) / model.scale
    f = rbf_kernel(z, model.support_vectors, model.gamma) @ model.dual_coef + model.bias
    return float(f[0]) if single else f


def standardization(X) -> tuple:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


def gamma_rule(Z) -> float:
    """1 / (n_features * variance of the standardised training matrix)."""
    var = float(np.var(Z))
    return 1.0 / (Z.shape[1] * var) if var > 0 else 1.0


def fit_svm(X, y, C: float, tol: float = 1e-3) -> SvmModel:
    """Standardise on ``X``, pick gamma from the training data and train."""
    X = np.asarray(X, dtype=float)
    mean, scale = standardization(X)
    Z = (X - mean) / scale
    return svm_train(Z, y, C, gamma_rule(Z), tol=tol, mean=mean, scale=scale)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def roc_auc(scores, labels):
    """ROC points ``(fpr, tpr, threshold)`` and the trapezoidal AUC.

    Thresholds sweep the distinct scores from high to low (predict positive
    when score >= threshold); tied scores move both rates at once, so the AUC
    equals the Mann-Whitney estimate with ties counted one half.
    """
    s = np.asarray(scores, dtype=float)
    lab = np.asarray(labels)
    positive = lab > 0
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes")
    points = [(0.0, 0.0, float("inf"))]
    for thr in np.unique(s)[::-1]:
        pred = s >= thr
        tpr = np.sum(pred & positive) / n_pos
        fpr = np.sum(pred & ~positive) / n_neg
        points.append((float(fpr), float(tpr), float(thr)))
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return points, auc


def classification_metrics(labels, decision) -> dict:
    lab = np.asarray(labels) > 0
    pred = np.asarray(decision) > 0
    tp = int(np.sum(pred & lab))
    tn = int(np.sum(~pred & ~lab))
    fp = int(np.sum(pred & ~lab))
    fn = int(np.sum(~pred & lab))
    n = len(lab)
    return {
        "accuracy": (tp + tn) / n,
        "f1": 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0,
        "sensitivity": tp / (tp + fn) if tp + fn else 0.0,
        "specificity": tn / (tn + fp) if tn + fp else 0.0,
    }


# ---------------------------------------------------------------------------
# Features and nested cross-validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureTable:
    """Full-length TMIF features for every subject plus column bookkeeping."""

    X: np.ndarray
    y: np.ndarray
    ids: tuple
    band_columns: dict               # band -> column indices (full TMIF)
    times_ms: np.ndarray
    age_column: int | None

    def columns(self, prune_ms: float, bands=None) -> np.ndarray:
        keep = self.times_ms <= prune_ms + 1e-9
        cols = [self.band_columns[b][keep] for b in (bands or self.band_columns)]
        if self.age_column is not None:
            cols.append(np.array([self.age_column]))
        return np.concatenate(cols)


def feature_table(subjects, bands=NARROW_BANDS, with_age: bool = True) -> FeatureTable:
    blocks, band_columns, grid = [], {}, None
    start = 0
    for band in bands:
        rows = []
        for s in subjects:
            tm = s.tmifs[band]
            if not tm.multivariate:
                raise ValueError(f"{s.id}/{band}: classifier features need multivariate TMIFs")
            if grid is None:
                grid = tm.grid
            elif tm.grid != grid:
                raise ValueError(f"{s.id}/{band}: TMIF on a different lag grid")
            rows.append(tm.values)
        block = np.array(rows)
        blocks.append(block)
        band_columns[band] = np.arange(start, start + block.shape[1])
        start += block.shape[1]
    age_col = None
    if with_age:
        blocks.append(np.array([[s.age] for s in subjects]))
        age_col = start
    X = np.hstack(blocks)
    if not np.isfinite(X).all():
        raise ValueError("non-finite feature values")
    y = np.array([s.label for s in subjects], dtype=float)
    return FeatureTable(X, y, tuple(s.id for s in subjects), band_columns,
                        grid.times_ms, age_col)


def stratified_folds(y, n_folds: int, rng: np.random.Generator) -> list:
    """Test-index arrays; each class is shuffled and dealt round-robin."""
    folds = [[] for _ in range(n_folds)]
    offset = 0
    for cls in (-1.0, 1.0):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        for k, i in enumerate(idx):
            folds[(k + offset) % n_folds].append(int(i))
        offset += len(idx)
    return [np.array(sorted(f)) for f in folds]


@dataclass(frozen=True)
class _OuterResult:
    index: int
    decision: float
    C: float
    prune_ms: float
    inner_accuracy: float
    train_indices: tuple


def _outer_fold(o: int, table: FeatureTable, y: np.ndarray, bands, C_grid, prune_grid,
                n_inner: int, seed: int, tol: float) -> _OuterResult:
    train = np.array([i for i in range(len(y)) if i != o])
    y_tr = y[train]
    n_cls = min(int(np.sum(y_tr == -1)), int(np.sum(y_tr == 1)))
    k = min(n_inner, n_cls)
    if k < 2:
        raise ValueError(f"outer fold {o}: a class has fewer than two training subjects")
    folds = stratified_folds(y_tr, k, np.random.default_rng([int(seed), int(o)]))
    scores = {}
    for prune in prune_grid:
        cols = table.columns(prune, bands)
        X = table.X[np.ix_(train, cols)]
        fold_data = []
        for test_idx in folds:
            fit_idx = np.setdiff1d(np.arange(len(train)), test_idx)
            mean, scale = standardization(X[fit_idx])
            Z_fit = (X[fit_idx] - mean) / scale
            Z_val = (X[test_idx] - mean) / scale
            gamma = gamma_rule(Z_fit)
            K_val = rbf_kernel(Z_val, Z_fit, gamma)
            fold_data.append((fit_idx, test_idx, Z_fit, gamma, K_val))
        for C in C_grid:
            acc = []
            for fit_idx, test_idx, Z_fit, gamma, K_val in fold_data:
                if len(np.unique(y_tr[fit_idx])) < 2:
                    raise ValueError(f"outer fold {o}: inner training fold lacks a class")
                K = rbf_kernel(Z_fit, Z_fit, gamma)
                alpha, rho, _, _ = _smo(K, y_tr[fit_idx], C, tol, 100_000)
                f = K_val @ (alpha * y_tr[fit_idx]) - rho
                acc.append(np.mean((f > 0) == (y_tr[test_idx] > 0)))
            scores[(C, prune)] = float(np.mean(acc))
    best = None
    for C in sorted(C_grid):
        for prune in sorted(prune_grid):
            if best is None or scores[(C, prune)] > scores[best]:
                best = (C, prune)
    C, prune = best
    cols = table.columns(prune, bands)
    model = fit_svm(table.X[np.ix_(train, cols)], y_tr, C, tol)
    decision = svm_decide(model, table.X[o, cols])
    return _OuterResult(o, decision, C, prune, scores[best], tuple(int(i) for i in train))


@dataclass
class EvaluationReport:
    accuracy: float
    f1: float
    sensitivity: float
    specificity: float
    auc: float
    roc: list
    subject_ids: list
    labels: list
    decision_values: list
    chosen: list = field(default_factory=list)
    bands: list = field(default_factory=list)

    def metrics(self) -> dict:
        return {"accuracy": self.accuracy, "f1": self.f1, "sensitivity": self.sensitivity,
                "specificity": self.specificity, "auc": self.auc}

    def as_dict(self) -> dict:
        return {
            **self.metrics(),
            "bands": list(self.bands),
            "subjects": [{"id": i, "label": int(lab), "decision": d, **ch}
                         for i, lab, d, ch in zip(self.subject_ids, self.labels,
                                                  self.decision_values, self.chosen)],
            "roc": [{"fpr": f, "tpr": t, "threshold": th} for f, t, th in self.roc],
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.as_dict(), fh, indent=2)
            fh.write("\n")

    def roc_to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("fpr,tpr,threshold\n")
            for f, t, th in self.roc:
                fh.write(f"{f!r},{t!r},{th!r}\n")


def nested_loso_evaluate(subjects, C_grid=C_GRID, prune_grid=PRUNE_GRID_MS,
                         bands=NARROW_BANDS, seed: int = 0, n_inner: int = 5,
                         labels=None, with_age: bool = True, jobs: int = 1,
                         tol: float = 1e-3) -> EvaluationReport:
    """Leave-one-subject-out evaluation with an inner stratified k-fold search.

    The inner search picks (C, prune) by mean validation accuracy; ties go to
    the smaller C, then the shorter TMIF.  Standardisation and gamma are always
    fitted on the data the model is trained on, never on the held-out subject.
    ``labels`` overrides the subjects' group labels (for permutation checks).
    """
    subjects = list(subjects)
    table = feature_table(subjects, tuple(dict.fromkeys(list(bands))), with_age)
    y = table.y if labels is None else np.asarray(labels, dtype=float)
    if min(np.sum(y == 1), np.sum(y == -1)) < 3:
        raise ValueError("nested LOSO needs at least three subjects per class")
    work = partial(_outer_fold, table=table, y=y, bands=tuple(bands), C_grid=tuple(C_grid),
                   prune_grid=tuple(prune_grid), n_inner=n_inner, seed=seed, tol=tol)
    results = pmap(work, range(len(y)), jobs)
    for r in results:
        if r.index in r.train_indices:
            raise AssertionError("held-out subject leaked into training")
    decision = np.array([r.decision for r in results])
    m = classification_metrics(y, decision)
    roc, auc = roc_auc(decision, y)
    return EvaluationReport(
        accuracy=m["accuracy"], f1=m["f1"], sensitivity=m["sensitivity"],
        specificity=m["specificity"], auc=auc, roc=roc, subject_ids=list(table.ids),
        labels=[int(v) for v in y], decision_values=[float(d) for d in decision],
        chosen=[{"C": r.C, "prune_ms": r.prune_ms, "inner_accuracy": r.inner_accuracy}
                for r in results],
        bands=list(bands))


def ablate_band(subjects, band_to_drop: str, bands=NARROW_BANDS,
                full: EvaluationReport | None = None, **kw) -> dict:
    """Performance drop (full minus reduced) when one band's features are removed."""
    bands = tuple(bands)
    if band_to_drop not in bands:
        raise ValueError(f"{band_to_drop!r} is not among the model bands {bands}")
    if full is None:
        full = nested_loso_evaluate(subjects, bands=bands, **kw)
    reduced = nested_loso_evaluate(subjects, bands=tuple(b for b in bands if b != band_to_drop),
                                   **kw)
    return {
        "band": band_to_drop,
        "accuracy_drop": full.accuracy - reduced.accuracy,
        "f1_drop": full.f1 - reduced.f1,
        "auc_drop": full.auc - reduced.auc,
        "reduced": reduced.metrics(),
    }


def subjects_from(ids, groups, ages, tmifs) -> list:
    """Convenience constructor: parallel sequences -> list of :class:`Subject`."""
    return [Subject(i, g, a, t) for i, g, a, t in zip(ids, groups, ages, tmifs)]
