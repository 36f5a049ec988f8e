"""Few-shot shape classification on refined features.

Per backbone layer: PCA to k dimensions, then a one-vs-one RBF SVM
trained on the support set with a cross-validated grid search over the
penalty C. The layer whose SVM scores highest on the support set (by
that same cross-validation) is selected and used on the test features.

PCA offers two fitting scopes. 'joint' fits the projection on support
and unlabeled test features together; that is transductive, and the
reason a 20-dimensional reduction is feasible with only a handful of
support images. 'support_only' fits on the support set alone; with tiny support
sets the feasible k is then capped by the support sample count.

The SVM dual is solved by sequential minimal optimization written out
here (pair selection by maximal error difference, analytic two-variable
update, incremental error cache). Tests check the result against a
generic QP solver, so the solver cannot silently drift.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import (ConfigurationError, DegenerateDataError,
                     DivergenceError, InsufficientRankError)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PcaProjection:
    mean: np.ndarray                # (d,)
    components: np.ndarray          # (k, d), orthonormal rows
    explained_variance: np.ndarray  # (k,), population convention (1/n)


def _fix_signs(components):
    for row in components:
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0:
            row *= -1
    return components


def pca_fit(x, k: int, method: str = "auto") -> PcaProjection:
    """Top-k principal directions of the rows of ``x``.

    method 'gram' eigendecomposes the n x n Gram matrix (the only viable
    route when d is tens of thousands), 'dense' the d x d covariance;
    'auto' picks by shape. Both return identical projections up to the
    shared sign convention (first nonzero entry positive).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigurationError(f"expected a matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ConfigurationError(f"need at least 2 rows, got {n}")
    if not 1 <= k <= min(n - 1, d):
        raise ConfigurationError(
            f"k={k} outside [1, {min(n - 1, d)}] for a {n}x{d} matrix")
    if method == "auto":
        method = "gram" if d > n else "dense"
    mean = x.mean(axis=0)
    xc = x - mean

    if method == "gram":
        gram = xc @ xc.T
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1][:k]
        lam = evals[order]                      # eigenvalues of Xc Xc^T
        _check_rank(lam, evals.max(initial=0.0), k)
        comps = (xc.T @ evecs[:, order] / np.sqrt(lam)).T
        variance = lam / n
    elif method == "dense":
        cov = xc.T @ xc / n
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][:k]
        lam = evals[order]
        _check_rank(lam * n, evals.max(initial=0.0) * n, k)
        comps = evecs[:, order].T.copy()
        variance = lam
    else:
        raise ConfigurationError(f"unknown pca method {method!r}")

    return PcaProjection(mean=mean, components=_fix_signs(comps),
                         explained_variance=np.maximum(variance, 0.0))


def _check_rank(lam, biggest, k):
    floor = max(biggest, 1.0) * 1e-10
    if lam[-1] <= floor:
        rank = int((lam > floor).sum())
        raise InsufficientRankError(
            f"data rank ~{rank} cannot support {k} components")


def pca_transform(p: PcaProjection, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.shape[1] != p.mean.size:
        raise ConfigurationError(
            f"feature length {x.shape[1]} does not match projection "
            f"dimension {p.mean.size}")
    out = (x - p.mean) @ p.components.T
    return out[0] if single else out


# ---------------------------------------------------------------------------
# binary SVM via SMO
# ---------------------------------------------------------------------------

def rbf_kernel(a, b, gamma: float):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None]
          - 2.0 * a @ b.T)
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass
class BinarySvm:
    support_vectors: np.ndarray   # (m, k)
    alphas: np.ndarray            # (m,), in (0, C]
    labels: np.ndarray            # (m,), +-1
    bias: float
    gamma: float
    c: float

    def decision(self, x):
        kern = rbf_kernel(np.atleast_2d(x), self.support_vectors, self.gamma)
        return kern @ (self.alphas * self.labels) + self.bias


def _smo(kern, y, c, tol, max_passes=20000):
    """Platt-style SMO on a precomputed kernel. Deterministic: the
    second index is chosen by maximal |E_i - E_j|, falling back to a
    fixed-order scan. Returns (alphas, bias)."""
    n = len(y)
    alphas = np.zeros(n)
    bias = 0.0
    errors = -y.astype(np.float64)   # decision is 0 everywhere at start
    eps = 1e-12

    def take_step(i, j):
        nonlocal bias
        if i == j:
            return False
        ai, aj = alphas[i], alphas[j]
        yi, yj = y[i], y[j]
        ei, ej = errors[i], errors[j]
        if yi == yj:
            lo, hi = max(0.0, ai + aj - c), min(c, ai + aj)
        else:
            lo, hi = max(0.0, aj - ai), min(c, c + aj - ai)
        if hi - lo < eps:
            return False
        eta = kern[i, i] + kern[j, j] - 2.0 * kern[i, j]
        if eta > 0:
            aj_new = np.clip(aj + yj * (ei - ej) / eta, lo, hi)
        else:
            # flat direction (duplicate or colinear points): the dual is
            # linear on the segment, so the optimum is at an endpoint
            s = yi * yj
            vi = (ei + yi) - bias - ai * yi * kern[i, i] - aj * yj * kern[i, j]
            vj = (ej + yj) - bias - ai * yi * kern[i, j] - aj * yj * kern[j, j]

            def seg_obj(cand):
                ai_c = ai + s * (aj - cand)
                return (0.5 * kern[i, i] * ai_c * ai_c
                        + 0.5 * kern[j, j] * cand * cand
                        + s * kern[i, j] * ai_c * cand
                        + yi * ai_c * vi + yj * cand * vj - ai_c - cand)

            lo_obj, hi_obj = seg_obj(lo), seg_obj(hi)
            if lo_obj < hi_obj - 1e-12:
                aj_new = lo
            elif hi_obj < lo_obj - 1e-12:
                aj_new = hi
            else:
                return False
        if abs(aj_new - aj) < eps * (aj_new + aj + eps):
            return False
        ai_new = ai + yi * yj * (aj - aj_new)
        d_i = yi * (ai_new - ai)
        d_j = yj * (aj_new - aj)
        b1 = bias - ei - d_i * kern[i, i] - d_j * kern[i, j]
        b2 = bias - ej - d_i * kern[i, j] - d_j * kern[j, j]
        if 0 < ai_new < c:
            new_bias = b1
        elif 0 < aj_new < c:
            new_bias = b2
        else:
            new_bias = (b1 + b2) / 2.0
        errors[:] += d_i * kern[i] + d_j * kern[j] + (new_bias - bias)
        alphas[i], alphas[j] = ai_new, aj_new
        bias = new_bias
        return True

    def examine(j):
        ej = errors[j]
        rj = ej * y[j]
        if (rj < -tol and alphas[j] < c) or (rj > tol and alphas[j] > 0):
            non_bound = np.nonzero((alphas > eps) & (alphas < c - eps))[0]
            if len(non_bound) > 1:
                i = non_bound[np.argmax(np.abs(errors[non_bound] - ej))]
                if take_step(int(i), j):
                    return True
            for i in np.roll(non_bound, -(j % max(1, len(non_bound)))):
                if take_step(int(i), j):
                    return True
            for i in range(j + 1, n):
                if take_step(i, j):
                    return True
            for i in range(j):
                if take_step(i, j):
                    return True
        return False

    examine_all = True
    passes = 0
    while passes < max_passes:
        changed = 0
        targets = range(n) if examine_all else [
            int(i) for i in np.nonzero((alphas > eps) & (alphas < c - eps))[0]]
        for j in targets:
            changed += examine(j)
        passes += 1
        if examine_all:
            if changed == 0:
                break
            examine_all = False
        elif changed == 0:
            examine_all = True
    return alphas, bias


def _optimal_bias(kern, y, alphas, c):
    """Bias from final alphas: midpoint of the interval every KKT
    inequality allows. When no alpha is strictly inside (0, C) the
    incremental SMO bias is under-determined, so it is always
    recomputed this way."""
    g = kern @ (alphas * y)
    slack = y - g
    eps = c * 1e-8
    at_zero = alphas <= eps
    at_c = alphas >= c - eps
    interior = ~(at_zero | at_c)
    lower = interior | (at_zero & (y > 0)) | (at_c & (y < 0))
    upper = interior | (at_zero & (y < 0)) | (at_c & (y > 0))
    lo = slack[lower].max() if lower.any() else -np.inf
    hi = slack[upper].min() if upper.any() else np.inf
    if not np.isfinite(lo):
        return float(hi)
    if not np.isfinite(hi):
        return float(lo)
    return float((lo + hi) / 2.0)


def _kkt_worst(margins, alphas, c):
    eps = c * 1e-8
    worst = 0.0
    for m, a in zip(margins, alphas):
        if a <= eps:
            worst = max(worst, 1.0 - m)
        elif a >= c - eps:
            worst = max(worst, m - 1.0)
        else:
            worst = max(worst, abs(m - 1.0))
    return max(worst, 0.0)


def kkt_residual(svm: BinarySvm, x, y):
    """Worst violation of the dual optimality conditions on the training
    set the model was fit to."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    margins = y * svm.decision(x)
    # reconstruct full alphas: zeros for non-support points
    full = np.zeros(len(y))
    used = set()
    for sv, alpha in zip(svm.support_vectors, svm.alphas):
        cand = np.nonzero(np.all(x == sv, axis=1))[0]
        pick = next(int(i) for i in cand if int(i) not in used)
        used.add(pick)
        full[pick] = alpha
    return _kkt_worst(margins, full, svm.c)


def train_binary(x, y, c: float, gamma: float, tol: float = 2e-4):
    """y must be +-1. Keeps only rows with alpha > 0 as support vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    kern = rbf_kernel(x, x, gamma)
    alphas, _ = _smo(kern, y, c, tol)
    bias = _optimal_bias(kern, y, alphas, c)
    margins = y * (kern @ (alphas * y) + bias)
    if _kkt_worst(margins, alphas, c) >= 1e-3:
        raise DivergenceError(
            f"SMO failed to reach KKT tolerance on {len(y)} points (C={c})")
    keep = alphas > 1e-10
    return BinarySvm(support_vectors=x[keep].copy(), alphas=alphas[keep],
                     labels=y[keep], bias=float(bias), gamma=gamma, c=c)


# ---------------------------------------------------------------------------
# one-vs-one multiclass
# ---------------------------------------------------------------------------

@dataclass
class SvmModel:
    classes: tuple                 # sorted label strings
    pairs: list = field(default_factory=list)   # [(label_a, label_b, BinarySvm)]
    gamma: float = 1.0
    c: float = 1.0

    def predict(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        votes = np.zeros((len(x), len(self.classes)), dtype=np.int64)
        index = {lab: i for i, lab in enumerate(self.classes)}
        for label_a, label_b, svm in self.pairs:
            dec = svm.decision(x)
            votes[dec >= 0, index[label_a]] += 1
            votes[dec < 0, index[label_b]] += 1
        # ties resolve to the lexicographically smallest label because
        # classes are sorted and argmax returns the first maximum
        return [self.classes[i] for i in votes.argmax(axis=1)]


def svm_train(x, y, c: float, gamma: float) -> SvmModel:
    x = np.asarray(x, dtype=np.float64)
    y = list(y)
    if len(y) != len(x) or len(x) < 2:
        raise ConfigurationError("need matching x/y with at least 2 rows")
    classes = tuple(sorted(set(y)))
    if len(classes) < 2:
        raise DegenerateDataError(
            f"support set contains a single class {classes}; cannot train")
    model = SvmModel(classes=classes, gamma=gamma, c=c)
    y_arr = np.array(y)
    for ai in range(len(classes)):
        for bi in range(ai + 1, len(classes)):
            a, b = classes[ai], classes[bi]
            mask = (y_arr == a) | (y_arr == b)
            labels = np.where(y_arr[mask] == a, 1.0, -1.0)
            model.pairs.append((a, b, train_binary(x[mask], labels, c, gamma)))
    return model


def default_gamma(x, k: int):
    """1 / (k * population variance of the matrix entries)."""
    var = float(np.asarray(x).var())
    if var <= 1e-12:
        return 1.0
    return 1.0 / (k * var)


# ---------------------------------------------------------------------------
# C grid search
# ---------------------------------------------------------------------------

C_GRID = (0.1, 1.0, 10.0, 100.0, 1000.0)


def _stratified_folds(y, folds: int):
    """Deterministic assignment: within each class, samples go round-robin
    to folds in input order."""
    y = np.asarray(y)
    fold_of = np.zeros(len(y), dtype=np.int64)
    for cls in sorted(set(y.tolist())):
        idx = np.nonzero(y == cls)[0]
        fold_of[idx] = np.arange(len(idx)) % folds
    return fold_of


def grid_search_C(x, y, grid=C_GRID, folds: int = 5, gamma: float = None,
                  k: int = None):
    """Cross-validated accuracy per C; returns (best_C, best_accuracy).

    Ties go to the smaller C. Folds are reduced (with a warning) when the
    smallest class has fewer members than requested.
    """
    if not grid:
        raise ConfigurationError("empty C grid")
    y = list(y)
    x = np.asarray(x, dtype=np.float64)
    if gamma is None:
        gamma = default_gamma(x, k if k else x.shape[1])
    counts = {}
    for label in y:
        counts[label] = counts.get(label, 0) + 1
    min_count = min(counts.values())
    if folds > min_count:
        warnings.warn(
            f"reducing folds from {folds} to {max(2, min_count)}: smallest "
            f"class has {min_count} members")
        folds = max(2, min_count)
    if folds < 2:
        raise ConfigurationError("cross-validation needs folds >= 2")
    fold_of = _stratified_folds(y, folds)
    y_arr = np.array(y)

    best_c, best_acc = None, -1.0
    for c in grid:
        correct = 0
        total = 0
        for f in range(folds):
            train_mask = fold_of != f
            val_mask = ~train_mask
            if len(set(y_arr[train_mask].tolist())) < 2 or not val_mask.any():
                continue
            model = svm_train(x[train_mask], y_arr[train_mask].tolist(),
                              c, gamma)
            preds = model.predict(x[val_mask])
            correct += int(sum(p == t for p, t
                               in zip(preds, y_arr[val_mask].tolist())))
            total += int(val_mask.sum())
        acc = correct / total if total else 0.0
        if acc > best_acc or (acc == best_acc and c < best_c):
            best_c, best_acc = c, acc
    return best_c, best_acc


# ---------------------------------------------------------------------------
# per-layer fitting and selection
# ---------------------------------------------------------------------------

@dataclass
class LayerClassifier:
    layer_id: str
    pca: PcaProjection
    svm: SvmModel
    support_accuracy: float


@dataclass
class LayerSelection:
    chosen_layer_id: str
    per_layer: dict               # layer_id -> support_accuracy


def _feature_matrix(feature_sets, layer_id):
    return np.stack([fs.per_layer[layer_id] for fs in feature_sets])


def fit_all_layers(support, test, k: int, pca_fit_scope: str = "joint",
                   grid=C_GRID, folds: int = 5):
    """Per-layer PCA + SVM on the support set; layer choice by support
    accuracy. ``test`` participates only as unlabeled rows of the PCA fit
    (and only when scope is 'joint'); labels are never read from it.
    """
    if pca_fit_scope not in ("joint", "support_only"):
        raise ConfigurationError(f"unknown pca_fit_scope {pca_fit_scope!r}")
    if not support:
        raise ConfigurationError("empty support set")
    labels = [fs.true_shape for fs in support]
    if any(lab is None for lab in labels):
        raise ConfigurationError("support features must carry true_shape")
    layer_ids = list(support[0].per_layer.keys())

    classifiers = []
    per_layer_acc = {}
    for lid in layer_ids:
        x_support = _feature_matrix(support, lid)
        if pca_fit_scope == "joint" and test:
            x_fit = np.concatenate([x_support, _feature_matrix(test, lid)])
        else:
            x_fit = x_support
        try:
            pca = pca_fit(x_fit, k, method="gram")
        except (ConfigurationError, InsufficientRankError) as exc:
            raise type(exc)(f"layer {lid}: {exc}")
        z_support = pca_transform(pca, x_support)
        gamma = default_gamma(z_support, k)
        best_c, cv_acc = grid_search_C(z_support, labels, grid=grid,
                                       folds=folds, gamma=gamma)
        svm = svm_train(z_support, labels, best_c, gamma)
        classifiers.append(LayerClassifier(lid, pca, svm, cv_acc))
        per_layer_acc[lid] = cv_acc

    best = max(range(len(classifiers)),
               key=lambda i: classifiers[i].support_accuracy)
    # max() keeps the earliest index on ties, which is network order
    selection = LayerSelection(chosen_layer_id=classifiers[best].layer_id,
                               per_layer=per_layer_acc)
    return classifiers, selection


def classify(selection: LayerSelection, classifiers, test):
    """Predict a shape for each test feature set with the chosen layer."""
    chosen = next((c for c in classifiers
                   if c.layer_id == selection.chosen_layer_id), None)
    if chosen is None:
        raise ConfigurationError(
            f"no classifier for chosen layer {selection.chosen_layer_id}")
    out = []
    for fs in test:
        if selection.chosen_layer_id not in fs.per_layer:
            raise ConfigurationError(
                f"feature set lacks layer {selection.chosen_layer_id}")
        z = pca_transform(chosen.pca, fs.per_layer[selection.chosen_layer_id])
        out.append((fs.detection, chosen.svm.predict(z)[0]))
    return out


# ---------------------------------------------------------------------------
# classifier bundle serialization
# ---------------------------------------------------------------------------

def save_bundle(classifiers, selection: LayerSelection, path):
    meta = {"chosen_layer_id": selection.chosen_layer_id,
            "per_layer_accuracy": selection.per_layer,
            "layers": []}
    arrays = {}
    for lc in classifiers:
        lid = lc.layer_id
        entry = {"layer_id": lid, "support_accuracy": lc.support_accuracy,
                 "gamma": lc.svm.gamma, "c": lc.svm.c,
                 "classes": list(lc.svm.classes),
                 "pairs": [[a, b] for a, b, _ in lc.svm.pairs],
                 "biases": [svm.bias for _, _, svm in lc.svm.pairs]}
        meta["layers"].append(entry)
        arrays[f"{lid}.pca.mean"] = lc.pca.mean
        arrays[f"{lid}.pca.components"] = lc.pca.components
        arrays[f"{lid}.pca.variance"] = lc.pca.explained_variance
        for pi, (_, _, svm) in enumerate(lc.svm.pairs):
            arrays[f"{lid}.svm{pi}.sv"] = svm.support_vectors
            arrays[f"{lid}.svm{pi}.alphas"] = svm.alphas
            arrays[f"{lid}.svm{pi}.labels"] = svm.labels
    write_container(path, "classifier-bundle", meta, arrays)


def load_bundle(path):
    meta, arrays = read_container(path, expect_kind="classifier-bundle")
    classifiers = []
    for entry in meta["layers"]:
        lid = entry["layer_id"]
        pca = PcaProjection(mean=arrays[f"{lid}.pca.mean"],
                            components=arrays[f"{lid}.pca.components"],
                            explained_variance=arrays[f"{lid}.pca.variance"])
        svm = SvmModel(classes=tuple(entry["classes"]),
                       gamma=entry["gamma"], c=entry["c"])
        for pi, (pair, bias) in enumerate(zip(entry["pairs"],
                                              entry["biases"])):
            svm.pairs.append((pair[0], pair[1], BinarySvm(
                support_vectors=arrays[f"{lid}.svm{pi}.sv"],
                alphas=arrays[f"{lid}.svm{pi}.alphas"],
                labels=arrays[f"{lid}.svm{pi}.labels"],
                bias=bias, gamma=entry["gamma"], c=entry["c"])))
        classifiers.append(LayerClassifier(lid, pca, svm,
                                           entry["support_accuracy"]))
    selection = LayerSelection(chosen_layer_id=meta["chosen_layer_id"],
                               per_layer=meta["per_layer_accuracy"])
    return classifiers, selection
