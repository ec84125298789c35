"""Classifiers and evaluation: 1-NN, one-vs-one RBF SVM, CV grid search."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import core
from .features import Dictionary

SVM_TOL = 1e-3
GRID_C_EXPONENTS = (-2, 2, 6, 10)
GRID_GAMMA_EXPONENTS = (-12, -10, -8, -6, -4, -2, 0, 2)
INNER_FOLDS = 3


# ---------------------------------------------------------------------------
# Shared helpers

def standardize_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std (floored) computed on the training set."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    return mean, std


def standardize_apply(x: np.ndarray, mean: np.ndarray,
                      std: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - mean) / std


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] \
        - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * _pairwise_sq(np.asarray(a, dtype=np.float64),
                                        np.asarray(b, dtype=np.float64)))


def kfold_split(labels: np.ndarray, n_folds: int, seed: int) -> np.ndarray:
    """Stratified fold assignment; round-robin per shuffled class."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = np.full(labels.size, -1, dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        folds[idx] = np.arange(idx.size) % n_folds
    return folds


# ---------------------------------------------------------------------------
# 1-nearest-neighbor

def knn_predict(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray,
                n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """1-NN by squared Euclidean distance; ties go to the lowest index.

    Returns (labels, confidence) with one-hot confidence rows.
    """
    d = _pairwise_sq(np.asarray(test_x, dtype=np.float64),
                     np.asarray(train_x, dtype=np.float64))
    nearest = d.argmin(axis=1)
    pred = np.asarray(train_y)[nearest]
    conf = np.zeros((pred.size, n_classes))
    conf[np.arange(pred.size), pred] = 1.0
    return pred, conf


# ---------------------------------------------------------------------------
# Sequential minimal optimization for one binary RBF SVM

@njit(cache=True)
def _smo_solve(k: np.ndarray, y: np.ndarray, c: float, tol: float,
               max_iter: int, seed: int):     # pragma: no cover - numba
    n = y.size
    alpha = np.zeros(n)
    b = 0.0
    state = np.uint64(2 * seed + 1)
    stuck = np.zeros(n, dtype=np.uint8)
    moved_since_reset = False
    # error cache e_i = f(x_i) - y_i, updated incrementally
    e = -y.copy()
    for _ in range(max_iter):
        best_i = -1
        best_v = tol
        for i in range(n):
            if stuck[i]:
                continue
            r = e[i] * y[i]
            v = 0.0
            if r < -tol and alpha[i] < c:
                v = -r
            elif r > tol and alpha[i] > 0.0:
                v = r
            if v > best_v:
                best_v = v
                best_i = i
        if best_i < 0:
            # retry stuck violators only if something moved since last reset
            if stuck.any() and moved_since_reset:
                stuck[:] = 0
                moved_since_reset = False
                continue
            break
        i = best_i

        state = state * np.uint64(6364136223846793005) \
            + np.uint64(1442695040888963407)
        start = int(state >> np.uint64(33)) % n
        moved = False
        for off in range(n):
            j = (start + off) % n
            if j == i:
                continue
            if y[i] != y[j]:
                lo = max(0.0, alpha[j] - alpha[i])
                hi = min(c, c + alpha[j] - alpha[i])
            else:
                lo = max(0.0, alpha[i] + alpha[j] - c)
                hi = min(c, alpha[i] + alpha[j])
            if hi - lo < 1e-12:
                continue
            eta = 2.0 * k[i, j] - k[i, i] - k[j, j]
            if eta >= -1e-12:
                continue
            aj_new = alpha[j] - y[j] * (e[i] - e[j]) / eta
            if aj_new > hi:
                aj_new = hi
            elif aj_new < lo:
                aj_new = lo
            if abs(aj_new - alpha[j]) < 1e-10:
                continue
            ai_new = alpha[i] + y[i] * y[j] * (alpha[j] - aj_new)

            b1 = b - e[i] - y[i] * (ai_new - alpha[i]) * k[i, i] \
                - y[j] * (aj_new - alpha[j]) * k[i, j]
            b2 = b - e[j] - y[i] * (ai_new - alpha[i]) * k[i, j] \
                - y[j] * (aj_new - alpha[j]) * k[j, j]
            if 0.0 < ai_new < c:
                b_new = b1
            elif 0.0 < aj_new < c:
                b_new = b2
            else:
                b_new = 0.5 * (b1 + b2)
            dai = y[i] * (ai_new - alpha[i])
            daj = y[j] * (aj_new - alpha[j])
            for a in range(n):
                e[a] += dai * k[a, i] + daj * k[a, j] + (b_new - b)
            b = b_new
            alpha[i] = ai_new
            alpha[j] = aj_new
            moved = True
            moved_since_reset = True
            break
        if not moved:
            stuck[i] = 1
    return alpha, b


def smo_train(kernel: np.ndarray, y: np.ndarray, c: float,
              tol: float = SVM_TOL, max_iter: int = 20000,
              seed: int = 0) -> tuple[np.ndarray, float]:
    """Train one binary SVM on a precomputed kernel; labels must be +-1."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.abs(y) == 1.0):
        raise ValueError("binary labels must be +1 / -1")
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    return _smo_solve(kernel, y, float(c), float(tol), int(max_iter),
                      int(seed))


def kkt_violation(kernel: np.ndarray, y: np.ndarray, alpha: np.ndarray,
                  b: float, c: float) -> float:
    """Largest KKT violation of a trained binary SVM (diagnostic)."""
    f = kernel @ (alpha * y) + b
    r = (f - y) * y
    viol = np.zeros_like(r)
    lower = alpha < c - 1e-9
    upper = alpha > 1e-9
    viol[lower] = np.maximum(viol[lower], -r[lower])
    viol[upper] = np.maximum(viol[upper], r[upper])
    return float(viol.max())


# ---------------------------------------------------------------------------
# One-vs-one multiclass SVM

@dataclass
class SvmModel:
    support: np.ndarray           # (n, d) standardized training points
    labels: np.ndarray            # (n,) class indices
    pairs: np.ndarray             # (n_pairs, 2) class index pairs
    pair_idx: np.ndarray          # (n_pairs, max_m) indices into `support`
    pair_cnt: np.ndarray          # (n_pairs,) valid entries per row
    alphas: np.ndarray            # (n_pairs, max_m)
    biases: np.ndarray            # (n_pairs,)
    c: float
    gamma: float
    n_classes: int


@njit(cache=True)
def _ovo_train(kernel, pair_idx, pair_cnt, pair_y, c, tol, max_iter,
               seed):                          # pragma: no cover - numba
    n_pairs, max_m = pair_idx.shape
    alphas = np.zeros((n_pairs, max_m))
    biases = np.zeros(n_pairs)
    for t in range(n_pairs):
        m = pair_cnt[t]
        sub_k = np.empty((m, m))
        for a in range(m):
            for b in range(m):
                sub_k[a, b] = kernel[pair_idx[t, a], pair_idx[t, b]]
        alpha, bias = _smo_solve(sub_k, pair_y[t, :m], c, tol, max_iter,
                                 seed * 1000003 + t)
        alphas[t, :m] = alpha
        biases[t] = bias
    return alphas, biases


@njit(cache=True)
def _ovo_decide(kernel_test, pairs, pair_idx, pair_cnt, pair_y, alphas,
                biases, n_classes):            # pragma: no cover - numba
    n = kernel_test.shape[0]
    votes = np.zeros((n, n_classes))
    scores = np.zeros((n, n_classes))
    for t in range(pairs.shape[0]):
        p, q = pairs[t, 0], pairs[t, 1]
        m = pair_cnt[t]
        for i in range(n):
            dec = biases[t]
            for a in range(m):
                dec += kernel_test[i, pair_idx[t, a]] \
                    * alphas[t, a] * pair_y[t, a]
            if dec >= 0.0:
                votes[i, p] += 1.0
            else:
                votes[i, q] += 1.0
            scores[i, p] += dec
            scores[i, q] -= dec
    return votes, scores


def _pair_tables(y: np.ndarray):
    """Index/label tables for every class pair present in the labels."""
    present = np.unique(y)
    if present.size < 2:
        raise ValueError("need at least two classes to train an SVM")
    pairs = [(int(p), int(q)) for i, p in enumerate(present)
             for q in present[i + 1:]]
    counts = [int(((y == p) | (y == q)).sum()) for p, q in pairs]
    max_m = max(counts)
    pair_idx = np.zeros((len(pairs), max_m), dtype=np.int64)
    pair_y = np.zeros((len(pairs), max_m))
    for t, (p, q) in enumerate(pairs):
        idx = np.flatnonzero((y == p) | (y == q))
        pair_idx[t, :idx.size] = idx
        pair_y[t, :idx.size] = np.where(y[idx] == p, 1.0, -1.0)
    return (np.array(pairs, dtype=np.int64), pair_idx,
            np.array(counts, dtype=np.int64), pair_y)


def svm_train(train_x: np.ndarray, train_y: np.ndarray, c: float,
              gamma: float, n_classes: int, seed: int = 0,
              kernel: np.ndarray | None = None) -> SvmModel:
    """One-vs-one RBF SVM; one SMO problem per class pair."""
    x = np.asarray(train_x, dtype=np.float64)
    y = np.asarray(train_y, dtype=np.int64)
    if kernel is None:
        kernel = rbf_kernel(x, x, gamma)
    pairs, pair_idx, pair_cnt, pair_y = _pair_tables(y)
    alphas, biases = _ovo_train(np.ascontiguousarray(kernel), pair_idx,
                                pair_cnt, pair_y, float(c), SVM_TOL,
                                20000, seed)
    return SvmModel(support=x, labels=y, pairs=pairs, pair_idx=pair_idx,
                    pair_cnt=pair_cnt, alphas=alphas, biases=biases,
                    c=float(c), gamma=float(gamma), n_classes=int(n_classes))


def svm_predict(model: SvmModel, test_x: np.ndarray,
                kernel: np.ndarray | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
    """Majority vote over pair decisions.

    Vote ties break by summed signed decision values, then lower class
    index; confidence rows are vote shares.
    """
    if kernel is None:
        x = np.asarray(test_x, dtype=np.float64)
        kernel = rbf_kernel(x, model.support, gamma=model.gamma)
    votes, scores = _ovo_decide(np.ascontiguousarray(kernel), model.pairs,
                                model.pair_idx, model.pair_cnt,
                                np.where(model.labels[model.pair_idx]
                                         == model.pairs[:, :1], 1.0, -1.0),
                                model.alphas, model.biases, model.n_classes)
    n = kernel.shape[0]
    order = np.arange(model.n_classes)
    # lexicographic: votes desc, score desc, class index asc
    key = np.lexsort((order[None, :].repeat(n, 0),
                      -scores, -votes), axis=1)
    pred = key[:, 0]
    conf = votes / np.maximum(votes.sum(axis=1, keepdims=True), 1.0)
    return pred, conf


# ---------------------------------------------------------------------------
# Hyper-parameter grid search

@dataclass(frozen=True)
class GridSearchResult:
    c: float
    gamma: float
    accuracy: float
    table: dict                   # (c, gamma) -> mean CV accuracy


def cross_validate_hyperparams(train_x: np.ndarray, train_y: np.ndarray,
                               n_classes: int, seed: int,
                               c_exponents=GRID_C_EXPONENTS,
                               gamma_exponents=GRID_GAMMA_EXPONENTS,
                               n_folds: int = INNER_FOLDS) -> GridSearchResult:
    """Pick (C, gamma) by stratified inner cross-validation accuracy.

    Accuracy ties prefer smaller C, then smaller gamma.
    """
    x = np.asarray(train_x, dtype=np.float64)
    y = np.asarray(train_y)
    folds = kfold_split(y, n_folds, seed)

    table = {}
    for ge in gamma_exponents:
        gamma = 2.0 ** ge
        full = rbf_kernel(x, x, gamma)
        for f in range(n_folds):
            tr = np.flatnonzero(folds != f)
            te = np.flatnonzero(folds == f)
            k_tr = full[np.ix_(tr, tr)]
            k_te = full[np.ix_(te, tr)]
            for ce in c_exponents:
                c = 2.0 ** ce
                model = svm_train(x[tr], y[tr], c, gamma, n_classes,
                                  seed=seed + f, kernel=k_tr)
                pred, _ = svm_predict(model, None, kernel=k_te)
                hit, tot = table.get((c, gamma), (0, 0))
                table[(c, gamma)] = (hit + int((pred == y[te]).sum()),
                                     tot + te.size)
    table = {key: hit / tot for key, (hit, tot) in table.items()}
    # best accuracy; ties prefer smaller C, then smaller gamma
    best_c, best_gamma = min(table, key=lambda k: (-table[k], k[0], k[1]))
    return GridSearchResult(c=best_c, gamma=best_gamma,
                            accuracy=table[(best_c, best_gamma)], table=table)


# ---------------------------------------------------------------------------
# Evaluation

@dataclass
class ConfusionMatrix:
    counts: np.ndarray            # (n_classes, n_classes) true x predicted
    confidence: np.ndarray        # per true class, mean confidence row

    def to_json(self, class_names) -> dict:
        return {
            "classes": list(class_names),
            "counts": self.counts.astype(int).tolist(),
            "confidence": [[round(float(v), 4) for v in row]
                           for row in self.confidence],
        }


def evaluate(true_y: np.ndarray, pred_y: np.ndarray, conf: np.ndarray,
             n_classes: int) -> tuple[float, ConfusionMatrix]:
    """Top-1 accuracy plus a confusion matrix with mean confidences."""
    true_y = np.asarray(true_y)
    pred_y = np.asarray(pred_y)
    counts = np.zeros((n_classes, n_classes))
    np.add.at(counts, (true_y, pred_y), 1)
    confidence = np.zeros((n_classes, n_classes))
    for cls in range(n_classes):
        rows = conf[true_y == cls]
        if rows.size:
            confidence[cls] = rows.mean(axis=0)
    accuracy = float((true_y == pred_y).mean())
    return accuracy, ConfusionMatrix(counts=counts, confidence=confidence)


# ---------------------------------------------------------------------------
# Model persistence

@dataclass
class TrainedModel:
    """A fitted classifier with its standardization and provenance."""
    algorithm: str                # "knn" or "svm"
    feature_kind: str
    class_names: list
    mean: np.ndarray
    std: np.ndarray
    train_x: np.ndarray           # standardized
    train_y: np.ndarray
    c: float = 0.0
    gamma: float = 0.0
    seed: int = 0
    dictionaries: dict = field(default_factory=dict)   # name -> Dictionary
    _svm: SvmModel | None = field(default=None, repr=False)

    def _ensure_svm(self) -> SvmModel:
        if self._svm is None:
            self._svm = svm_train(self.train_x, self.train_y, self.c,
                                  self.gamma, len(self.class_names),
                                  seed=self.seed)
        return self._svm

    def predict(self, raw_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = standardize_apply(raw_x, self.mean, self.std)
        if self.algorithm == "knn":
            return knn_predict(self.train_x, self.train_y, x,
                               len(self.class_names))
        if self.algorithm == "svm":
            return svm_predict(self._ensure_svm(), x)
        raise core.ConfigError(f"unknown algorithm {self.algorithm!r}")

    def save(self, path) -> None:
        meta = {
            "type": "model",
            "algorithm": self.algorithm,
            "feature_kind": self.feature_kind,
            "classes": list(self.class_names),
            "c": self.c,
            "gamma": self.gamma,
            "seed": self.seed,
            "dictionaries": {name: d.digest
                             for name, d in sorted(self.dictionaries.items())},
        }
        arrays = {
            "mean": self.mean, "std": self.std,
            "train_x": self.train_x,
            "train_y": self.train_y.astype(np.int64),
        }
        for name, d in self.dictionaries.items():
            arrays[f"dict_{name}"] = d.words
        core.save_arrays(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        meta, arrays = core.load_arrays(path)
        if meta.get("type") != "model":
            raise core.DecodeError("not a model file")
        dictionaries = {name: Dictionary(words=arrays[f"dict_{name}"],
                                         digest=digest)
                        for name, digest
                        in meta.get("dictionaries", {}).items()}
        return cls(algorithm=meta["algorithm"],
                   feature_kind=meta["feature_kind"],
                   class_names=list(meta["classes"]),
                   mean=arrays["mean"], std=arrays["std"],
                   train_x=arrays["train_x"], train_y=arrays["train_y"],
                   c=float(meta["c"]), gamma=float(meta["gamma"]),
                   seed=int(meta["seed"]), dictionaries=dictionaries)


def fit_model(algorithm: str, feature_kind: str, class_names,
              raw_x: np.ndarray, train_y: np.ndarray, seed: int = 0,
              c: float = 0.0, gamma: float = 0.0,
              grid_search: bool = False,
              dictionaries: dict | None = None) -> TrainedModel:
    """Standardize, optionally grid-search (SVM), and fit a classifier."""
    mean, std = standardize_fit(raw_x)
    x = standardize_apply(raw_x, mean, std)
    y = np.asarray(train_y, dtype=np.int64)
    if algorithm == "svm" and grid_search:
        result = cross_validate_hyperparams(x, y, len(class_names), seed)
        c, gamma = result.c, result.gamma
    model = TrainedModel(algorithm=algorithm, feature_kind=feature_kind,
                         class_names=list(class_names), mean=mean, std=std,
                         train_x=x, train_y=y, c=c, gamma=gamma, seed=seed,
                         dictionaries=dict(dictionaries or {}))
    if algorithm == "svm":
        model._ensure_svm()
    return model
