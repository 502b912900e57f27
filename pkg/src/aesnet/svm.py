"""Soft-margin SVM baselines trained with SMO, balanced class weights and grid-searched C.

The solver follows the usual decomposition scheme: at each step pick the
maximal-violating index ``i`` and the partner ``j`` with the best
second-order gain, solve the two-variable subproblem analytically, update
the gradient, and stop once the KKT gap drops under ``tol``.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial.distance import cdist
from sklearn.model_selection import StratifiedKFold

from .asymmetry import feature_values
from .dataset import ImageSample, auxiliary_features
from .training import balanced_accuracy

TAU = 1e-12
C_GRID = tuple(1.25 ** e for e in range(-1, 31))
FORMAT_VERSION = 1


class ConvergenceError(RuntimeError):
    pass


def kernel_matrix(a: np.ndarray, b: np.ndarray, kernel: str, gamma: float) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if kernel == "linear":
        return a @ b.T
    if kernel == "rbf":
        return np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    raise ValueError(f"unknown kernel {kernel!r}")


def dual_objective(alpha: np.ndarray, y: np.ndarray, K: np.ndarray) -> float:
    """0.5 a^T Q a - sum(a), with Q_ij = y_i y_j K_ij."""
    ay = alpha * y
    return float(0.5 * ay @ K @ ay - alpha.sum())


def balanced_weights(y: np.ndarray) -> dict[int, float]:
    n = y.size
    out = {}
    for c in (-1, 1):
        nc = int(np.sum(y == c))
        if nc == 0:
            raise ValueError(f"class {c} has no samples")
        out[c] = n / (2.0 * nc)
    return out


@dataclass
class SvmModel:
    kernel: str
    gamma: float
    C: float
    class_C: dict[int, float]
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i for each support vector
    bias: float
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    alpha: np.ndarray | None = field(default=None, repr=False)
    iterations: int = 0

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]

    def transform(self, x: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return x
        return (x - self.mean) / self.scale

    def decision(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"feature dimension {x.shape[1]} != model dimension {self.dim}")
        K = kernel_matrix(self.transform(x), self.support_vectors, self.kernel, self.gamma)
        return K @ self.dual_coef + self.bias


def predict(model: SvmModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Labels in {-1, +1} (zero decision maps to +1) and decision values."""
    d = model.decision(x)
    return np.where(d >= 0, 1, -1), d


@njit(cache=True)
def _smo_loop(Q, y, C, tol, max_iter):
    n = y.size
    alpha = np.zeros(n)
    G = -np.ones(n)
    it = 0
    gap = np.inf
    while True:
        # i: maximal violator in I_up; gmin over I_low
        gmax, gmin, i = -np.inf, np.inf, -1
        for t in range(n):
            v = -y[t] * G[t]
            if (y[t] > 0 and alpha[t] < C[t]) or (y[t] < 0 and alpha[t] > 0):
                if v >= gmax:
                    gmax, i = v, t
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C[t]):
                if v < gmin:
                    gmin = v
        gap = gmax - gmin
        if i < 0 or gap < tol:
            return alpha, G, it, True, gap
        if it >= max_iter:
            return alpha, G, it, False, gap
        j, best = -1, np.inf
        for t in range(n):
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C[t]):
                diff = gmax + y[t] * G[t]
                if diff > 0:
                    quad = Q[i, i] + Q[t, t] - 2.0 * y[i] * y[t] * Q[i, t]
                    if quad <= 0:
                        quad = TAU
                    obj = -(diff * diff) / quad
                    if obj <= best:
                        best, j = obj, t
        if j < 0:
            return alpha, G, it, True, gap

        Ci, Cj = C[i], C[j]
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            qc = Q[i, i] + Q[j, j] + 2.0 * Q[i, j]
            if qc <= 0:
                qc = TAU
            delta = (-G[i] - G[j]) / qc
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > Ci - Cj:
                if ni > Ci:
                    ni, nj = Ci, Ci - diff
            elif nj > Cj:
                nj, ni = Cj, Cj + diff
        else:
            qc = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
            if qc <= 0:
                qc = TAU
            delta = (G[i] - G[j]) / qc
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > Ci:
                if ni > Ci:
                    ni, nj = Ci, total - Ci
            elif nj < 0:
                nj, ni = 0.0, total
            if total > Cj:
                if nj > Cj:
                    nj, ni = Cj, total - Cj
            elif ni < 0:
                ni, nj = 0.0, total
        di, dj = ni - ai, nj - aj
        for t in range(n):
            G[t] += Q[t, i] * di + Q[t, j] * dj
        alpha[i], alpha[j] = ni, nj
        it += 1


def smo_solve(K: np.ndarray, y: np.ndarray, Cvec: np.ndarray, tol: float = 1e-3,
              max_passes: int = 100_000) -> tuple[np.ndarray, float, int]:
    """Solve the SVM dual for a precomputed kernel; returns (alpha, bias, iterations).

    One pass is ``n`` pair updates, so the iteration cap is ``max_passes * n``.
    """
    n = y.size
    yf = y.astype(np.float64)
    pos = y > 0
    Q = np.ascontiguousarray(K * np.outer(yf, yf))
    alpha, G, it, ok, gap = _smo_loop(Q, yf, np.asarray(Cvec, dtype=np.float64), float(tol), max_passes * n)
    if not ok:
        raise ConvergenceError(f"SMO did not converge in {max_passes} passes ({it} updates, KKT gap {gap:.3e})")

    # bias from free vectors, else midpoint of the feasible interval
    yg = yf * G
    free = (alpha > 0) & (alpha < Cvec)
    if free.any():
        rho = float(yg[free].mean())
    else:
        at_up = alpha >= Cvec
        at_low = alpha <= 0
        ub_mask = (at_up & ~pos) | (at_low & pos)
        lb_mask = (at_up & pos) | (at_low & ~pos)
        ub = yg[ub_mask].min() if ub_mask.any() else np.inf
        lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
        rho = float((ub + lb) / 2) if np.isfinite(ub) and np.isfinite(lb) else float(ub if np.isfinite(ub) else lb)
    return alpha, -rho, it


def smo_train(features, labels, kernel: str = "linear", C: float = 1.0, gamma: float = 3.0,
              class_weights: dict[int, float] | str | None = "balanced", standardize: bool = True,
              tol: float = 1e-3, max_passes: int = 100_000) -> SvmModel:
    """Fit a soft-margin SVM; labels must be -1/+1. Box constraint for class c is C * w_c."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("features must be (n, d) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if not set(np.unique(y)) <= {-1, 1}:
        raise ValueError("labels must be -1 or +1")
    for c in (-1, 1):
        if not np.any(y == c):
            raise ValueError(f"class {c} has no samples")
    if class_weights == "balanced":
        weights = balanced_weights(y)
    elif class_weights is None:
        weights = {-1: 1.0, 1: 1.0}
    else:
        weights = dict(class_weights)
    mean = scale = None
    if standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        X = (X - mean) / scale
    K = kernel_matrix(X, X, kernel, gamma)
    Cvec = np.where(y > 0, C * weights[1], C * weights[-1])
    alpha, b, it = smo_solve(K, y, Cvec, tol, max_passes)
    sv = alpha > 0
    return SvmModel(kernel, gamma, C, {c: C * w for c, w in weights.items()}, X[sv], (alpha * y)[sv], b,
                    mean, scale, alpha, it)


# -------------------------------------------------------------- model selection

@dataclass
class CvSpec:
    folds: int = 5
    grid: tuple[float, ...] = C_GRID
    gamma: float = 3.0
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("need at least two folds")
        if not self.grid:
            raise ValueError("empty C grid")


def fold_assignment(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    y = np.asarray(labels)
    out = np.empty(y.size, dtype=int)
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    for f, (_, test) in enumerate(skf.split(np.zeros(y.size), y)):
        out[test] = f
    return out


def cv_select(features, labels, kernel: str, spec: CvSpec = CvSpec()) -> dict:
    """Mean fold balanced accuracy for every C; best is the max, ties go to the smaller C."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    for c in (-1, 1):
        if np.sum(y == c) < spec.folds:
            raise ValueError(f"class {c} has fewer samples than folds; some fold would contain a single class")
    assign = fold_assignment(y, spec.folds, spec.seed)
    for f in range(spec.folds):
        for part in (assign == f, assign != f):
            if len(np.unique(y[part])) < 2:
                raise ValueError(f"fold {f} contains a single class")
    scores = []
    for C in spec.grid:
        fold_scores = []
        for f in range(spec.folds):
            tr, te = assign != f, assign == f
            m = smo_train(X[tr], y[tr], kernel, C, spec.gamma, "balanced", spec.standardize)
            pred, _ = predict(m, X[te])
            fold_scores.append(balanced_accuracy((pred > 0).astype(float), (y[te] > 0).astype(int)))
        scores.append(float(np.mean(fold_scores)))
    best = max(range(len(spec.grid)), key=lambda k: (scores[k], -spec.grid[k]))
    return {"best_C": spec.grid[best], "scores": scores, "grid": list(spec.grid),
            "evaluated": len(scores), "folds": assign}


# ------------------------------------------------------------------ features

def annotated_keypoints(samples: list[ImageSample], noise_px: float = 1.0, seed: int = 0) -> np.ndarray:
    """Ground-truth keypoints jittered by isotropic Gaussian annotation error of ``noise_px`` pixels."""
    out = np.zeros((len(samples), 8))
    for n, s in enumerate(samples):
        h, w = s.pixels.shape[:2]
        extents = np.array([w, h, w, h, w, h, h, h], dtype=np.float64)
        rng = np.random.default_rng([seed, zlib.crc32(s.id.encode())])
        jitter = rng.normal(0.0, 1.0, 8) * noise_px / extents
        out[n] = np.clip(np.asarray(s.keypoints) + jitter, 0.0, 1.0)
    return out


def baseline_features(samples: list[ImageSample], n_features: int = 4, noise_px: float = 1.0,
                      seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(features, labels in {-1,+1}); 7 features append the area/length/colour stand-ins to the core 4."""
    if n_features not in (4, 7):
        raise ValueError(f"n_features must be 4 or 7, got {n_features}")
    kp = annotated_keypoints(samples, noise_px, seed)
    X = np.array([feature_values(k) for k in kp]).reshape(-1, 4)
    if n_features == 7:
        aux = np.array([auxiliary_features(s.geometry, s.pixels) for s in samples]).reshape(-1, 3)
        X = np.hstack([X, aux])
    y = np.array([1 if s.target == 1 else -1 for s in samples], dtype=int)
    return X, y


# ------------------------------------------------------------------------ IO

def write_feature_csv(path: str | Path, ids, features: np.ndarray, labels) -> None:
    features = np.asarray(features)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"f{k + 1}" for k in range(features.shape[1])] + ["label"])
        for sid, row, lab in zip(ids, features, labels):
            w.writerow([sid] + [repr(float(v)) for v in row] + [int(lab)])


def read_feature_csv(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    nf = len(header) - 2
    ids = [r[0] for r in body]
    X = np.array([[float(v) for v in r[1:1 + nf]] for r in body]).reshape(-1, nf)
    y = np.array([int(r[-1]) for r in body])
    return ids, X, y


def save_model(model: SvmModel, path: str | Path) -> None:
    lines = [f"aesnet-svm {FORMAT_VERSION}", f"kernel {model.kernel}", f"gamma {model.gamma!r}",
             f"C {model.C!r}", f"class_C {model.class_C[-1]!r} {model.class_C[1]!r}", f"bias {model.bias!r}"]
    if model.mean is not None:
        lines.append("mean " + " ".join(repr(float(v)) for v in model.mean))
        lines.append("scale " + " ".join(repr(float(v)) for v in model.scale))
    lines.append(f"sv {len(model.dual_coef)} {model.dim}")
    for coef, sv in zip(model.dual_coef, model.support_vectors):
        lines.append(" ".join(repr(float(v)) for v in (coef, *sv)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path: str | Path) -> SvmModel:
    lines = Path(path).read_text().splitlines()
    magic, version = lines[0].split()
    if magic != "aesnet-svm" or int(version) != FORMAT_VERSION:
        raise ValueError(f"unsupported SVM model file header {lines[0]!r}")
    kv = {}
    k = 1
    while not lines[k].startswith("sv "):
        key, _, rest = lines[k].partition(" ")
        kv[key] = rest
        k += 1
    _, nsv, dim = lines[k].split()
    rows = np.array([[float(v) for v in ln.split()] for ln in lines[k + 1:k + 1 + int(nsv)]]).reshape(-1, int(dim) + 1)
    cn, cp = (float(v) for v in kv["class_C"].split())
    vec = (lambda s: np.array([float(v) for v in s.split()])) if "mean" in kv else None
    return SvmModel(kv["kernel"], float(kv["gamma"]), float(kv["C"]), {-1: cn, 1: cp}, rows[:, 1:], rows[:, 0],
                    float(kv["bias"]), vec(kv["mean"]) if vec else None, vec(kv["scale"]) if vec else None)
