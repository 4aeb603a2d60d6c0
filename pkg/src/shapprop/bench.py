"""Desk-scale benchmarks: Corrgroups60 data, a network-into-trees stack,
keep-absolute (mask) ablation curves and the RevealCancel toy study.

The fitting helpers here are deliberately small; the models only need to
learn the signal, not match any reported accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import engine, oracle
from .graph import (
    ComputeGraph,
    Tree,
    activation_node,
    chain,
    linear_node,
    tree_ensemble_node,
)
from .samplers import make_rng

# ---------------------------------------------------------------------------
# Corrgroups60


@dataclass(frozen=True)
class CorrgroupsSpec:
    n: int = 1000
    d: int = 60
    rho: float = 0.99
    noise_var: float = 1e-4
    seed: int = 0
    exact_moments: bool = True

    def __post_init__(self):
        if self.d % 3 or self.d <= 0:
            raise ValueError(f"d must be a positive multiple of 3, got {self.d}")
        if not 0 <= self.rho < 1:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.n <= self.d and self.exact_moments:
            raise ValueError("exact_moments needs n > d")


def corrgroups_cov(d: int, rho: float) -> np.ndarray:
    """Block-diagonal correlation matrix with correlated feature triples."""
    C = np.eye(d)
    for i in range(0, d, 3):
        C[i:i + 3, i:i + 3] = rho
    np.fill_diagonal(C, 1.0)
    return C


def corrgroups_beta(d: int) -> np.ndarray:
    return (np.arange(d) % 3 == 0).astype(float)


def gen_corrgroups(spec: CorrgroupsSpec = CorrgroupsSpec()) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(X, y)`` with triple-correlated Gaussian features and ``y = X beta + eps``.

    With ``exact_moments`` (default) the standard-normal draw is centred and
    whitened before colouring, so the sample covariance equals the target
    correlation matrix exactly.
    """
    C = corrgroups_cov(spec.d, spec.rho)
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"correlation matrix for rho={spec.rho} is not positive definite") from exc
    rng = make_rng(spec.seed)
    Z = rng.standard_normal((spec.n, spec.d))
    if spec.exact_moments:
        Z = Z - Z.mean(axis=0)
        S = Z.T @ Z / spec.n
        Z = Z @ np.linalg.inv(np.linalg.cholesky(S)).T
    X = Z @ L.T
    y = X @ corrgroups_beta(spec.d) + rng.standard_normal(spec.n) * math.sqrt(spec.noise_var)
    return X, y


# ---------------------------------------------------------------------------
# fitting utilities


def ridge(X, y, lam: float = 1e-3) -> tuple[np.ndarray, float]:
    """Ridge regression with an unpenalised intercept."""
    X, y = np.asarray(X, dtype=float), np.asarray(y, dtype=float)
    mx, my = X.mean(axis=0), y.mean()
    Xc = X - mx
    w = np.linalg.solve(Xc.T @ Xc + lam * np.eye(X.shape[1]), Xc.T @ (y - my))
    return w, float(my - mx @ w)


def fit_cart(X, y, max_depth: int = 3, min_leaf: int = 5) -> Tree:
    """Greedy least-squares regression tree (thresholds at midpoints)."""
    X, y = np.asarray(X, dtype=float), np.asarray(y, dtype=float)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            arr.append(v)
        return len(feature) - 1

    def best_split(idx):
        best = (0.0, None, None)
        ys = y[idx]
        base = ((ys - ys.mean()) ** 2).sum()
        n = len(idx)
        for j in range(X.shape[1]):
            order = np.argsort(X[idx, j], kind="stable")
            xs, yo = X[idx, j][order], ys[order]
            cs, cs2 = np.cumsum(yo), np.cumsum(yo ** 2)
            k = np.arange(min_leaf, n - min_leaf + 1)
            if len(k) == 0:
                continue
            k = k[xs[k - 1] < xs[np.minimum(k, n - 1)]]
            if len(k) == 0:
                continue
            sse_l = cs2[k - 1] - cs[k - 1] ** 2 / k
            sse_r = (cs2[-1] - cs2[k - 1]) - (cs[-1] - cs[k - 1]) ** 2 / (n - k)
            gain = base - sse_l - sse_r
            a = int(np.argmax(gain))
            if gain[a] > best[0] + 1e-12:
                best = (gain[a], j, 0.5 * (xs[k[a] - 1] + xs[k[a]]))
        return best[1], best[2]

    def grow(idx, depth):
        nid = new_node()
        value[nid] = float(y[idx].mean())
        if depth < max_depth and len(idx) >= 2 * min_leaf:
            j, t = best_split(idx)
            if j is not None:
                go_left = X[idx, j] <= t
                feature[nid], threshold[nid] = j, t
                left[nid] = grow(idx[go_left], depth + 1)
                right[nid] = grow(idx[~go_left], depth + 1)
        return nid

    grow(np.arange(len(y)), 0)
    leaf = np.array(left) < 0
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                np.where(leaf, np.array(value), 0.0))


def fit_boosted_trees(X, y, n_trees: int = 50, max_depth: int = 3, learning_rate: float = 0.1,
                      min_leaf: int = 5) -> list[Tree]:
    """Gradient boosting for squared error; learning rate and base score folded into leaves."""
    X, y = np.asarray(X, dtype=float), np.asarray(y, dtype=float)
    base = float(y.mean())
    pred = np.full(len(y), base)
    trees = []
    for k in range(n_trees):
        t = fit_cart(X, y - pred, max_depth, min_leaf)
        leaf = t.left < 0
        v = np.where(leaf, t.value * learning_rate + (base if k == 0 else 0.0), 0.0)
        t = Tree(t.feature, t.threshold, t.left, t.right, v)
        pred = pred + t.predict(X) - (base if k == 0 else 0.0)
        trees.append(t)
    return trees


def fit_extractor(X, y, hidden: int = 8, seed: int = 0, lam: float = 1e-3):
    """First layer of a small ReLU feature extractor.

    Two units carry the positive and negative part of the ridge fit, the rest
    are random projections.  Returns ``(weights, bias)``.
    """
    if hidden < 2:
        raise ValueError("extractor needs at least 2 hidden units")
    w, c = ridge(X, y, lam)
    rng = make_rng(seed)
    d = X.shape[1]
    rand = rng.standard_normal((hidden - 2, d)) / math.sqrt(d)
    W = np.vstack([w, -w, rand])
    b = np.concatenate([[c, -c], np.zeros(hidden - 2)])
    return W, b


def build_stack(W, b, trees) -> ComputeGraph:
    """``x -> linear -> relu -> tree ensemble``."""
    return chain(np.shape(W)[1], linear_node("hidden", W, b), activation_node("relu", "relu"),
                 tree_ensemble_node("trees", trees))


def fit_stack(X, y, hidden: int = 8, n_trees: int = 50, max_depth: int = 3,
              learning_rate: float = 0.1, seed: int = 0) -> ComputeGraph:
    W, b = fit_extractor(X, y, hidden, seed)
    H = np.maximum(X @ W.T + b, 0.0)
    return build_stack(W, b, fit_boosted_trees(H, y, n_trees, max_depth, learning_rate))


def kmeans(X, k: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm from ``k`` distinct rows chosen with the seeded generator."""
    X = np.asarray(X, dtype=float)
    if not 0 < k <= len(X):
        raise ValueError(f"k must be in 1..{len(X)}, got {k}")
    rng = make_rng(seed)
    centers = X[rng.choice(len(X), size=k, replace=False)].copy()
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = d2.argmin(axis=1)
        new = centers.copy()
        for j in range(k):
            members = X[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


# ---------------------------------------------------------------------------
# keep absolute (mask)


def r_squared(y, pred) -> float:
    y, pred = np.asarray(y, dtype=float), np.asarray(pred, dtype=float)
    ss_tot = ((y - y.mean()) ** 2).sum()
    return float(1.0 - ((y - pred) ** 2).sum() / ss_tot)


@dataclass
class AblationCurve:
    method: str
    features_kept: np.ndarray
    r_squared: np.ndarray

    def auc(self) -> float:
        """Trapezoid area under R^2 vs fraction of features kept."""
        x = self.features_kept / self.features_kept[-1]
        r = self.r_squared
        return float(np.sum((r[1:] + r[:-1]) * np.diff(x)) / 2.0)

    def rows(self):
        return zip(self.features_kept.tolist(), self.r_squared.tolist())


def keep_absolute_mask(predict: Callable[[np.ndarray], np.ndarray], attributions, X_test, y_test,
                       means, method: str = "") -> AblationCurve:
    """R^2 as features are unmasked per sample in order of decreasing |phi|.

    Masked features take the (training) ``means``; step 0 masks everything.
    Ties in |phi| are broken by feature index.
    """
    A = np.asarray(attributions, dtype=float)
    X = np.asarray(X_test, dtype=float)
    y = np.asarray(y_test, dtype=float).reshape(-1)
    means = np.asarray(means, dtype=float).reshape(-1)
    if A.shape != X.shape:
        raise ValueError(f"attributions {A.shape} do not match X_test {X.shape}")
    if len(y) != len(X) or len(means) != X.shape[1]:
        raise ValueError("y_test / means lengths do not match X_test")
    n, d = X.shape
    order = np.argsort(-np.abs(A), axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(d)[None, :].repeat(n, 0), axis=1)
    steps = np.arange(d + 1)
    batch = np.where(rank[None, :, :] < steps[:, None, None], X[None], means[None, None, :])
    preds = np.asarray(predict(batch.reshape(-1, d)), dtype=float).reshape(d + 1, n)
    return AblationCurve(method, steps, np.array([r_squared(y, p) for p in preds]))


# ---------------------------------------------------------------------------
# RevealCancel toy study

TOY_RULES = {
    "rescale": engine.RESCALE,
    "revealcancel": engine.REVEAL_CANCEL,
    "revealcancel-mean": engine.REVEAL_CANCEL_MEAN,
}


def toy_graph(n_features: int = 4, bias: float = 100.0) -> ComputeGraph:
    return chain(n_features, linear_node("h", [[1.0] * n_features], [bias]),
                 activation_node("g", "relu"))


@dataclass
class ToyStudy:
    seed: int
    foregrounds: np.ndarray
    errors: dict[str, np.ndarray] = field(default_factory=dict)  # rule -> per-sample MAE

    def aggregate(self) -> dict[str, float]:
        return {r: float(e.mean()) for r, e in self.errors.items()}


def toy_revealcancel_study(seed: int = 0, n_samples: int = 100, low: int = -1000,
                           high: int = 1000) -> ToyStudy:
    """Mean |phi - exact| per foreground for ReLU(x1+x2+x3+x4+100) against a zero background."""
    g = toy_graph()
    rng = make_rng(seed)
    fgs = rng.integers(low, high, size=(n_samples, 4), endpoint=True).astype(float)
    bg = np.zeros((1, 4))
    study = ToyStudy(seed, fgs, {r: np.empty(n_samples) for r in TOY_RULES})
    for k, x in enumerate(fgs):
        exact = oracle.shapley_single_reference(g, x, bg[0])
        for name, cfg in TOY_RULES.items():
            phi = engine.explain(g, x, bg, cfg).phi
            study.errors[name][k] = np.abs(phi - exact).mean()
    return study


# ---------------------------------------------------------------------------
# stack experiment


@dataclass
class StackReport:
    curves: dict[str, AblationCurve]
    attributions: dict[str, np.ndarray]
    train_means: np.ndarray
    test_r2: float

    def group_mean_abs(self, method: str = "deepshap-rescale") -> tuple[float, float]:
        """Mean |phi| over features with index % 3 == 0 and over the rest."""
        A = np.abs(self.attributions[method])
        sel = np.arange(A.shape[1]) % 3 == 0
        return float(A[:, sel].mean()), float(A[:, ~sel].mean())


def run_stack_ablation(spec: CorrgroupsSpec = CorrgroupsSpec(), n_train: int = 800,
                       n_test: int = 100, n_background: int = 20, seed: int = 0,
                       config: engine.RuleConfig = engine.RESCALE) -> StackReport:
    """Fit an MLP-into-trees stack on Corrgroups data, explain it, and ablate."""
    X, y = gen_corrgroups(spec)
    Xtr, ytr = X[:n_train], y[:n_train]
    Xte, yte = X[n_train:n_train + n_test], y[n_train:n_train + n_test]
    graph = fit_stack(Xtr, ytr, seed=seed)
    background = kmeans(Xtr, n_background, seed=seed)
    means = Xtr.mean(axis=0)
    deep = engine.explain_many(graph, Xte, background, config)
    rand = make_rng(seed + 1).standard_normal(deep.shape)
    attributions = {"deepshap-" + config.tag: deep, "random": rand}
    curves = {m: keep_absolute_mask(graph, a, Xte, yte, means, m) for m, a in attributions.items()}
    return StackReport(curves, attributions, means, r_squared(yte, graph(Xte)))
