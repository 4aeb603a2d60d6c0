"""Model-agnostic sampling estimators (KernelSHAP and IME) and a variance probe.

Both estimators only call the model's batched forward function.  Randomness
comes from ``numpy.random.Generator(PCG64(seed))``; all coalitions and
permutations are drawn up front on one thread so results depend only on the
seed.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .oracle import coalition_masks, model_fn

_BATCH_ROWS = 1 << 17


class SingularRegressionWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_samples: int
    seed: int = 0
    estimator: str = "kernel"

    def validate(self, n_features: int) -> None:
        if self.estimator not in ("kernel", "ime"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.estimator == "kernel" and self.n_samples < 2 * n_features + 2:
            raise ValueError(
                f"kernel estimator needs n_samples >= {2 * n_features + 2} "
                f"for {n_features} features, got {self.n_samples}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _prepare(model, foreground, backgrounds, output_index):
    f = model_fn(model, output_index)
    x = np.asarray(foreground, dtype=float).reshape(-1)
    B = np.atleast_2d(np.asarray(backgrounds, dtype=float))
    if B.size == 0:
        raise ValueError("background set is empty")
    if B.shape[1] != len(x):
        raise ValueError(f"backgrounds have {B.shape[1]} features, foreground has {len(x)}")
    return f, x, B


def _eval_rows(f, rows: np.ndarray) -> np.ndarray:
    out = np.empty(len(rows))
    for s in range(0, len(rows), _BATCH_ROWS):
        out[s:s + _BATCH_ROWS] = f(rows[s:s + _BATCH_ROWS])
    return out


def _coalition_values(f, x, B, masks: np.ndarray) -> np.ndarray:
    """Mean over backgrounds of f(hybrid) for each coalition row."""
    vals = np.zeros(len(masks))
    step = max(1, _BATCH_ROWS // len(B))
    for s in range(0, len(masks), step):
        m = masks[s:s + step]
        rows = np.where(m[:, None, :], x, B[None, :, :]).reshape(-1, len(x))
        vals[s:s + step] = f(rows).reshape(len(m), len(B)).mean(axis=1)
    return vals


# ---------------------------------------------------------------------------
# KernelSHAP


def shapley_kernel_weight(M: int, size: np.ndarray) -> np.ndarray:
    size = np.asarray(size)
    return (M - 1) / (np.vectorize(math.comb)(M, size) * size * (M - size))


def _solve_constrained(Z: np.ndarray, y: np.ndarray, w: np.ndarray, total: float):
    """Weighted least squares ``y ~ Z phi`` subject to ``sum(phi) == total``.

    The last coefficient is eliminated; returns None when the reduced system is
    rank deficient.
    """
    M = Z.shape[1]
    A = Z[:, :-1] - Z[:, -1:]
    t = y - Z[:, -1] * total
    sw = np.sqrt(w)
    Aw, tw = A * sw[:, None], t * sw
    if np.linalg.matrix_rank(Aw) < M - 1:
        return None
    coef, *_ = np.linalg.lstsq(Aw, tw, rcond=None)
    return np.append(coef, total - coef.sum())


def kernel_shap(model, foreground, backgrounds, config: SamplerConfig,
                output_index: int = 0, max_retries: int = 3) -> np.ndarray:
    """KernelSHAP estimate with the efficiency constraint imposed exactly.

    If ``n_samples`` covers every non-trivial coalition (``2**M - 2``) the
    regression runs over all of them with exact kernel weights and returns the
    exact SHAP values.  Otherwise coalition sizes are drawn in proportion to the
    total kernel weight of each size, members uniformly, and the regression is
    unweighted.
    """
    f, x, B = _prepare(model, foreground, backgrounds, output_index)
    M = len(x)
    config.validate(M)
    v0 = _coalition_values(f, x, B, np.zeros((1, M), dtype=bool))[0]
    v1 = _coalition_values(f, x, B, np.ones((1, M), dtype=bool))[0]
    total = v1 - v0
    if M == 1:
        return np.array([total])

    if config.n_samples >= (1 << M) - 2:
        Z = coalition_masks(M)[1:-1]
        w = shapley_kernel_weight(M, Z.sum(axis=1))
        y = _coalition_values(f, x, B, Z) - v0
        phi = _solve_constrained(Z.astype(float), y, w, total)
        if phi is None:  # pragma: no cover - the full design is always full rank
            raise np.linalg.LinAlgError("full coalition design is singular")
        return phi

    rng = make_rng(config.seed)
    sizes = np.arange(1, M)
    p = 1.0 / (sizes * (M - sizes))
    p /= p.sum()
    for attempt in range(max_retries + 1):
        s = rng.choice(sizes, size=config.n_samples, p=p)
        keys = rng.random((config.n_samples, M))
        # the s smallest keys in each row give a uniform subset of size s
        ranks = np.argsort(np.argsort(keys, axis=1), axis=1)
        Z = ranks < s[:, None]
        y = _coalition_values(f, x, B, Z) - v0
        phi = _solve_constrained(Z.astype(float), y, np.ones(len(Z)), total)
        if phi is not None:
            return phi
        if attempt < max_retries:
            warnings.warn("singular KernelSHAP design; re-drawing coalitions",
                          SingularRegressionWarning, stacklevel=2)
    raise np.linalg.LinAlgError(
        f"KernelSHAP design singular after {max_retries} re-draws; increase n_samples")


# ---------------------------------------------------------------------------
# IME (permutation sampling)


def _permutation_marginals(f, x, B_rows: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """Per-draw marginal contributions; row k walks perms[k] starting at B_rows[k]."""
    n, M = perms.shape
    out = np.zeros((n, M))
    step = max(1, _BATCH_ROWS // (M + 1))
    tri = np.tril(np.ones((M + 1, M), dtype=bool), -1)  # row s: first s positions switched
    for s in range(0, n, step):
        P = perms[s:s + step]
        m = len(P)
        switched = np.zeros((m, M + 1, M), dtype=bool)
        np.put_along_axis(switched, np.broadcast_to(P[:, None, :], (m, M + 1, M)),
                          np.broadcast_to(tri, (m, M + 1, M)), axis=2)
        rows = np.where(switched, x, B_rows[s:s + m, None, :]).reshape(-1, M)
        vals = f(rows).reshape(m, M + 1)
        diffs = np.diff(vals, axis=1)
        np.put_along_axis(out[s:s + m], P, diffs, axis=1)
    return out


def ime_shap(model, foreground, backgrounds, config: SamplerConfig,
             output_index: int = 0, exhaustive: bool = False) -> np.ndarray:
    """IME permutation-sampling estimate.

    Each draw pairs a uniformly random feature order with one background and
    records the marginal change of every feature as it is switched to its
    foreground value.  Backgrounds are assigned to draws in shuffled rounds so
    each is used equally often; the estimate averages per-background means,
    which keeps it unbiased and makes the attributions sum to
    ``f(x) - mean_b f(b)`` exactly once every background has been drawn.
    ``exhaustive=True`` walks all ``M! * |B|`` (order, background) pairs.
    """
    f, x, B = _prepare(model, foreground, backgrounds, output_index)
    M, nb = len(x), len(B)
    if exhaustive:
        perms = np.array(list(itertools.permutations(range(M))), dtype=np.int64)
        bidx = np.repeat(np.arange(nb), len(perms))
        perms = np.tile(perms, (nb, 1))
    else:
        config.validate(M)
        if config.n_samples < nb:
            raise ValueError(f"IME needs n_samples >= number of backgrounds ({nb})")
        rng = make_rng(config.seed)
        rounds = -(-config.n_samples // nb)
        bidx = np.concatenate([rng.permutation(nb) for _ in range(rounds)])[:config.n_samples]
        perms = np.argsort(rng.random((config.n_samples, M)), axis=1)
    contrib = _permutation_marginals(f, x, B[bidx], perms)
    per_bg = np.array([contrib[bidx == j].mean(axis=0) for j in range(nb)])
    return per_bg.mean(axis=0)


# ---------------------------------------------------------------------------
# variance probe

Estimator = Callable[[object, np.ndarray, np.ndarray, int, int], np.ndarray]


def kernel_estimator(model, x, B, n_samples, seed):
    return kernel_shap(model, x, B, SamplerConfig(n_samples, seed, "kernel"))


def ime_estimator(model, x, B, n_samples, seed):
    return ime_shap(model, x, B, SamplerConfig(n_samples, seed, "ime"))


@dataclass
class VarianceReport:
    sample_grid: list[int]
    attributions: dict[int, np.ndarray]  # n_samples -> (repeats, d)
    rank: int
    rank_flagged: bool
    std: dict[int, float] = field(default_factory=dict)

    def rows(self):
        for n in self.sample_grid:
            yield n, self.std[n]


def kth_largest_abs(phi: np.ndarray, k: int) -> np.ndarray:
    """k-th largest |phi| along the last axis (k counts from 1)."""
    return -np.sort(-np.abs(phi), axis=-1)[..., k - 1]


def variance_probe(estimator: Estimator, model, foreground, backgrounds,
                   sample_grid: Sequence[int], repeats: int = 10,
                   seeds: Sequence[int] | None = None, rank: int = 10) -> VarianceReport:
    """Spread of the ``rank``-th largest |phi| across repeated runs per sample count.

    ``seeds`` overrides the default repeat seeds ``0..repeats-1``.  With fewer
    than ``rank`` features the smallest available rank is used and flagged.
    """
    seeds = list(range(repeats)) if seeds is None else list(seeds)
    if len(seeds) < 2:
        raise ValueError("variance probe needs at least 2 repeats")
    x = np.asarray(foreground, dtype=float)
    B = np.atleast_2d(np.asarray(backgrounds, dtype=float))
    flagged = len(x) < rank
    k = min(rank, len(x))
    report = VarianceReport(list(sample_grid), {}, k, flagged)
    for n in report.sample_grid:
        runs = np.array([estimator(model, x, B, n, s) for s in seeds])
        report.attributions[n] = runs
        report.std[n] = float(np.std(kth_largest_abs(runs, k), ddof=1))
    return report
