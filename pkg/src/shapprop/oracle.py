"""Exact interventional Shapley values by subset enumeration.

These are the reference values every other estimator is checked against.
The cost is ``2**n`` model evaluations per reference, so enumeration is
refused above :data:`MAX_FEATURES`.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .graph import ComputeGraph

MAX_FEATURES = 20
_CHUNK = 1 << 16


class EnumerationTooLarge(ValueError):
    pass


def model_fn(model, output_index: int = 0):
    """Turn a graph (or any batched callable) into ``X -> (n_rows,)`` outputs."""
    if isinstance(model, ComputeGraph):
        return lambda X: model(np.atleast_2d(X), output_index)
    return lambda X: np.asarray(model(np.atleast_2d(X)), dtype=float).reshape(-1)


@lru_cache(maxsize=None)
def shapley_weights(n: int) -> np.ndarray:
    """``W(s, n) = s! (n-s-1)! / n!`` for ``s = 0..n-1``, via log-gamma."""
    s = np.arange(n)
    logw = np.array([math.lgamma(k + 1) + math.lgamma(n - k) - math.lgamma(n + 1) for k in s])
    w = np.exp(logw)
    w.setflags(write=False)
    return w


def coalition_masks(n: int, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Coalitions ``start..stop-1`` (default all ``2**n``) as boolean rows; row k encodes bits of k."""
    k = np.arange(start, (1 << n) if stop is None else stop, dtype=np.int64)
    return ((k[:, None] >> np.arange(n)) & 1).astype(bool)


def hybrid(foreground, background, mask) -> np.ndarray:
    """Sample(s) taking foreground values on ``mask`` and background values elsewhere."""
    return np.where(mask, foreground, background)


def _check_dims(n: int):
    if n > MAX_FEATURES:
        raise EnumerationTooLarge(
            f"exact enumeration needs 2**{n} model evaluations; limit is {MAX_FEATURES} "
            "features. Use engine.explain or the sampling estimators instead.")


def _set_values(f, foreground, backgrounds) -> np.ndarray:
    """v[k] = mean over backgrounds of f(hybrid(fg, b, coalition k))."""
    n = len(foreground)
    total = 1 << n
    out = np.empty((len(backgrounds), total))
    for start in range(0, total, _CHUNK):
        masks = coalition_masks(n, start, min(start + _CHUNK, total))
        for j, b in enumerate(backgrounds):
            out[j, start:start + len(masks)] = f(hybrid(foreground, b, masks))
    return out


def shapley_from_values(v: np.ndarray, n: int) -> np.ndarray:
    """Shapley values of a set function given as ``v[bitmask]``."""
    w = shapley_weights(n)
    k = np.arange(1 << n, dtype=np.int64)
    size = np.zeros(len(k), dtype=np.int64)
    for i in range(n):
        size += (k >> i) & 1
    phi = np.empty(n)
    for i in range(n):
        without = k[((k >> i) & 1) == 0]
        terms = w[size[without]] * (v[without | (1 << i)] - v[without])
        phi[i] = math.fsum(terms.tolist())
    return phi


def shapley_single_reference(model, foreground, background, output_index: int = 0) -> np.ndarray:
    """Exact Shapley values of ``S -> f(hybrid(fg, bg, S))``."""
    fg = np.asarray(foreground, dtype=float)
    bg = np.asarray(background, dtype=float)
    _check_dims(len(fg))
    v = _set_values(model_fn(model, output_index), fg, [bg])[0]
    return shapley_from_values(v, len(fg))


def interventional_value(model, foreground, backgrounds, mask, output_index: int = 0) -> float:
    """``E_b f(hybrid(fg, b, S))`` over the background set."""
    f = model_fn(model, output_index)
    B = np.atleast_2d(np.asarray(backgrounds, dtype=float))
    vals = f(hybrid(np.asarray(foreground, dtype=float), B, np.asarray(mask, dtype=bool)))
    return math.fsum(vals.tolist()) / len(B)


def shapley_background(model, foreground, backgrounds, output_index: int = 0,
                       method: str = "average") -> np.ndarray:
    """Exact SHAP values relative to a background set.

    ``method="average"`` averages single-reference values over the backgrounds;
    ``method="interventional"`` enumerates the set function whose value is the
    interventional expectation over the whole background set.  The two agree.
    """
    fg = np.asarray(foreground, dtype=float)
    B = np.atleast_2d(np.asarray(backgrounds, dtype=float))
    if B.shape[0] == 0 or np.asarray(backgrounds).size == 0:
        raise ValueError("background set is empty")
    if B.shape[1] != len(fg):
        raise ValueError(f"backgrounds have {B.shape[1]} features, foreground has {len(fg)}")
    n = len(fg)
    _check_dims(n)
    v = _set_values(model_fn(model, output_index), fg, list(B))
    if method == "average":
        per_ref = np.array([shapley_from_values(row, n) for row in v])
        return np.array([math.fsum(col) / len(B) for col in per_ref.T.tolist()])
    if method == "interventional":
        mean_v = np.array([math.fsum(col) / len(B) for col in v.T.tolist()])
        return shapley_from_values(mean_v, n)
    raise ValueError(f"unknown method {method!r}")
