"""Exact single-reference (interventional) SHAP values for decision trees.

With one foreground ``x`` and one reference ``r`` the hybrid sample can only
follow paths on which every split sends it either the way ``x`` goes or the
way ``r`` goes.  Walking the tree once and branching only where ``x`` and
``r`` disagree on a not-yet-fixed feature enumerates every reachable leaf
together with the feature sets ``A`` (must come from ``x``) and ``B`` (must
come from ``r``) that reach it.  The leaf is reached by coalition ``S`` iff
``A <= S`` and ``S & B`` is empty, a game whose Shapley values are::

    i in A:  +v (|A|-1)! |B|! / (|A|+|B|)!
    i in B:  -v |A|! (|B|-1)! / (|A|+|B|)!

Cost is O(leaves * depth) per tree, independent of the number of features.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Iterable

import numpy as np

from .graph import ModelFormatError, Node, Tree

MAX_DEPTH = 32
MAX_INPUT_DIM = 10_000


@lru_cache(maxsize=None)
def _leaf_weights(a: int, b: int) -> tuple[float, float]:
    tot = math.factorial(a + b)
    pos = math.factorial(a - 1) * math.factorial(b) / tot if a else 0.0
    neg = math.factorial(a) * math.factorial(b - 1) / tot if b else 0.0
    return pos, neg


def _trees(ensemble) -> tuple[Tree, ...]:
    if isinstance(ensemble, Tree):
        return (ensemble,)
    if isinstance(ensemble, Node):
        if ensemble.kind != "tree_ensemble":
            raise ModelFormatError(f"node {ensemble.id!r} is not a tree ensemble")
        return ensemble.trees
    return tuple(ensemble)


def _single_tree(tree: Tree, x: np.ndarray, r: np.ndarray, phi: np.ndarray) -> None:
    feature, thr = tree.feature, tree.threshold
    left, right, value = tree.left, tree.right, tree.value
    # (node, features fixed to x, features fixed to r)
    stack: list[tuple[int, tuple, tuple]] = [(0, (), ())]
    while stack:
        node, A, B = stack.pop()
        if left[node] < 0:
            if A or B:
                wp, wn = _leaf_weights(len(A), len(B))
                v = value[node]
                for i in A:
                    phi[i] += v * wp
                for i in B:
                    phi[i] -= v * wn
            continue
        f = feature[node]
        x_child = left[node] if x[f] <= thr[node] else right[node]
        r_child = left[node] if r[f] <= thr[node] else right[node]
        if f in A:
            stack.append((x_child, A, B))
        elif f in B:
            stack.append((r_child, A, B))
        elif x_child == r_child:
            stack.append((x_child, A, B))
        else:
            stack.append((x_child, A + (f,), B))
            stack.append((r_child, A, B + (f,)))


def _validate(trees: Iterable[Tree], dim: int) -> None:
    if dim > MAX_INPUT_DIM:
        raise ValueError(f"tree input dim {dim} exceeds {MAX_INPUT_DIM}")
    for t in trees:
        if t.depth() > MAX_DEPTH:
            raise ModelFormatError(f"tree depth {t.depth()} exceeds {MAX_DEPTH}")
        if t.max_feature() >= dim:
            raise ModelFormatError(f"tree splits on feature {t.max_feature()} >= input dim {dim}")


def tree_shap_single_reference(ensemble, foreground, background, check: bool = True) -> np.ndarray:
    """SHAP values of a sum-of-trees model for one foreground/reference pair.

    ``ensemble`` may be a :class:`Tree`, a tree-ensemble :class:`Node` or an
    iterable of trees.  The result is additive over trees and sums to
    ``T(foreground) - T(background)``.
    """
    x = np.asarray(foreground, dtype=float)
    r = np.asarray(background, dtype=float)
    if x.shape != r.shape or x.ndim != 1:
        raise ValueError(f"foreground {x.shape} and background {r.shape} must be equal-length vectors")
    trees = _trees(ensemble)
    if check:
        _validate(trees, len(x))
    phi = np.zeros(len(x))
    for t in trees:
        _single_tree(t, x, r, phi)
    return phi


def tree_shap(ensemble, foreground, backgrounds) -> np.ndarray:
    """Single-reference tree SHAP averaged over a background set."""
    B = np.atleast_2d(np.asarray(backgrounds, dtype=float))
    per_ref = np.array([tree_shap_single_reference(ensemble, foreground, b) for b in B])
    return np.array([math.fsum(c) / len(B) for c in per_ref.T.tolist()])
