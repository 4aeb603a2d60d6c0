"""Layer-wise SHAP propagation (DeepSHAP) over compute graphs.

The backward pass carries, for every node, a multiplier per output unit:
the attribution flowing through that unit divided by its foreground minus
background difference.  Linear nodes pass multipliers through their weight
transpose.  Scalar nonlinearities explain themselves exactly at their own
input (Rescale) or, when fed directly by a linear node, explain the pair
with a positive/negative split of the linear inputs (RevealCancel).  Tree
ensembles are explained exactly with single-reference tree SHAP and their
attributions turned back into multipliers.

All computations are batched over the background set; the final
attribution is the mean of the per-background attributions.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .graph import (
    ComputeGraph,
    DimensionMismatchError,
    activation_fn,
    activation_grad,
    forward_batch,
    with_loss,
)
from .treeshap import tree_shap_single_reference


class NonFiniteOutputError(ValueError):
    pass


class StackError(ValueError):
    """The graph does not have the tree-headed stack layout."""


@dataclass(frozen=True)
class RuleConfig:
    """Propagation rule.

    ``threshold`` is only used by RevealCancel: ``"zero"``, ``"mean"`` (the
    mean of ``w_i * (f_i - b_i)`` over the inputs of each neuron) or a fixed
    float.
    """

    rule: str = "rescale"
    threshold: str | float = "zero"
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.rule not in ("rescale", "revealcancel"):
            raise ValueError(f"unknown rule {self.rule!r}")
        if not isinstance(self.threshold, (int, float)) and self.threshold not in ("zero", "mean"):
            raise ValueError(f"unknown threshold mode {self.threshold!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def tag(self) -> str:
        if self.rule == "rescale":
            return "rescale"
        if self.threshold == "zero":
            return "revealcancel"
        if self.threshold == "mean":
            return "revealcancel-mean"
        return f"revealcancel(t={float(self.threshold):g})"

    @classmethod
    def from_name(cls, name: str) -> "RuleConfig":
        try:
            return {"rescale": RESCALE, "revealcancel": REVEAL_CANCEL,
                    "revealcancel-mean": REVEAL_CANCEL_MEAN}[name]
        except KeyError:
            raise ValueError(f"unknown rule name {name!r}") from None


RESCALE = RuleConfig()
REVEAL_CANCEL = RuleConfig("revealcancel", "zero")
REVEAL_CANCEL_MEAN = RuleConfig("revealcancel", "mean")


@dataclass
class Attribution:
    phi: np.ndarray
    rule: str
    fx: float
    expected: float
    per_reference: np.ndarray | None = None
    fallbacks: tuple[str, ...] = ()
    n_references: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        """Local-accuracy residual ``sum(phi) - (f(fg) - mean f(b))``."""
        return math.fsum(self.phi.tolist()) - (self.fx - self.expected)


def _fsum_mean(rows: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(c) / rows.shape[0] for c in rows.T.tolist()])


# ---------------------------------------------------------------------------
# rules


def _rescale(fh, bh, fn, grad, epsilon):
    dh = fh - bh
    big = np.abs(dh) >= epsilon
    safe = np.where(big, dh, 1.0)
    return np.where(big, (fn(fh) - fn(bh)) / safe, grad(0.5 * (fh + bh)))


def rescale_multiplier(f_h, b_h, g: str = "relu", epsilon: float = 1e-6):
    """``(g(f_h) - g(b_h)) / (f_h - b_h)``, or ``g'`` at the midpoint when the gap is below epsilon."""
    out = _rescale(np.asarray(f_h, dtype=float), np.asarray(b_h, dtype=float),
                   activation_fn(g), activation_grad(g), epsilon)
    return out.item() if out.ndim == 0 else out


def _split_threshold(delta, threshold):
    if threshold == "zero":
        return 0.0
    if threshold == "mean":
        return delta.mean(axis=-1, keepdims=True)
    return float(threshold)


def reveal_cancel_contributions(weights, bias, g, x_f, x_b, threshold="zero", epsilon=1e-6,
                                h_f=None, h_b=None):
    """RevealCancel on a fused ``g(W x + bias)`` block.

    ``x_f`` is the foreground input vector, ``x_b`` a ``(n_refs, in)`` batch of
    references.  Returns contributions ``C[r, j, i]`` of input ``i`` to output
    neuron ``j`` under reference ``r``; summing over ``i`` gives
    ``g(f_h_j) - g(b_h_j)``.
    """
    W = np.asarray(weights, dtype=float)
    bias = np.asarray(bias, dtype=float)
    x_f = np.asarray(x_f, dtype=float)
    x_b = np.atleast_2d(np.asarray(x_b, dtype=float))
    if h_f is None:
        h_f = W @ x_f + bias
    if h_b is None:
        h_b = x_b @ W.T + bias
    delta = W[None, :, :] * (x_f[None, :] - x_b)[:, None, :]
    pos = delta > _split_threshold(delta, threshold)
    d_pos = np.where(pos, delta, 0.0).sum(-1)
    d_neg = np.where(pos, 0.0, delta).sum(-1)

    # hybrids: (h+ from fg, h- from bg) and (h+ from bg, h- from fg); bias sits in h_b
    g_ff, g_bb = g(h_f)[None, :], g(h_b)
    g_fb, g_bf = g(h_b + d_pos), g(h_b + d_neg)
    phi_pos = 0.5 * ((g_ff - g_bf) + (g_fb - g_bb))
    phi_neg = 0.5 * ((g_ff - g_fb) + (g_bf - g_bb))

    def share(phi_part, d_part, member):
        big = np.abs(d_part) >= epsilon
        ratio = phi_part / np.where(big, d_part, 1.0)
        scaled = ratio[..., None] * delta
        # ratio undefined: split proportionally to |delta| within the partition
        mag = np.where(member, np.abs(delta), 0.0)
        tot = mag.sum(-1, keepdims=True)
        prop = phi_part[..., None] * mag / np.where(tot > 0, tot, 1.0)
        return np.where(member, np.where(big[..., None], scaled, prop), 0.0)

    return share(phi_pos, d_pos, pos) + share(phi_neg, d_neg, ~pos)


# ---------------------------------------------------------------------------
# backward pass


def _node_input(graph: ComputeGraph, node_id: str, rec: dict) -> np.ndarray:
    prods = graph.producers(node_id)
    if len(prods) == 1:
        return rec[prods[0]]
    return np.concatenate([rec[p] for p in prods], axis=1)


def _scatter(graph: ComputeGraph, node_id: str, G: np.ndarray, mult: dict) -> None:
    """Add input-side multipliers ``G`` (n_refs x in) to the node's producers."""
    start = 0
    for p in graph.producers(node_id):
        d = graph.out_dim(p)
        mult[p] += G[:, start:start + d]
        start += d


def _propagate(graph: ComputeGraph, foreground, backgrounds, config: RuleConfig,
               output_index: int):
    fg = np.asarray(foreground, dtype=float).reshape(-1)
    B = np.atleast_2d(np.asarray(backgrounds, dtype=float))
    if fg.shape[0] != graph.input_dim or B.shape[1] != graph.input_dim:
        raise DimensionMismatchError(
            f"samples must have {graph.input_dim} features "
            f"(foreground {fg.shape[0]}, backgrounds {B.shape[1]})", graph.input_id)
    if not 0 <= output_index < graph.output_dim:
        raise IndexError(f"output index {output_index} out of range for dim {graph.output_dim}")
    nb = B.shape[0]
    rec = forward_batch(graph, np.vstack([fg[None, :], B]))
    out = rec[graph.output][:, output_index]
    if not np.all(np.isfinite(out)):
        raise NonFiniteOutputError("model output is not finite for the given samples")
    f = {k: v[0] for k, v in rec.items()}
    b = {k: v[1:] for k, v in rec.items()}

    mult = {n.id: np.zeros((nb, graph.out_dim(n.id))) for n in graph.nodes}
    mult[graph.output][:, output_index] = 1.0
    fallbacks: list[str] = []
    reveal = config.rule == "revealcancel"

    for node in reversed(graph.nodes):
        M = mult[node.id]
        if node.kind == "input" or not M.any():
            continue
        if node.kind == "linear":
            _scatter(graph, node.id, M @ node.weights, mult)
        elif node.is_scalar_nonlinearity:
            p = graph.producers(node.id)[0]
            pnode = graph.node(p)
            if reveal and pnode.kind == "linear":
                xf = _node_input(graph, p, {k: v[None] for k, v in f.items()})[0]
                xb = _node_input(graph, p, b)
                C = reveal_cancel_contributions(
                    pnode.weights, pnode.bias, node.scalar_fn(), xf, xb,
                    config.threshold, config.epsilon, h_f=f[p], h_b=b[p])
                dx = xf[None, :] - xb
                flow = np.einsum("rj,rji->ri", M, C)
                G = np.divide(flow, dx, out=np.zeros_like(flow), where=dx != 0)
                _scatter(graph, p, G, mult)
            else:
                if reveal:
                    fallbacks.append(node.id)
                r = _rescale(f[p][None, :], b[p], node.scalar_fn(), node.scalar_grad(),
                             config.epsilon)
                mult[p] += M * r
        elif node.kind == "tree_ensemble":
            p = graph.producers(node.id)[0]
            phi_t = np.array([tree_shap_single_reference(node, f[p], bj, check=False)
                              for bj in b[p]])
            dh = f[p][None, :] - b[p]
            # a tree has no derivative: identical inputs carry no attribution
            m = np.divide(phi_t, dh, out=np.zeros_like(phi_t), where=dh != 0)
            mult[p] += M[:, :1] * m
        else:
            raise ValueError(f"unsupported node kind {node.kind!r} at {node.id!r}")

    per_ref = mult[graph.input_id] * (fg[None, :] - B)
    return per_ref, float(out[0]), out[1:], tuple(dict.fromkeys(fallbacks))


# ---------------------------------------------------------------------------
# public API


def explain(graph: ComputeGraph, foreground, backgrounds, config: RuleConfig = RESCALE,
            output_index: int = 0, keep_per_reference: bool = False) -> Attribution:
    """DeepSHAP attribution of one foreground sample against a background set.

    Equivalent to averaging :func:`explain_single` over the backgrounds.
    """
    B = np.asarray(backgrounds, dtype=float)
    if B.size == 0:
        raise ValueError("background set is empty")
    B = np.atleast_2d(B)
    per_ref, fx, fb, fallbacks = _propagate(graph, foreground, B, config, output_index)
    return Attribution(
        phi=_fsum_mean(per_ref),
        rule=config.tag,
        fx=fx,
        expected=math.fsum(fb.tolist()) / len(fb),
        per_reference=per_ref if keep_per_reference else None,
        fallbacks=fallbacks,
        n_references=len(B),
    )


def explain_single(graph: ComputeGraph, foreground, background, config: RuleConfig = RESCALE,
                   output_index: int = 0) -> Attribution:
    """Attribution relative to a single reference sample."""
    bg = np.asarray(background, dtype=float).reshape(1, -1)
    return explain(graph, foreground, bg, config, output_index)


def explain_many(graph: ComputeGraph, X, backgrounds, config: RuleConfig = RESCALE,
                 output_index: int = 0, threads: int = 1) -> np.ndarray:
    """Attributions for every row of ``X``; rows are independent so they may run in threads."""
    X = np.atleast_2d(np.asarray(X, dtype=float))

    def one(x):
        return explain(graph, x, backgrounds, config, output_index).phi

    if threads <= 1 or len(X) < 2:
        return np.array([one(x) for x in X]).reshape(len(X), graph.input_dim)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.array(list(pool.map(one, X))).reshape(len(X), graph.input_dim)


def _check_stack(graph: ComputeGraph) -> None:
    trees = [n for n in graph.nodes if n.kind == "tree_ensemble"]
    if not trees:
        raise StackError("graph has no tree-ensemble node")
    for t in trees:
        tail = t.id
        # a loss on top of the tree head is allowed
        while tail != graph.output:
            cons = graph.consumers(tail)
            if len(cons) != 1 or graph.node(cons[0]).kind != "loss":
                raise StackError(f"tree ensemble {t.id!r} is not the terminal model node")
            tail = cons[0]


def explain_stack(graph: ComputeGraph, foreground, backgrounds, config: RuleConfig = RESCALE,
                  keep_per_reference: bool = False) -> Attribution:
    """Explain a network feature extractor feeding a tree-ensemble head."""
    _check_stack(graph)
    return explain(graph, foreground, backgrounds, config, 0, keep_per_reference)


def explain_loss(graph: ComputeGraph, foreground, backgrounds, kind: str, target: float,
                 config: RuleConfig = RESCALE, keep_per_reference: bool = False) -> Attribution:
    """Attribute ``loss(f(x), target)`` instead of the model output."""
    return explain(with_loss(graph, kind, target), foreground, backgrounds, config, 0,
                   keep_per_reference)

