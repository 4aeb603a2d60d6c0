"""Compute-graph models: node kinds, forward evaluation and the JSON model format.

A model is a DAG of typed nodes.  Exactly one ``input`` node carries the raw
features; every other node reads the outputs of its producers through
numbered input slots.  Only ``linear`` nodes take more than one slot (their
slot vectors are concatenated in slot order, which is how skip connections
are expressed).  The node list is kept in topological order.

JSON model format (version 1)::

    {
      "format": "shapprop-model", "version": 1,
      "input_dim": 4,
      "nodes": [
        {"id": "x", "kind": "input", "dim": 4},
        {"id": "h", "kind": "linear", "weights": [[...], ...], "bias": [...]},
        {"id": "a", "kind": "activation", "fn": "relu"},
        {"id": "t", "kind": "tree_ensemble",
         "trees": [{"nodes": [{"feature": 0, "threshold": 0.5, "left": 1, "right": 2},
                              {"value": 1.0}, {"value": 5.0}]}]},
        {"id": "l", "kind": "loss", "loss": "squared_error", "target": 0.0}
      ],
      "edges": [["x", "h", 0], ["h", "a", 0], ["a", "t", 0], ["t", "l", 0]],
      "output": "l"
    }

Weights are row-major ``out x in`` matrices.  Tree nodes are addressed by
their position in ``nodes``; node 0 is the root; a sample goes left iff
``x[feature] <= threshold``.  The ``format`` and ``version`` keys are
optional on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

FORMAT_NAME = "shapprop-model"
FORMAT_VERSION = 1

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")
LOSSES = ("squared_error", "binary_cross_entropy", "identity")


class GraphError(ValueError):
    """Base class for malformed or inconsistent models."""


class ModelFormatError(GraphError):
    """The model document is not valid JSON or violates the schema."""


class CycleError(GraphError):
    """The edge list contains a directed cycle."""


class DanglingEdgeError(GraphError):
    """An edge refers to a node id that does not exist."""


class DimensionMismatchError(GraphError):
    """Vector sizes disagree along an edge or at the model input."""

    def __init__(self, message: str, node: str | None = None):
        super().__init__(message)
        self.node = node


# ---------------------------------------------------------------------------
# scalar functions


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def activation_fn(name: str) -> Callable[[np.ndarray], np.ndarray]:
    if name == "relu":
        return lambda z: np.maximum(z, 0.0)
    if name == "sigmoid":
        return _sigmoid
    if name == "tanh":
        return np.tanh
    if name == "identity":
        return lambda z: np.asarray(z, dtype=float) + 0.0
    raise ModelFormatError(f"unknown activation {name!r}")


def activation_grad(name: str) -> Callable[[np.ndarray], np.ndarray]:
    """Derivative of an activation; ReLU uses 0 at the kink."""
    if name == "relu":
        return lambda z: (np.asarray(z) > 0).astype(float)
    if name == "sigmoid":
        return lambda z: _sigmoid(z) * (1.0 - _sigmoid(z))
    if name == "tanh":
        return lambda z: 1.0 - np.tanh(z) ** 2
    if name == "identity":
        return lambda z: np.ones_like(np.asarray(z, dtype=float))
    raise ModelFormatError(f"unknown activation {name!r}")


def loss_fn(kind: str, target: float) -> Callable[[np.ndarray], np.ndarray]:
    """Loss as a function of the model output.

    ``binary_cross_entropy`` takes a logit (margin) input, so it is finite for
    every real output.
    """
    if kind == "squared_error":
        return lambda z: (z - target) ** 2
    if kind == "binary_cross_entropy":
        return lambda z: np.logaddexp(0.0, z) - target * z
    if kind == "identity":
        return lambda z: np.asarray(z, dtype=float) + 0.0
    raise ModelFormatError(f"unknown loss {kind!r}")


def loss_grad(kind: str, target: float) -> Callable[[np.ndarray], np.ndarray]:
    if kind == "squared_error":
        return lambda z: 2.0 * (z - target)
    if kind == "binary_cross_entropy":
        return lambda z: _sigmoid(z) - target
    if kind == "identity":
        return lambda z: np.ones_like(np.asarray(z, dtype=float))
    raise ModelFormatError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# trees


@dataclass(frozen=True, eq=False)
class Tree:
    """Binary decision tree stored as parallel arrays; leaves have ``left == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        n = len(self.feature)
        for name in ("threshold", "left", "right", "value"):
            if len(getattr(self, name)) != n:
                raise ModelFormatError(f"tree array {name!r} has wrong length")
        if n == 0:
            raise ModelFormatError("tree has no nodes")
        # every non-root node must have exactly one parent, reachable from 0
        parents = np.zeros(n, dtype=int)
        for i in range(n):
            l, r = int(self.left[i]), int(self.right[i])
            if (l < 0) != (r < 0):
                raise ModelFormatError(f"tree node {i} has exactly one child")
            if l >= 0:
                if not (0 < l < n and 0 < r < n) or l == r:
                    raise ModelFormatError(f"tree node {i} has invalid children")
                parents[l] += 1
                parents[r] += 1
                if not np.isfinite(self.threshold[i]):
                    raise ModelFormatError(f"tree node {i} has a non-finite threshold")
            elif not np.isfinite(self.value[i]):
                raise ModelFormatError(f"tree leaf {i} has a non-finite value")
        if parents[0] != 0 or np.any(parents[1:] != 1):
            raise ModelFormatError("tree is not a well-formed binary tree")
        # one parent each plus no parent for the root still admits cycles
        seen, stack = 0, [0]
        while stack:
            i = stack.pop()
            seen += 1
            if self.left[i] >= 0:
                stack += [int(self.left[i]), int(self.right[i])]
        if seen != n:
            raise ModelFormatError("tree has unreachable nodes")

    @classmethod
    def from_nodes(cls, nodes: Sequence[Mapping]) -> "Tree":
        n = len(nodes)
        feature = np.full(n, -1, dtype=int)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=int)
        right = np.full(n, -1, dtype=int)
        value = np.zeros(n)
        try:
            for i, nd in enumerate(nodes):
                if "value" in nd:
                    value[i] = float(nd["value"])
                else:
                    feature[i] = int(nd["feature"])
                    threshold[i] = float(nd["threshold"])
                    left[i] = int(nd["left"])
                    right[i] = int(nd["right"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"bad tree node: {exc}") from exc
        return cls(feature, threshold, left, right, value)

    def to_nodes(self) -> list[dict]:
        out = []
        for i in range(len(self.feature)):
            if self.left[i] < 0:
                out.append({"value": float(self.value[i])})
            else:
                out.append({
                    "feature": int(self.feature[i]),
                    "threshold": float(self.threshold[i]),
                    "left": int(self.left[i]),
                    "right": int(self.right[i]),
                })
        return out

    @property
    def is_leaf(self) -> np.ndarray:
        return self.left < 0

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            i, d = stack.pop()
            best = max(best, d)
            if self.left[i] >= 0:
                stack += [(int(self.left[i]), d + 1), (int(self.right[i]), d + 1)]
        return best

    def max_feature(self) -> int:
        internal = self.feature[self.left >= 0]
        return int(internal.max()) if internal.size else -1

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        idx = np.zeros(len(X), dtype=int)
        rows = np.arange(len(X))
        active = self.left[idx] >= 0
        while active.any():
            a = idx[active]
            go_left = X[rows[active], self.feature[a]] <= self.threshold[a]
            idx[active] = np.where(go_left, self.left[a], self.right[a])
            active = self.left[idx] >= 0
        return self.value[idx]

    def __eq__(self, other):
        if not isinstance(other, Tree):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("feature", "threshold", "left", "right", "value"))


# ---------------------------------------------------------------------------
# nodes


@dataclass(frozen=True, eq=False)
class Node:
    """A graph node.  ``kind`` selects which of the payload fields are used."""

    id: str
    kind: str
    dim: int | None = None  # input
    weights: np.ndarray | None = None  # linear, out x in
    bias: np.ndarray | None = None  # linear
    fn: str | None = None  # activation
    trees: tuple[Tree, ...] = ()  # tree_ensemble
    loss: str | None = None  # loss
    target: float = 0.0  # loss

    def __eq__(self, other):
        if not isinstance(other, Node):
            return NotImplemented
        if (self.id, self.kind, self.dim, self.fn, self.loss, self.target) != (
                other.id, other.kind, other.dim, other.fn, other.loss, other.target):
            return False
        if self.kind == "linear":
            return (np.array_equal(self.weights, other.weights)
                    and np.array_equal(self.bias, other.bias))
        return tuple(self.trees) == tuple(other.trees)

    @property
    def is_scalar_nonlinearity(self) -> bool:
        return self.kind in ("activation", "loss")

    def scalar_fn(self):
        if self.kind == "activation":
            return activation_fn(self.fn)
        return loss_fn(self.loss, self.target)

    def scalar_grad(self):
        if self.kind == "activation":
            return activation_grad(self.fn)
        return loss_grad(self.loss, self.target)


def input_node(id: str, dim: int) -> Node:
    return Node(id, "input", dim=int(dim))


def linear_node(id: str, weights, bias=None) -> Node:
    w = np.array(weights, dtype=float, ndmin=2)
    b = np.zeros(w.shape[0]) if bias is None else np.array(bias, dtype=float).reshape(-1)
    if w.ndim != 2:
        raise ModelFormatError(f"linear node {id!r}: weights must be a matrix")
    if not np.all(np.isfinite(w)) or not np.all(np.isfinite(b)):
        raise ModelFormatError(f"linear node {id!r}: non-finite weights")
    if len(b) != w.shape[0]:
        raise DimensionMismatchError(
            f"linear node {id!r}: bias length {len(b)} != out-dim {w.shape[0]}", id)
    w.setflags(write=False)
    b.setflags(write=False)
    return Node(id, "linear", weights=w, bias=b)


def activation_node(id: str, fn: str) -> Node:
    if fn not in ACTIVATIONS:
        raise ModelFormatError(f"node {id!r}: unknown activation {fn!r}")
    return Node(id, "activation", fn=fn)


def tree_ensemble_node(id: str, trees: Iterable[Tree]) -> Node:
    trees = tuple(trees)
    if not trees:
        raise ModelFormatError(f"tree ensemble {id!r} has no trees")
    return Node(id, "tree_ensemble", trees=trees)


def loss_node(id: str, kind: str, target: float) -> Node:
    if kind not in LOSSES:
        raise ModelFormatError(f"node {id!r}: unknown loss {kind!r}")
    return Node(id, "loss", loss=kind, target=float(target))


# ---------------------------------------------------------------------------
# graph


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    slot: int = 0


@dataclass(frozen=True, eq=False)
class ComputeGraph:
    """Validated, immutable model.  Build with :func:`build_graph`."""

    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]
    output: str
    input_dim: int
    _by_id: dict = field(repr=False, default_factory=dict)
    _inputs: dict = field(repr=False, default_factory=dict)
    _consumers: dict = field(repr=False, default_factory=dict)
    _dims: dict = field(repr=False, default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, ComputeGraph):
            return NotImplemented
        return (self.nodes == other.nodes and set(self.edges) == set(other.edges)
                and self.output == other.output and self.input_dim == other.input_dim)

    def node(self, id: str) -> Node:
        return self._by_id[id]

    def producers(self, id: str) -> tuple[str, ...]:
        """Producer ids of ``id`` ordered by slot."""
        return self._inputs[id]

    def consumers(self, id: str) -> tuple[str, ...]:
        return self._consumers[id]

    def out_dim(self, id: str) -> int:
        return self._dims[id]

    @property
    def input_id(self) -> str:
        return next(n.id for n in self.nodes if n.kind == "input")

    @property
    def output_dim(self) -> int:
        return self._dims[self.output]

    def __call__(self, X, output_index: int = 0) -> np.ndarray:
        """Batched model output at ``output_index``; the model-agnostic view."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        rec = forward_batch(self, np.atleast_2d(X))
        y = rec[self.output][:, output_index]
        return y[0] if single else y


def build_graph(nodes: Sequence[Node], edges: Iterable, output: str,
                input_dim: int | None = None) -> ComputeGraph:
    """Validate and topologically order a node/edge description."""
    nodes = list(nodes)
    by_id: dict[str, Node] = {}
    for n in nodes:
        if n.id in by_id:
            raise ModelFormatError(f"duplicate node id {n.id!r}")
        by_id[n.id] = n
    inputs = [n for n in nodes if n.kind == "input"]
    if len(inputs) != 1:
        raise ModelFormatError(f"expected exactly one input node, found {len(inputs)}")
    if input_dim is None:
        input_dim = inputs[0].dim
    if inputs[0].dim != input_dim:
        raise DimensionMismatchError(
            f"input node dim {inputs[0].dim} != input_dim {input_dim}", inputs[0].id)
    if output not in by_id:
        raise DanglingEdgeError(f"output refers to unknown node {output!r}")

    edge_list = []
    for e in edges:
        e = e if isinstance(e, Edge) else Edge(*e)
        for end in (e.src, e.dst):
            if end not in by_id:
                raise DanglingEdgeError(f"edge {e.src!r}->{e.dst!r} refers to unknown node {end!r}")
        edge_list.append(Edge(str(e.src), str(e.dst), int(e.slot)))

    slots: dict[str, dict[int, str]] = {n.id: {} for n in nodes}
    consumers: dict[str, list[str]] = {n.id: [] for n in nodes}
    for e in edge_list:
        if e.slot in slots[e.dst]:
            raise ModelFormatError(f"node {e.dst!r} slot {e.slot} wired twice")
        slots[e.dst][e.slot] = e.src
        consumers[e.src].append(e.dst)
    producer_ids = {}
    for n in nodes:
        s = slots[n.id]
        if n.kind == "input":
            if s:
                raise ModelFormatError(f"input node {n.id!r} cannot have producers")
        elif sorted(s) != list(range(len(s))) or not s:
            raise ModelFormatError(f"node {n.id!r}: input slots not fully wired")
        elif len(s) > 1 and n.kind != "linear":
            raise ModelFormatError(f"node {n.id!r}: only linear nodes take several slots")
        producer_ids[n.id] = tuple(s[k] for k in range(len(s)))

    # Kahn's algorithm, stable w.r.t. the given order
    indeg = {n.id: len(producer_ids[n.id]) for n in nodes}
    ready = [n.id for n in nodes if indeg[n.id] == 0]
    order = []
    pos = {n.id: i for i, n in enumerate(nodes)}
    while ready:
        ready.sort(key=pos.__getitem__)
        cur = ready.pop(0)
        order.append(cur)
        for c in consumers[cur]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if len(order) != len(nodes):
        stuck = sorted(set(by_id) - set(order))
        raise CycleError(f"cycle detected among nodes {stuck}")

    dims: dict[str, int] = {}
    for nid in order:
        n = by_id[nid]
        in_dim = sum(dims[p] for p in producer_ids[nid])
        if n.kind == "input":
            dims[nid] = n.dim
        elif n.kind == "linear":
            if n.weights.shape[1] != in_dim:
                raise DimensionMismatchError(
                    f"linear node {nid!r} expects in-dim {n.weights.shape[1]}, "
                    f"producers give {in_dim}", nid)
            dims[nid] = n.weights.shape[0]
        elif n.kind == "activation":
            dims[nid] = in_dim
        elif n.kind == "tree_ensemble":
            for t in n.trees:
                if t.max_feature() >= in_dim:
                    raise DimensionMismatchError(
                        f"tree in {nid!r} splits on feature {t.max_feature()} "
                        f"but input dim is {in_dim}", nid)
            dims[nid] = 1
        elif n.kind == "loss":
            if in_dim != 1:
                raise DimensionMismatchError(f"loss node {nid!r} needs a scalar input, got {in_dim}", nid)
            dims[nid] = 1
        else:
            raise ModelFormatError(f"node {nid!r}: unknown kind {n.kind!r}")
    for n in nodes:
        if n.kind == "loss" and n.id != output:
            raise ModelFormatError(f"loss node {n.id!r} must be the output node")

    return ComputeGraph(
        nodes=tuple(by_id[i] for i in order),
        edges=tuple(edge_list),
        output=output,
        input_dim=int(input_dim),
        _by_id=by_id,
        _inputs=producer_ids,
        _consumers={k: tuple(v) for k, v in consumers.items()},
        _dims=dims,
    )


def chain(input_dim: int, *layers: Node) -> ComputeGraph:
    """Sequential graph ``input -> layers[0] -> ... -> layers[-1]``."""
    nodes = [input_node("x", input_dim), *layers]
    edges = [Edge(a.id, b.id, 0) for a, b in zip(nodes, nodes[1:])]
    return build_graph(nodes, edges, nodes[-1].id, input_dim)


def mlp(weights: Sequence, biases: Sequence | None = None, activation: str = "relu",
        final_activation: str | None = None) -> ComputeGraph:
    """Fully connected network; ``activation`` follows every hidden layer."""
    biases = biases if biases is not None else [None] * len(weights)
    layers: list[Node] = []
    for k, (w, b) in enumerate(zip(weights, biases)):
        layers.append(linear_node(f"l{k}", w, b))
        last = k == len(weights) - 1
        if not last:
            layers.append(activation_node(f"a{k}", activation))
        elif final_activation:
            layers.append(activation_node(f"a{k}", final_activation))
    in_dim = np.array(weights[0], ndmin=2).shape[1]
    return chain(in_dim, *layers)


def with_loss(graph: ComputeGraph, kind: str, target: float, id: str = "loss") -> ComputeGraph:
    """Copy of ``graph`` with a loss node appended to its (scalar) output."""
    if graph.output_dim != 1:
        raise DimensionMismatchError(
            f"loss needs a scalar model output, got dim {graph.output_dim}", graph.output)
    while id in graph._by_id:
        id += "_"
    nodes = list(graph.nodes) + [loss_node(id, kind, target)]
    edges = list(graph.edges) + [Edge(graph.output, id, 0)]
    return build_graph(nodes, edges, id, graph.input_dim)


# ---------------------------------------------------------------------------
# forward


def forward_batch(graph: ComputeGraph, X: np.ndarray) -> dict[str, np.ndarray]:
    """Evaluate every node on a batch ``X`` (rows are samples).

    Returns node id -> ``(n_rows, out_dim)`` array, in topological order.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != graph.input_dim:
        raise DimensionMismatchError(
            f"input has shape {X.shape}, model expects {graph.input_dim} features",
            graph.input_id)
    rec: dict[str, np.ndarray] = {}
    for n in graph.nodes:
        if n.kind == "input":
            rec[n.id] = X
            continue
        prods = graph.producers(n.id)
        z = rec[prods[0]] if len(prods) == 1 else np.concatenate([rec[p] for p in prods], axis=1)
        if n.kind == "linear":
            rec[n.id] = z @ n.weights.T + n.bias
        elif n.kind in ("activation", "loss"):
            rec[n.id] = n.scalar_fn()(z)
        elif n.kind == "tree_ensemble":
            rec[n.id] = sum(t.predict(z) for t in n.trees)[:, None]
    return rec


def forward(graph: ComputeGraph, x) -> dict[str, np.ndarray]:
    """Activation record for a single sample: node id -> output vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatchError(f"expected a 1-D sample, got shape {x.shape}", graph.input_id)
    return {k: v[0] for k, v in forward_batch(graph, x[None, :]).items()}


# ---------------------------------------------------------------------------
# serialization


def _node_to_dict(n: Node) -> dict:
    d: dict = {"id": n.id, "kind": n.kind}
    if n.kind == "input":
        d["dim"] = n.dim
    elif n.kind == "linear":
        d["weights"] = n.weights.tolist()
        d["bias"] = n.bias.tolist()
    elif n.kind == "activation":
        d["fn"] = n.fn
    elif n.kind == "tree_ensemble":
        d["trees"] = [{"nodes": t.to_nodes()} for t in n.trees]
    elif n.kind == "loss":
        d["loss"] = n.loss
        d["target"] = n.target
    return d


def _node_from_dict(d: Mapping) -> Node:
    try:
        nid, kind = str(d["id"]), d["kind"]
        if kind == "input":
            return input_node(nid, int(d["dim"]))
        if kind == "linear":
            return linear_node(nid, d["weights"], d.get("bias"))
        if kind == "activation":
            return activation_node(nid, d["fn"])
        if kind == "tree_ensemble":
            return tree_ensemble_node(nid, [Tree.from_nodes(t["nodes"]) for t in d["trees"]])
        if kind == "loss":
            return loss_node(nid, d["loss"], d.get("target", 0.0))
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"bad node description {dict(d)!r}: missing/invalid {exc}") from exc
    raise ModelFormatError(f"unknown node kind {kind!r}")


def graph_to_dict(graph: ComputeGraph) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "input_dim": graph.input_dim,
        "nodes": [_node_to_dict(n) for n in graph.nodes],
        "edges": [[e.src, e.dst, e.slot] for e in graph.edges],
        "output": graph.output,
    }


def graph_from_dict(doc: Mapping) -> ComputeGraph:
    if not isinstance(doc, Mapping):
        raise ModelFormatError("model document must be a JSON object")
    if doc.get("format", FORMAT_NAME) != FORMAT_NAME:
        raise ModelFormatError(f"unexpected format tag {doc.get('format')!r}")
    if int(doc.get("version", FORMAT_VERSION)) > FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {doc['version']}")
    try:
        nodes = [_node_from_dict(d) for d in doc["nodes"]]
        edges = []
        for e in doc["edges"]:
            if len(e) == 2:
                e = [*e, 0]
            src, dst, slot = e
            edges.append(Edge(str(src), str(dst), int(slot)))
        return build_graph(nodes, edges, str(doc["output"]), int(doc["input_dim"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, GraphError):
            raise
        raise ModelFormatError(f"invalid model document: {exc!r}") from exc


def save_model(graph: ComputeGraph) -> bytes:
    return json.dumps(graph_to_dict(graph), indent=1).encode("utf-8")


def load_model(data: bytes | str) -> ComputeGraph:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"model is not valid JSON: {exc}") from exc
    return graph_from_dict(doc)
