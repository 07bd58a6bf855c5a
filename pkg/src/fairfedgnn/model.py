"""Local graph-attention recommender with hand-written reverse mode.

Each client holds a star graph: its user node, the items it rated in the
training split, and (after expansion) anonymous neighbor-user nodes. Every
node also attends to itself. One GAT layer does

    gamma_vk = softmax_k( LeakyReLU( a . [W h_v ; W h_k] ) )   over k in N(v)
    n_v      = sum_k gamma_vk h_k
    h'_v     = act( W n_v )

and a rating is the dot product of the final user and item states.
Neighbor-user embeddings are inputs only; no gradient is produced for them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


@dataclass
class LayerParams:
    theta: np.ndarray  # (h, h)
    attention: np.ndarray  # (2h,)

    def copy(self) -> "LayerParams":
        return LayerParams(self.theta.copy(), self.attention.copy())


@dataclass
class ModelState:
    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    layers: list[LayerParams]

    @property
    def dim(self) -> int:
        return self.user_embeddings.shape[1]

    @classmethod
    def initialize(cls, n_users: int, n_items: int, dim: int, n_layers: int,
                   rng: np.random.Generator, scale: float | None = None) -> "ModelState":
        """Uniform(-s, s) everywhere with s = 1/sqrt(dim) unless ``scale`` is given."""
        s = 1.0 / np.sqrt(dim) if scale is None else scale
        users = rng.uniform(-s, s, size=(n_users, dim))
        items = rng.uniform(-s, s, size=(n_items, dim))
        layers = [
            LayerParams(rng.uniform(-s, s, size=(dim, dim)), rng.uniform(-s, s, size=2 * dim))
            for _ in range(n_layers)
        ]
        return cls(users, items, layers)

    def copy(self) -> "ModelState":
        return ModelState(self.user_embeddings.copy(), self.item_embeddings.copy(),
                          [lp.copy() for lp in self.layers])

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"user_embeddings": self.user_embeddings, "item_embeddings": self.item_embeddings}
        for i, lp in enumerate(self.layers):
            out[f"layer{i}_theta"] = lp.theta
            out[f"layer{i}_attention"] = lp.attention
        return out

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays().values())


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 1
    attention_slope: float = 0.2
    activation: str = "relu"  # relu | leaky_relu | identity
    dropout: float = 0.2

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("need at least one GAT layer")
        if self.activation not in ("relu", "leaky_relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class _Topology:
    """Edge arrays for one node layout, sorted by destination node."""

    def __init__(self, m: int, r: int, extra: int):
        n = 1 + m + r + extra
        self.n_nodes = n
        self.m, self.r, self.extra = m, r, extra
        # user aggregates from itself, its items and its neighbors (not extras)
        user_src = np.arange(1 + m + r)
        other = np.arange(1, n)
        dst = np.concatenate([np.zeros(1 + m + r, dtype=np.int64), np.repeat(other, 2)])
        src = np.concatenate([user_src, np.column_stack([other, np.zeros_like(other)]).ravel()])
        self.dst = dst
        self.src = src
        self.starts = np.flatnonzero(np.r_[True, dst[1:] != dst[:-1]])
        # every node is the source of its self-loop, so each src segment is non-empty
        self.src_order = np.argsort(src, kind="stable")
        sorted_src = src[self.src_order]
        self.src_starts = np.flatnonzero(np.r_[True, sorted_src[1:] != sorted_src[:-1]])

    def segment_sum(self, x):
        return np.add.reduceat(x, self.starts, axis=0)

    def segment_max(self, x):
        return np.maximum.reduceat(x, self.starts, axis=0)

    def scatter_src(self, x):
        """Sum ``x`` (per edge) into the edges' source nodes."""
        return np.add.reduceat(x[self.src_order], self.src_starts, axis=0)


@lru_cache(maxsize=8192)
def topology(m: int, r: int, extra: int = 0) -> _Topology:
    return _Topology(m, r, extra)


@dataclass(frozen=True)
class LocalSubgraph:
    """One client's star graph.

    ``items`` are item indices rated in the training split with ``ratings``;
    ``neighbors`` are embeddings of anonymous co-rating users (constants).
    """

    user: int
    items: np.ndarray
    ratings: np.ndarray
    neighbors: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "items", np.asarray(self.items, dtype=np.int64))
        if self.neighbors.size == 0 and self.neighbors.shape != (0, self.dim):
            object.__setattr__(self, "neighbors", np.empty((0, self.dim)))

    @property
    def m(self) -> int:
        return len(self.items)

    @property
    def r(self) -> int:
        return len(self.neighbors)

    def with_neighbors(self, embeddings: np.ndarray) -> "LocalSubgraph":
        emb = np.asarray(embeddings, dtype=np.float64).reshape(-1, self.dim)
        return LocalSubgraph(self.user, self.items, self.ratings, emb, self.dim)

    @property
    def topology(self) -> _Topology:
        return topology(self.m, self.r, 0)

    def topology_with(self, extra: int) -> _Topology:
        return topology(self.m, self.r, extra)


@dataclass
class ForwardTrace:
    graph: LocalSubgraph
    topo: _Topology
    target_nodes: np.ndarray
    inputs: list[np.ndarray]  # H^(l) fed into layer l (after dropout of previous layer)
    transformed: list[np.ndarray]  # W h
    scores: list[np.ndarray]  # pre-LeakyReLU attention logits per edge
    gamma: list[np.ndarray]
    aggregated: list[np.ndarray]  # n_v
    pre_activation: list[np.ndarray]
    masks: list[np.ndarray | None]
    output: np.ndarray
    predictions: np.ndarray

    def attention_row_sums(self, layer: int = 0) -> np.ndarray:
        return self.topo.segment_sum(self.gamma[layer])


@dataclass
class GradientSet:
    """Gradient of one client's loss; item rows are given for ``item_ids`` only."""

    thetas: list[np.ndarray]
    attentions: list[np.ndarray]
    user: np.ndarray
    item_ids: np.ndarray
    items: np.ndarray

    def blocks(self) -> list[np.ndarray]:
        return [*self.thetas, *self.attentions, self.user, self.items]

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(b * b)) for b in self.blocks())))

    def scaled(self, c: float) -> "GradientSet":
        return self.map(lambda b: b * c)

    def map(self, fn) -> "GradientSet":
        n = len(self.thetas)
        out = [fn(b) for b in self.blocks()]
        return GradientSet(out[:n], out[n:2 * n], out[2 * n], self.item_ids, out[2 * n + 1])

    def flat(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.blocks()])

    def is_finite(self) -> bool:
        return all(np.isfinite(b).all() for b in self.blocks())

    def dense_items(self, n_items: int) -> np.ndarray:
        out = np.zeros((n_items, self.items.shape[1]))
        out[self.item_ids] = self.items
        return out


def _act(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, 0.2 * x)
    return x


def _act_grad(x, kind):
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "leaky_relu":
        return np.where(x > 0, 1.0, 0.2)
    return np.ones_like(x)


def input_states(graph: LocalSubgraph, params: ModelState, extra_items=None) -> np.ndarray:
    parts = [params.user_embeddings[graph.user][None, :], params.item_embeddings[graph.items], graph.neighbors]
    if extra_items is not None and len(extra_items):
        parts.append(params.item_embeddings[extra_items])
    return np.concatenate(parts, axis=0)


def forward(graph: LocalSubgraph, params: ModelState, config: ModelConfig = ModelConfig(), *,
            extra_items: np.ndarray | None = None, train: bool = False,
            rng: np.random.Generator | None = None) -> ForwardTrace:
    """Run all GAT layers and predict ratings.

    Without ``extra_items`` the predictions are for the graph's own training
    items. With ``extra_items`` (evaluation) those items are attached as
    nodes that attend to the user but are not attended to by it, and the
    predictions are for them.
    """
    n_extra = 0 if extra_items is None else len(extra_items)
    topo = graph.topology_with(n_extra)
    H = input_states(graph, params, extra_items)
    dropout = config.dropout if train else 0.0
    if dropout and rng is None:
        raise ValueError("dropout during training needs an rng")
    dim = params.dim
    trace = ForwardTrace(graph, topo, np.empty(0, np.int64), [], [], [], [], [], [], [], H, np.empty(0))
    for lp in params.layers:
        trace.inputs.append(H)
        G = H @ lp.theta.T
        u1 = G @ lp.attention[:dim]
        u2 = G @ lp.attention[dim:]
        s = u1[topo.dst] + u2[topo.src]
        e = np.where(s > 0, s, config.attention_slope * s)
        e = e - topo.segment_max(e)[topo.dst]
        ex = np.exp(e)
        gamma = ex / topo.segment_sum(ex)[topo.dst]
        agg = topo.segment_sum(gamma[:, None] * H[topo.src])
        pre = agg @ lp.theta.T
        out = _act(pre, config.activation)
        mask = None
        if dropout:
            mask = (rng.random(out.shape) >= dropout) / (1.0 - dropout)
            out = out * mask
        trace.transformed.append(G)
        trace.scores.append(s)
        trace.gamma.append(gamma)
        trace.aggregated.append(agg)
        trace.pre_activation.append(pre)
        trace.masks.append(mask)
        H = out
    trace.output = H
    if n_extra:
        targets = np.arange(topo.n_nodes - n_extra, topo.n_nodes)
    else:
        targets = np.arange(1, 1 + graph.m)
    trace.target_nodes = targets
    trace.predictions = H[targets] @ H[0]
    return trace


def local_loss(trace: ForwardTrace, truths: np.ndarray) -> float:
    """Mean squared error over the client's rated items."""
    truths = np.asarray(truths, dtype=np.float64)
    if len(truths) == 0:
        raise EmptyClientError("client has no training ratings")
    diff = trace.predictions - truths
    return float(np.mean(diff * diff))


class EmptyClientError(Exception):
    """Raised when a client has nothing to train on; the round skips it."""


def backward(trace: ForwardTrace, truths: np.ndarray, graph: LocalSubgraph, params: ModelState,
             config: ModelConfig = ModelConfig()) -> GradientSet:
    """Exact gradient of ``local_loss`` with respect to the client's parameters."""
    topo = trace.topo
    dim = params.dim
    truths = np.asarray(truths, dtype=np.float64)
    m = len(truths)
    dpred = 2.0 * (trace.predictions - truths) / m
    H = trace.output
    t = trace.target_nodes
    dH = np.zeros_like(H)
    dH[0] = dpred @ H[t]
    dH[t] += dpred[:, None] * H[0]

    n_layers = len(params.layers)
    dthetas = [None] * n_layers
    dattn = [None] * n_layers
    for li in range(n_layers - 1, -1, -1):
        lp = params.layers[li]
        Hin = trace.inputs[li]
        G = trace.transformed[li]
        gamma = trace.gamma[li]
        mask = trace.masks[li]
        dout = dH if mask is None else dH * mask
        dpre = dout * _act_grad(trace.pre_activation[li], config.activation)
        dtheta = dpre.T @ trace.aggregated[li]
        dagg = dpre @ lp.theta
        # n_v = sum_e gamma_e H[src_e]
        dgamma = np.einsum("ij,ij->i", dagg[topo.dst], Hin[topo.src])
        dHin = topo.scatter_src(gamma[:, None] * dagg[topo.dst])
        # softmax over each destination segment
        weighted = topo.segment_sum(gamma * dgamma)
        de = gamma * (dgamma - weighted[topo.dst])
        s = trace.scores[li]
        ds = de * np.where(s > 0, 1.0, config.attention_slope)
        du1 = topo.segment_sum(ds)
        du2 = topo.scatter_src(ds)
        a1, a2 = lp.attention[:dim], lp.attention[dim:]
        dattn[li] = np.concatenate([G.T @ du1, G.T @ du2])
        dG = np.outer(du1, a1) + np.outer(du2, a2)
        dtheta += dG.T @ Hin
        dHin += dG @ lp.theta
        dthetas[li] = dtheta
        dH = dHin
    m_nodes = graph.m
    return GradientSet(
        thetas=dthetas,
        attentions=dattn,
        user=dH[0].copy(),
        item_ids=np.asarray(graph.items),
        items=dH[1:1 + m_nodes].copy(),
    )


def apply_gradient(params: ModelState, graph: LocalSubgraph, grad: GradientSet, lr: float) -> "LocalParams":
    """One SGD step on the parameters this client holds."""
    return LocalParams(
        user=graph.user,
        user_embedding=params.user_embeddings[graph.user] - lr * grad.user,
        item_ids=grad.item_ids,
        item_embeddings=params.item_embeddings[grad.item_ids] - lr * grad.items,
        layers=[LayerParams(lp.theta - lr * dt, lp.attention - lr * da)
                for lp, dt, da in zip(params.layers, grad.thetas, grad.attentions)],
    )


@dataclass
class LocalParams:
    """Parameters a client sends back after its local step."""

    user: int
    user_embedding: np.ndarray
    item_ids: np.ndarray
    item_embeddings: np.ndarray
    layers: list[LayerParams]


def predict(graph: LocalSubgraph, params: ModelState, items: np.ndarray,
            config: ModelConfig = ModelConfig(), rating_range=(1.0, 5.0)) -> np.ndarray:
    """Evaluation-time ratings for ``items``, clipped to ``rating_range``."""
    items = np.asarray(items, dtype=np.int64)
    if len(items) == 0:
        return np.empty(0)
    trace = forward(graph, params, config, extra_items=items, train=False)
    return np.clip(trace.predictions, *rating_range)


def save_checkpoint(path, state: ModelState, manifest: dict) -> None:
    """Write an uncompressed ``.npz`` holding every tensor plus a JSON manifest.

    The manifest records names, shapes, hidden size, layer count and whatever
    the caller adds (seed, config hash). Float64 arrays round-trip exactly.
    """
    arrays = state.arrays()
    meta = dict(manifest)
    meta.update({
        "format_version": CHECKPOINT_VERSION,
        "hidden": state.dim,
        "layers": len(state.layers),
        "tensors": {k: list(v.shape) for k, v in arrays.items()},
    })
    with open(Path(path), "wb") as fh:
        np.savez(fh, manifest=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[ModelState, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["manifest"]))
        layers = [LayerParams(z[f"layer{i}_theta"].copy(), z[f"layer{i}_attention"].copy())
                  for i in range(meta["layers"])]
        state = ModelState(z["user_embeddings"].copy(), z["item_embeddings"].copy(), layers)
    return state, meta
