"""In-process federated training loop.

Every round: sample users, run the expansion handshake, let each sampled
client take one locally scaled (and optionally privatized) SGD step, then
average shared tensors on the server and refresh the group statistics.
Group statistics aggregated at the end of round i are used for scaling in
round i + 1.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import expansion as xp
from .data import ConfigurationError, PreparedData, RatingTable, SensitiveAssignment, SplitTable
from .fairness import (
    EpochNoise,
    FairnessConfig,
    GroupStats,
    StatsContribution,
    aggregate_stats,
    make_contribution,
    performance,
    scale_factor,
)
from .model import (
    EmptyClientError,
    LocalParams,
    LocalSubgraph,
    ModelConfig,
    ModelState,
    apply_gradient,
    backward,
    forward,
    local_loss,
)
from .privacy import LdpConfig, NonFiniteGradientError, clip_and_noise

logger = logging.getLogger(__name__)

# Named random substreams derived from the single run seed.
STREAM_SAMPLING = 1
STREAM_INIT = 2
STREAM_LDP = 3
STREAM_STATS = 4
STREAM_DROPOUT = 5
STREAM_EXPANSION = 6
STREAM_KEYS = 7


def substream(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, *map(int, keys)])


class TrainingError(Exception):
    """A failure inside a round; the message names the epoch."""


@dataclass(frozen=True)
class ExperimentConfig:
    eta: float = 0.01
    sigma: float = 0.01
    K: float = 0.1
    hidden: int = 64
    beta: float = 0.0
    alpha: int = 1
    delta: float = 0.4
    lam: float = 0.15
    ldp: bool = False
    epochs: int = 30
    seed: int = 0
    layers: int = 1
    neighbor_cap: int = 32
    dropout: float = 0.2
    activation: str = "relu"
    # half-width of the uniform init; None means 1/sqrt(hidden), which stalls at h=64
    init_scale: float | None = 0.5
    sample_once: bool = False
    early_stop_patience: int = 0
    eval_test_each_epoch: bool = False
    dataset: str = "ml-100k"
    attribute: str = "gender"
    n_core: int = 20
    data_dir: str = ""  # empty means data/<dataset>

    def __post_init__(self):
        if not 0.0 <= self.K < 1.0:
            raise ConfigurationError(f"K must lie in [0, 1), got {self.K}")
        if self.eta < 0:
            raise ConfigurationError("eta must be >= 0")
        if self.hidden < 1 or self.epochs < 0 or self.neighbor_cap < 0:
            raise ConfigurationError("hidden >= 1, epochs >= 0 and neighbor_cap >= 0 required")
        # delegate range checks to the owning modules
        self.fairness
        self.privacy
        try:
            self.model
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None

    @property
    def fairness(self) -> FairnessConfig:
        return FairnessConfig(self.beta, self.alpha, self.sigma)

    @property
    def privacy(self) -> LdpConfig:
        return LdpConfig(self.delta, self.lam, self.ldp)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.layers, 0.2, self.activation, self.dropout)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RoundRecord:
    epoch: int
    train_rmse: float
    val_rmse: float
    val_disparity: float
    P: float
    Q: float
    wall_time: float
    participants: int = 0
    test_disparity: float = math.nan


@dataclass
class IndexedData:
    """Dataset re-keyed to dense user and item indices."""

    user_ids: np.ndarray
    item_ids: np.ndarray
    split: SplitTable
    groups: SensitiveAssignment

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @classmethod
    def build(cls, split: SplitTable, groups: SensitiveAssignment) -> "IndexedData":
        tables = (split.train, split.validation, split.test)
        user_ids = np.unique(np.concatenate([t.users for t in tables]))
        item_ids = np.unique(np.concatenate([t.items for t in tables]))

        def reindex(t: RatingTable) -> RatingTable:
            return RatingTable(np.searchsorted(user_ids, t.users), np.searchsorted(item_ids, t.items),
                               t.ratings, t.timestamps, t.rating_range)

        new_split = SplitTable(*(reindex(t) for t in tables))
        missing = [int(u) for u in user_ids if int(u) not in groups.group_of]
        if missing:
            raise ConfigurationError(f"users without a group: {missing[:10]}")
        new_groups = SensitiveAssignment(groups.attribute_name,
                                         {i: groups.group_of[int(u)] for i, u in enumerate(user_ids.tolist())})
        return cls(user_ids, item_ids, new_split, new_groups)


def _rows_by_user(table: RatingTable, n_users: int):
    order = np.argsort(table.users, kind="stable")
    users = table.users[order]
    bounds = np.searchsorted(users, np.arange(n_users + 1))
    return {u: order[bounds[u]:bounds[u + 1]] for u in range(n_users)}


@dataclass
class Client:
    user: int
    group: int
    graph: LocalSubgraph  # star graph from the training split
    expansion: xp.ExpansionClient
    current: LocalSubgraph = None  # latest expanded graph
    rounds_participated: int = 0

    def __post_init__(self):
        if self.current is None:
            self.current = self.graph

    @property
    def n_train(self) -> int:
        return self.graph.m


def build_clients(data: IndexedData, dim: int, seed: int) -> list[Client]:
    keys = substream(seed, STREAM_KEYS)
    shared_key = xp.new_shared_key(keys)
    rows = _rows_by_user(data.split.train, data.n_users)
    clients = []
    for u in range(data.n_users):
        idx = rows[u]
        items = data.split.train.items[idx]
        graph = LocalSubgraph(u, items, data.split.train.ratings[idx], dim=dim)
        tag = keys.bytes(16)
        clients.append(Client(u, data.groups[u], graph, xp.ExpansionClient(items, shared_key, tag)))
    return clients


def sample_users(all_users, K: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement of ``round((1 - K) * |U|)`` users (at least one)."""
    if not 0.0 <= K < 1.0:
        raise ConfigurationError(f"K must lie in [0, 1), got {K}")
    all_users = np.asarray(all_users)
    if len(all_users) == 0:
        raise ConfigurationError("no users to sample from")
    size = max(1, int(math.floor((1.0 - K) * len(all_users) + 0.5)))
    if size >= len(all_users):
        return np.sort(all_users)
    return np.sort(rng.choice(all_users, size=size, replace=False))


@dataclass
class ClientResult:
    update: LocalParams
    contribution: StatsContribution
    loss: float
    scale: float
    weight: int


def client_round(client: Client, snapshot: ModelState, stats: GroupStats, config: ExperimentConfig,
                 epoch: int, mapping: xp.MappingDict | None = None,
                 stats_noise: EpochNoise | None = None) -> ClientResult:
    """One client's work for a round: expand, train one step, report statistics.

    Raises ``EmptyClientError`` for clients without training data.
    """
    if client.n_train == 0:
        raise EmptyClientError(f"user {client.user} has no training ratings")
    graph = client.graph
    if mapping is not None:
        cap = config.neighbor_cap if config.neighbor_cap > 0 else None
        graph = xp.expand_subgraph(graph, mapping, cap, substream(config.seed, STREAM_EXPANSION, epoch, client.user))
    client.current = graph
    mcfg = config.model
    dropout_rng = substream(config.seed, STREAM_DROPOUT, epoch, client.user)
    trace = forward(graph, snapshot, mcfg, train=True, rng=dropout_rng)
    loss = local_loss(trace, graph.ratings)
    grad = backward(trace, graph.ratings, graph, snapshot, mcfg)
    L = scale_factor(config.fairness, stats, client.group)
    if L != 1.0:
        grad = grad.scaled(L)
    grad = clip_and_noise(grad, config.privacy, substream(config.seed, STREAM_LDP, epoch, client.user))
    update = apply_gradient(snapshot, graph, grad, config.eta)
    noise = stats_noise.draw(client.user, epoch) if stats_noise is not None and config.sigma > 0 else None
    contribution = make_contribution(performance(loss), client.group, config.sigma, noise)
    client.rounds_participated += 1
    return ClientResult(update, contribution, loss, L, client.n_train)


def aggregate_params(snapshot: ModelState, updates: list[LocalParams], weights) -> ModelState:
    """Weighted average of shared tensors; user rows come from their owners.

    Item rows are averaged only over the clients that hold the item; rows
    nobody touched keep their snapshot value.
    """
    if not updates:
        return snapshot.copy()
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(updates) or (w < 0).any() or w.sum() <= 0:
        raise ValueError("need one non-negative weight per update with positive total")
    dim = snapshot.dim
    out = snapshot.copy()
    for li, lp in enumerate(out.layers):
        thetas = []
        attns = []
        for up in updates:
            if len(up.layers) != len(out.layers) or up.layers[li].theta.shape != lp.theta.shape \
                    or up.layers[li].attention.shape != lp.attention.shape:
                raise xp.ProtocolError("update shape does not match the global model")
            thetas.append(up.layers[li].theta)
            attns.append(up.layers[li].attention)
        lp.theta = np.tensordot(w, np.stack(thetas), axes=1) / w.sum()
        lp.attention = np.tensordot(w, np.stack(attns), axes=1) / w.sum()
    n_items = snapshot.item_embeddings.shape[0]
    item_sum = np.zeros((n_items, dim))
    item_w = np.zeros(n_items)
    for up, wu in zip(updates, w):
        if up.item_embeddings.shape != (len(up.item_ids), dim) or up.user_embedding.shape != (dim,):
            raise xp.ProtocolError("update shape does not match the global model")
        np.add.at(item_sum, up.item_ids, wu * up.item_embeddings)
        np.add.at(item_w, up.item_ids, wu)
        out.user_embeddings[up.user] = up.user_embedding
    touched = item_w > 0
    out.item_embeddings[touched] = item_sum[touched] / item_w[touched, None]
    return out


@dataclass
class TrainResult:
    state: ModelState
    history: list[RoundRecord]
    clients: list[Client]
    data: IndexedData
    stats: GroupStats
    config: ExperimentConfig
    best_epoch: int | None = None

    def graphs(self) -> dict[int, LocalSubgraph]:
        return {c.user: c.current for c in self.clients}


def _as_indexed(data) -> IndexedData:
    if isinstance(data, IndexedData):
        return data
    if isinstance(data, PreparedData):
        return IndexedData.build(data.split, data.groups)
    split, groups = data
    return IndexedData.build(split, groups)


def train(config: ExperimentConfig, data, groups: SensitiveAssignment | None = None,
          on_round=None) -> TrainResult:
    """Run the federated loop.

    ``data`` is a ``PreparedData``, an ``IndexedData`` or a ``SplitTable``
    (then ``groups`` is required).
    """
    from .evaluation import evaluate  # avoid import cycle

    if isinstance(data, SplitTable):
        if groups is None:
            raise ConfigurationError("groups are required with a bare SplitTable")
        data = (data, groups)
    data = _as_indexed(data)
    state = ModelState.initialize(data.n_users, data.n_items, config.hidden, config.layers,
                                  substream(config.seed, STREAM_INIT), config.init_scale)
    clients = build_clients(data, config.hidden, config.seed)
    server = xp.ExpansionServer(config.hidden, rng=substream(config.seed, STREAM_EXPANSION))
    stats_noise = EpochNoise(config.sigma, config.seed, STREAM_STATS)
    sampler = substream(config.seed, STREAM_SAMPLING)
    stats = GroupStats(1.0, 1.0)
    history: list[RoundRecord] = []
    all_users = np.array([c.user for c in clients if c.n_train > 0])
    fixed_sample = sample_users(all_users, config.K, sampler) if config.sample_once and len(all_users) else None
    best = (math.inf, None, None)
    stale = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        try:
            sampled = fixed_sample if fixed_sample is not None else sample_users(all_users, config.K, sampler)
            snapshot = state
            uploads = [clients[u].expansion.upload(snapshot.user_embeddings[u]) for u in sampled]
            mappings = server.update_mapping(uploads)
            results = []
            for u in sampled:
                c = clients[u]
                try:
                    results.append(client_round(c, snapshot, stats, config, epoch,
                                                mappings[c.expansion.tag], stats_noise))
                except (EmptyClientError, NonFiniteGradientError) as exc:
                    logger.warning("epoch %d: client %d skipped (%s)", epoch, u, exc)
            state = aggregate_params(snapshot, [r.update for r in results], [r.weight for r in results])
            if results:
                stats = aggregate_stats([r.contribution for r in results], previous=stats)
            stats_noise.forget_before(epoch)
            graphs = {c.user: c.current for c in clients}
            val = evaluate(state, data.split.validation, data.groups, config.alpha, graphs, config.model)
            test_disp = math.nan
            if config.eval_test_each_epoch:
                test_disp = evaluate(state, data.split.test, data.groups, config.alpha, graphs,
                                     config.model).disparity
        except (EmptyClientError, NonFiniteGradientError, ValueError, xp.ProtocolError) as exc:
            raise TrainingError(f"epoch {epoch}: {exc}") from exc
        w = np.array([r.weight for r in results], dtype=float)
        losses = np.array([r.loss for r in results])
        train_rmse = float(np.sqrt(np.dot(w, losses) / w.sum())) if len(results) else math.nan
        rec = RoundRecord(epoch, train_rmse, val.rmse, val.disparity, stats.P, stats.Q,
                          time.perf_counter() - t0, len(results), test_disp)
        history.append(rec)
        logger.info("epoch %d train=%.4f val=%.4f disp=%.4f P=%.4f Q=%.4f", epoch, train_rmse,
                    val.rmse, val.disparity, stats.P, stats.Q)
        if on_round is not None:
            on_round(rec)
        if config.early_stop_patience > 0:
            if val.rmse < best[0]:
                best = (val.rmse, epoch, state)
                stale = 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    logger.info("early stop at epoch %d (best %d)", epoch, best[1])
                    return TrainResult(best[2], history, clients, data, stats, config, best[1])
    return TrainResult(state, history, clients, data, stats, config)
