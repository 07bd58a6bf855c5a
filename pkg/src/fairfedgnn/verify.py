"""Property suites behind ``fairfedgnn verify``.

Each suite checks an implementation against an independent oracle and
returns a ``SuiteResult``. The tests call the same functions.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from . import expansion as xp
from .data import S0, S1, RatingTable, ncore_filter
from .fairness import GroupStats, aggregate_stats, make_contribution
from .model import LocalSubgraph, ModelConfig, ModelState, backward, forward, local_loss
from .privacy import LdpConfig, clip, clip_and_noise


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str


# --- gradients -------------------------------------------------------------

def random_graph_case(rng: np.random.Generator, max_nodes: int = 5, max_dim: int = 4):
    """Random small star graph with parameters of unit scale."""
    dim = int(rng.integers(1, max_dim + 1))
    m = int(rng.integers(1, max_nodes))
    r = int(rng.integers(0, max_nodes - m))
    layers = int(rng.integers(1, 3))
    n_items = m + 2
    params = ModelState.initialize(2, n_items, dim, layers, rng, scale=1.0)
    items = rng.choice(n_items, size=m, replace=False)
    graph = LocalSubgraph(1, items, rng.integers(1, 6, size=m).astype(float), rng.normal(size=(r, dim)), dim)
    activation = ("relu", "leaky_relu")[int(rng.integers(0, 2))]
    return graph, params, ModelConfig(n_layers=layers, activation=activation, dropout=0.0)


def _param_views(params: ModelState, graph: LocalSubgraph):
    """(array, index, label) for every scalar the client's loss depends on."""
    for li, lp in enumerate(params.layers):
        for idx in np.ndindex(lp.theta.shape):
            yield lp.theta, idx, ("theta", li, idx)
        for idx in np.ndindex(lp.attention.shape):
            yield lp.attention, idx, ("attention", li, idx)
    for j in range(params.dim):
        yield params.user_embeddings, (graph.user, j), ("user", 0, (j,))
    for k, item in enumerate(graph.items):
        for j in range(params.dim):
            yield params.item_embeddings, (int(item), j), ("item", k, (j,))


def _analytic(grad, label):
    kind, i, idx = label
    if kind == "theta":
        return grad.thetas[i][idx]
    if kind == "attention":
        return grad.attentions[i][idx]
    if kind == "user":
        return grad.user[idx]
    return grad.items[i][idx]


# Central differences at step 1e-5 carry ~1e-10 round-off; gradients far
# below this floor are compared on an absolute scale instead.
REL_ERROR_FLOOR = 1e-6


def gradient_max_rel_error(graph, params, config, step=1e-5, grad_fn=backward) -> float:
    trace = forward(graph, params, config)
    grad = grad_fn(trace, graph.ratings, graph, params, config)
    worst = 0.0
    for arr, idx, label in _param_views(params, graph):
        orig = arr[idx]
        arr[idx] = orig + step
        up = local_loss(forward(graph, params, config), graph.ratings)
        arr[idx] = orig - step
        down = local_loss(forward(graph, params, config), graph.ratings)
        arr[idx] = orig
        fd = (up - down) / (2 * step)
        g = _analytic(grad, label)
        err = abs(g - fd) / max(abs(g), abs(fd), REL_ERROR_FLOOR)
        worst = max(worst, err)
    return worst


def _buggy_backward(trace, truths, graph, params, config):
    g = backward(trace, truths, graph, params, config)
    g.attentions = [a * 1.01 + 1e-3 for a in g.attentions]
    return g


def suite_gradients(seed: int = 0, trials: int = 100, inject_bug: bool = False) -> SuiteResult:
    rng = np.random.default_rng([seed, 101])
    grad_fn = _buggy_backward if inject_bug else backward
    worst = max(gradient_max_rel_error(*random_graph_case(rng), grad_fn=grad_fn) for _ in range(trials))
    return SuiteResult("finite_differences", worst < 1e-3, f"max relative error {worst:.2e} over {trials} graphs")


# --- expansion ---------------------------------------------------------------

def random_interactions(rng, n_users=100, n_items=50, density=0.08):
    return {u: set(np.flatnonzero(rng.random(n_items) < density).tolist()) for u in range(n_users)}


def plaintext_join(ratings: dict[int, set[int]]) -> dict[int, dict[int, set[int]]]:
    """For each user and each of its items, the set of other users who rated it."""
    raters = defaultdict(set)
    for u, items in ratings.items():
        for i in items:
            raters[i].add(u)
    return {u: {i: raters[i] - {u} for i in items} for u, items in ratings.items()}


def digest_join(ratings: dict[int, set[int]], key: bytes, seed: int = 0):
    """Run the protocol once and translate board slots back through a test-only lookup."""
    dim = 3
    rng = np.random.default_rng(seed)
    emb = {u: rng.normal(size=dim) for u in ratings}
    clients = {u: xp.ExpansionClient(items, key, rng.bytes(16)) for u, items in ratings.items()}
    server = xp.ExpansionServer(dim, rng=np.random.default_rng(seed + 1))
    mappings = server.update_mapping([c.upload(emb[u]) for u, c in clients.items()])
    by_bytes = {emb[u].tobytes(): u for u in ratings}
    out = {}
    for u, c in clients.items():
        mp = mappings[c.tag]
        digest_to_item = {xp.encrypt_item_ids([i], key).pop(): i for i in ratings[u]}
        out[u] = {digest_to_item[d]: {by_bytes[row.tobytes()] for row in mp.embeddings(d)}
                  for d in mp.neighbors}
        for i in ratings[u]:
            out[u].setdefault(i, set())
    return out


def suite_expansion(seed: int = 0, fixtures: int = 20) -> SuiteResult:
    rng = np.random.default_rng([seed, 202])
    key = xp.new_shared_key(rng)
    for f in range(fixtures):
        ratings = random_interactions(rng)
        if digest_join(ratings, key, seed * 1000 + f) != plaintext_join(ratings):
            return SuiteResult("expansion_oracle", False, f"fixture {f}: digest join differs from plaintext join")
    # inductive uploads over 5 rounds with growing histories
    n_users, n_items = 30, 40
    clients = {u: xp.ExpansionClient([], key, rng.bytes(16)) for u in range(n_users)}
    server = xp.ExpansionServer(2, rng=np.random.default_rng(seed))
    ever = {u: set() for u in range(n_users)}
    for _ in range(5):
        for u, c in clients.items():
            new = set(np.flatnonzero(rng.random(n_items) < 0.1).tolist())
            ever[u] |= new
            c.set_items(new)
        server.update_mapping([c.upload(np.zeros(2)) for c in clients.values()])
    sent = sum(c.uploaded_total for c in clients.values())
    expected = sum(len(v) for v in ever.values())
    ok = sent == expected
    return SuiteResult("expansion_oracle", ok,
                       f"{fixtures} fixtures match plaintext join; uploaded {sent} digests for {expected} distinct items")


# --- group statistics -----------------------------------------------------------

def suite_group_stats(seed: int = 0, n_users: int = 1000, sigma: float = 0.05) -> SuiteResult:
    rng = np.random.default_rng([seed, 303])
    metric = -rng.uniform(0.5, 3.0, size=n_users)
    member = rng.integers(0, 2, size=n_users)
    exact = aggregate_stats([make_contribution(m, g, 0.0) for m, g in zip(metric, member)])
    true_p = metric[member == S0].mean()
    true_q = metric[member == S1].mean()
    exact_err = max(abs(exact.P - true_p), abs(exact.Q - true_q))
    noise = rng.normal(0.0, sigma, size=(n_users, 4))
    noisy = aggregate_stats([make_contribution(m, g, sigma, e) for m, g, e in zip(metric, member, noise)])
    # standard error of the ratio estimate (delta method)
    n0 = (member == S0).sum()
    se_p = math.sqrt(n_users * sigma ** 2 * (1 + true_p ** 2)) / n0
    z = abs(noisy.P - true_p) / se_p
    ok = exact_err < 1e-12 and z < 3
    return SuiteResult("group_stats", ok, f"sigma=0 error {exact_err:.1e}; sigma={sigma} P off by {z:.2f} SE")


# --- LDP --------------------------------------------------------------------------

def suite_ldp(seed: int = 0, draws: int = 100_000) -> SuiteResult:
    rng = np.random.default_rng([seed, 404])
    worst_norm = 0.0
    delta = 0.4
    for _ in range(200):
        g = _random_gradient(rng, scale=float(rng.choice([0.01, 1.0, 100.0])))
        worst_norm = max(worst_norm, clip(g, delta).norm() - delta)
    lam = 0.15
    g = _random_gradient(rng, scale=0.0, size=draws)
    noisy = clip_and_noise(g, LdpConfig(delta, lam, True), rng)
    noise = noisy.flat() - g.flat()
    mean_z = abs(noise.mean()) / (noise.std(ddof=1) / math.sqrt(noise.size))
    # Laplace(0, b): E|X| = b
    scale_hat = np.abs(noise).mean()
    scale_z = abs(scale_hat - lam) / (lam / math.sqrt(noise.size))
    ok = worst_norm <= 1e-9 and mean_z < 3 and scale_z < 4
    return SuiteResult("ldp_noise", ok,
                       f"max post-clip excess {worst_norm:.1e}; noise mean {mean_z:.2f} SE; "
                       f"scale {scale_hat:.4f} vs {lam}")


def _random_gradient(rng, scale=1.0, size=None):
    from .model import GradientSet

    if size is not None:
        return GradientSet([np.zeros((1, 1))], [np.zeros(2)], np.zeros(1), np.arange(size), np.zeros((size, 1)))
    dim = int(rng.integers(1, 5))
    m = int(rng.integers(1, 6))
    return GradientSet([rng.normal(size=(dim, dim)) * scale], [rng.normal(size=2 * dim) * scale],
                       rng.normal(size=dim) * scale, np.arange(m), rng.normal(size=(m, dim)) * scale)


# --- n-core -----------------------------------------------------------------------

def naive_ncore(records: list[tuple], n: int) -> set[tuple]:
    """Iterate-until-stable removal with plain Python counting."""
    current = set(records)
    while True:
        uc = Counter(r[0] for r in current)
        ic = Counter(r[1] for r in current)
        kept = {r for r in current if uc[r[0]] >= n and ic[r[1]] >= n}
        if kept == current:
            return kept
        current = kept


def random_table(rng, n_users=6, n_items=6, density=0.5) -> RatingTable:
    recs = [(u, i, float(rng.integers(1, 6)), int(rng.integers(0, 10_000)))
            for u in range(n_users) for i in range(n_items) if rng.random() < density]
    return RatingTable.from_records(recs)


def suite_ncore(seed: int = 0, trials: int = 200) -> SuiteResult:
    from .data import EmptyResultError

    rng = np.random.default_rng([seed, 505])
    for t in range(trials):
        table = random_table(rng, int(rng.integers(2, 12)), int(rng.integers(2, 12)), float(rng.uniform(0.2, 0.9)))
        n = int(rng.integers(1, 5))
        expected = naive_ncore(list(table.records()), n)
        try:
            got = set(ncore_filter(table, n).records())
        except EmptyResultError:
            got = set()
        if got != expected:
            return SuiteResult("ncore_oracle", False, f"trial {t}: mismatch for n={n}")
    return SuiteResult("ncore_oracle", True, f"{trials} random tables match brute force")


def run_suites(seeds=(0,), inject_gradient_bug: bool = False) -> list[SuiteResult]:
    seeds = list(seeds) or [0]
    results = [suite_gradients(seeds[0], inject_bug=inject_gradient_bug),
               suite_ncore(seeds[0])]
    for name, fn in (("expansion_oracle", suite_expansion), ("group_stats", suite_group_stats),
                     ("ldp_noise", suite_ldp)):
        runs = [fn(s) for s in seeds]
        bad = [r for r in runs if not r.passed]
        results.append(bad[0] if bad else SuiteResult(name, True, runs[0].detail + f" ({len(seeds)} seed(s))"))
    return results
