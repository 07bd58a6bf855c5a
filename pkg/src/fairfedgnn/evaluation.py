"""RMSE / disparity evaluation and parameter sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import S0, S1, RatingTable
from .fairness import disparity, performance
from .model import LocalSubgraph, ModelConfig, ModelState, predict

logger = logging.getLogger(__name__)

METRICS = ("rmse", "neg_mse")
BETAS = (0.0, 0.3, 0.5, 0.7, 0.9)


@dataclass
class EvalReport:
    rmse: float
    group_rmse: dict[int, float]
    disparity: float
    per_user: dict[int, float] = field(default_factory=dict)
    sse: dict[int, float] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)


def per_user_metric(sq_errors: np.ndarray, metric: str = "rmse") -> float:
    """Per-user value fed into the disparity: RMSE for reporting, -MSE as during training."""
    mse = float(np.mean(sq_errors))
    if metric == "rmse":
        return math.sqrt(mse)
    if metric == "neg_mse":
        return performance(mse)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def evaluate(params: ModelState, split: RatingTable, groups, alpha: int = 1,
             graphs: dict[int, LocalSubgraph] | None = None, model_config: ModelConfig = ModelConfig(),
             metric: str = "rmse") -> EvalReport:
    """Score ``params`` on ``split`` (indexed users/items).

    Each user is predicted through its own local graph from ``graphs``;
    users without a graph get a bare star of no items. Predictions are
    clipped to the rating range.
    """
    group_of = groups.group_of if hasattr(groups, "group_of") else groups
    order = np.argsort(split.users, kind="stable")
    users = split.users[order]
    starts = np.flatnonzero(np.r_[True, users[1:] != users[:-1]]) if len(users) else np.empty(0, int)
    ends = np.r_[starts[1:], len(users)]
    per_user: dict[int, float] = {}
    sse = {S0: 0.0, S1: 0.0}
    counts = {S0: 0, S1: 0}
    total_sse = 0.0
    for s, e in zip(starts, ends):
        idx = order[s:e]
        u = int(users[s])
        graph = graphs.get(u) if graphs is not None else None
        if graph is None:
            graph = LocalSubgraph(u, np.empty(0, np.int64), np.empty(0), dim=params.dim)
        pred = predict(graph, params, split.items[idx], model_config, split.rating_range)
        err = (pred - split.ratings[idx]) ** 2
        per_user[u] = per_user_metric(err, metric)
        g = group_of[u]
        sse[g] += float(err.sum())
        counts[g] += len(idx)
        total_sse += float(err.sum())
    n = sum(counts.values())
    rmse = math.sqrt(total_sse / n) if n else math.nan
    group_rmse = {g: (math.sqrt(sse[g] / counts[g]) if counts[g] else math.nan) for g in (S0, S1)}
    try:
        disp = disparity(per_user, group_of, alpha)
    except Exception:
        logger.warning("disparity undefined: a group has no evaluated users")
        disp = math.nan
    return EvalReport(rmse, group_rmse, disp, per_user, sse, counts)


def percent_change(values, baseline) -> list[float]:
    """Percentage change of each value relative to ``baseline``."""
    return [100.0 * (v - baseline) / baseline if baseline else math.nan for v in values]


@dataclass
class SweepRow:
    beta: float
    rmse: float
    disparity: float
    delta: float | None = None
    lam: float | None = None
    epsilon: float | None = None
    val_disparity: list[float] = field(default_factory=list)
    error: str | None = None


def run_cell(config, data):
    """Train with ``config`` and evaluate on the test split."""
    from .federation import train

    result = train(config, data)
    report = evaluate(result.state, result.data.split.test, result.data.groups, config.alpha,
                      result.graphs(), config.model)
    return result, report


def sweep(base_config, data, betas=BETAS) -> list[SweepRow]:
    """One full train + test evaluation per beta with the base config's seed.

    A failing cell is recorded with its error and the sweep moves on.
    """
    betas = list(betas)
    if not betas:
        raise ValueError("empty beta sweep")
    rows = []
    for beta in betas:
        try:
            result, report = run_cell(base_config.replace(beta=beta), data)
            rows.append(SweepRow(beta, report.rmse, report.disparity,
                                 val_disparity=[r.val_disparity for r in result.history]))
        except Exception as exc:  # a failed cell must not stop the sweep
            logger.error("beta=%s failed: %s", beta, exc)
            rows.append(SweepRow(beta, math.nan, math.nan, error=str(exc)))
    return rows


def ldp_sweep(base_config, data, grid) -> list[SweepRow]:
    """Train once per (delta, lambda) cell with LDP enabled."""
    from .privacy import privacy_budget

    grid = list(grid)
    if not grid:
        raise ValueError("empty (delta, lambda) grid")
    rows = []
    for delta, lam in grid:
        cfg = base_config.replace(ldp=True, delta=delta, lam=lam)
        eps = privacy_budget(cfg.privacy)
        try:
            _, report = run_cell(cfg, data)
            rows.append(SweepRow(cfg.beta, report.rmse, report.disparity, delta, lam, eps))
        except Exception as exc:
            logger.error("delta=%s lambda=%s failed: %s", delta, lam, exc)
            rows.append(SweepRow(cfg.beta, math.nan, math.nan, delta, lam, eps, error=str(exc)))
    return rows
