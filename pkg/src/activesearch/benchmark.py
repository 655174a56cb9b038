"""Per-iteration overhead of the search loop.

Overhead is everything the search adds on top of classifier calls: the
forest query for the observed window and the belief update over all
proposals.  Episodes run with per-visit forest queries so both parts are
timed as they would be in a live system.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .classifier import OracleScorer
from .dataio import Dataset
from .forest import QueryStats
from .search import Hyperparameters, initial_window, run_episode
from .synthetic import SyntheticConfig, generate_scene, signatures


@dataclass
class OverheadReport:
    n_proposals: int
    n_trees: int
    iterations: int
    total_s: float
    mean_ms: float
    median_ms: float
    query_mean_ms: float
    update_mean_ms: float
    distance_evals_per_iteration: float
    max_path_length: int

    def to_dict(self) -> dict:
        return asdict(self)


def measure_episode(image, forest, scorer, theta: Hyperparameters, start=None) -> OverheadReport:
    """Run one timed episode; ``start`` falls back to the model's, then the image's mean box."""
    if start is None and forest.start_window is None:
        start = initial_window(Dataset([image]), forest.class_name)
    stats = QueryStats()
    ep = run_episode(image, forest, scorer, theta, start, context="lazy", stats=stats,
                     timed=True)
    q = np.array(ep.timings["forest_query"])
    u = np.array(ep.timings["belief_update"])
    per = q + u
    max_path = 0
    for row in ep.trace:
        w = tuple(image.windows[row.index].tolist())
        code = int.from_bytes(image.codes[row.index].tobytes(), "big")
        for tree in forest.trees:
            s = QueryStats()
            tree.leaf_of(w, code, s)
            max_path = max(max_path, s.distance_evals)
    return OverheadReport(
        n_proposals=image.n_proposals, n_trees=forest.n_trees, iterations=len(ep),
        total_s=float(per.sum()), mean_ms=1e3 * float(per.mean()),
        median_ms=1e3 * float(np.median(per)), query_mean_ms=1e3 * float(q.mean()),
        update_mean_ms=1e3 * float(u.mean()),
        distance_evals_per_iteration=stats.distance_evals / max(len(ep), 1),
        max_path_length=max_path)


def synthetic_image(n_proposals: int, seed: int = 0, index: int = 0):
    """One synthetic scene with ``n_proposals`` proposals."""
    cfg = SyntheticConfig(n_train=1, n_test=0, proposals_per_image=n_proposals, seed=seed)
    return generate_scene(cfg, index, signatures(cfg)), cfg


def scaling(forest, sizes=(500, 1000, 2000), budget: int = 100, seed: int = 0,
            theta: Hyperparameters | None = None, repeats: int = 3):
    """Mean per-iteration overhead at each proposal count, plus a fitted line.

    Returns ``(reports, slope, intercept)``; the fit is least squares of mean
    milliseconds against N.  Each size keeps the best of ``repeats`` runs.
    """
    theta = (theta or Hyperparameters()).with_budget(budget)
    reports = []
    for n in sizes:
        image, cfg = synthetic_image(n, seed)
        scorer = OracleScorer(Dataset([image]), cfg.class_name, noise=0.0)
        runs = [measure_episode(image, forest, scorer, theta) for _ in range(repeats)]
        reports.append(min(runs, key=lambda r: r.mean_ms))
    x = np.array([r.n_proposals for r in reports], dtype=float)
    y = np.array([r.mean_ms for r in reports])
    slope, intercept = np.polyfit(x, y, 1)
    return reports, float(slope), float(intercept)


def within_linear(reports, slope: float, intercept: float, factor: float = 2.0) -> bool:
    """Every measured mean lies within ``factor`` of the fitted line."""
    for r in reports:
        fit = slope * r.n_proposals + intercept
        if fit <= 0 or not (fit / factor <= r.mean_ms <= fit * factor):
            return False
    return True
