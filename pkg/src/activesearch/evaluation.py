"""Detection post-processing and AP-vs-budget measurement.

Detections of one image go through greedy NMS (IoU threshold 0.3), then all
images are pooled for PASCAL-style AP with all-points interpolation.  A
budget curve reports AP after the first ``b`` evaluations of every image's
search, for each checkpoint ``b``; traces are run once at the largest budget
and cut into prefixes.

Input order matters only for ties: detections of one image are fed to NMS in
proposal-index order, so equal scores resolve towards the lower index.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from ._kernels import greedy_nms, kernel_rows, lockstep_episodes, prefix_nms_match
from .errors import InvalidInputError, InvalidParameterError, ValidationError
from .geometry import iou_matrix
from .search import (Episode, Hyperparameters, TraceRow, initial_window, run_episode,
                     start_index)
from .tabular import read_table, write_table

NMS_THRESHOLD = 0.3
MATCH_THRESHOLD = 0.5


@dataclass(frozen=True)
class Detection:
    image_id: str
    window: tuple
    score: float
    index: int = -1  # proposal index, -1 when unknown

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(float(v) for v in self.window))
        if not (0.0 <= self.score <= 1.0):
            raise InvalidInputError(f"detection score {self.score} outside [0, 1]")


@dataclass
class BudgetCurve:
    budgets: np.ndarray
    ap: np.ndarray
    class_name: str = ""
    policy: str = ""

    def __post_init__(self):
        self.budgets = np.asarray(self.budgets, dtype=np.int64)
        self.ap = np.asarray(self.ap, dtype=np.float64)
        if len(self.budgets) != len(self.ap):
            raise InvalidInputError("budgets and AP values differ in length")
        if np.any(np.diff(self.budgets) <= 0):
            raise InvalidInputError("curve budgets must be strictly increasing")
        if np.any((self.ap < 0) | (self.ap > 1)):
            raise InvalidInputError("AP values must lie in [0, 1]")

    @property
    def points(self) -> list[tuple[int, float]]:
        return list(zip(self.budgets.tolist(), self.ap.tolist()))

    def ap_at(self, budget: int) -> float:
        hit = np.flatnonzero(self.budgets == budget)
        if not hit.size:
            raise InvalidInputError(f"no checkpoint at budget {budget}")
        return float(self.ap[hit[0]])

    def auc(self, upto: int | None = None) -> float:
        """Trapezoidal area under the curve up to ``upto``, divided by that budget."""
        keep = self.budgets <= (self.budgets[-1] if upto is None else upto)
        return area_under_curve(self.budgets[keep], self.ap[keep])


def area_under_curve(budgets, ap) -> float:
    budgets = np.asarray(budgets, dtype=np.float64)
    ap = np.asarray(ap, dtype=np.float64)
    if len(budgets) == 0 or budgets[-1] <= 0:
        return 0.0
    if len(budgets) == 1:
        return float(ap[0])
    area = float(np.sum((budgets[1:] - budgets[:-1]) * (ap[1:] + ap[:-1]) * 0.5))
    return area / float(budgets[-1])


def default_checkpoints(budget: int, step: int = 10) -> list[int]:
    """``step, 2*step, ...`` up to ``budget``, always ending at ``budget``."""
    if budget < 1 or step < 1:
        raise InvalidParameterError("budget and step must be >= 1")
    pts = list(range(step, budget + 1, step))
    if not pts or pts[-1] != budget:
        pts.append(budget)
    return pts


# ---------------------------------------------------------------------------
# NMS and AP


def score_rank(scores: np.ndarray) -> np.ndarray:
    """Positions by descending score, lowest position first among equal scores."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms_indices(windows: np.ndarray, scores: np.ndarray,
                iou_threshold: float = NMS_THRESHOLD) -> np.ndarray:
    """Positions kept by greedy NMS, in keep order (descending score)."""
    windows = np.ascontiguousarray(windows, dtype=np.float64).reshape(-1, 4)
    return greedy_nms(score_rank(scores), windows, float(iou_threshold))


def nms(detections, iou_threshold: float = NMS_THRESHOLD) -> list:
    """Greedy non-maximum suppression over one image's detections."""
    detections = list(detections)
    if not detections:
        return []
    windows = np.array([d.window for d in detections])
    scores = np.array([d.score for d in detections])
    return [detections[i] for i in nms_indices(windows, scores, iou_threshold)]


def match_flags(windows: np.ndarray, gt: np.ndarray, iou_match: float = MATCH_THRESHOLD):
    """True-positive flags for detections taken in the given order.

    Each detection claims the unmatched ground-truth box it overlaps most
    and is correct iff that overlap exceeds ``iou_match``.
    """
    windows = np.asarray(windows, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    tp = np.zeros(len(windows), dtype=bool)
    if len(gt) == 0 or len(windows) == 0:
        return tp
    ov = iou_matrix(windows, gt)
    free = np.ones(len(gt), dtype=bool)
    for i in range(len(windows)):
        if not free.any():
            break
        cand = np.where(free, ov[i], -1.0)
        k = int(np.argmax(cand))
        if cand[k] > iou_match:
            tp[i] = True
            free[k] = False
    return tp


def ap_from_flags(scores, tp, n_gt: int) -> float | None:
    """All-points interpolated AP; ``None`` when there is no ground truth."""
    if n_gt <= 0:
        return None
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = np.asarray(tp, dtype=bool)[order]
    ctp = np.cumsum(hits)
    cfp = np.cumsum(~hits)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(detections, ground_truth: dict,
                      iou_match: float = MATCH_THRESHOLD) -> float | None:
    """PASCAL AP over detections pooled from several images.

    ``ground_truth`` maps image id to an ``(g, 4)`` array.  Returns ``None``
    when there are no ground-truth boxes at all.
    """
    detections = list(detections)
    n_gt = sum(len(np.reshape(g, (-1, 4))) for g in ground_truth.values())
    if n_gt == 0:
        return None
    scores = np.array([d.score for d in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(detections), dtype=bool)
    by_image: dict = {}
    for pos in order:
        by_image.setdefault(detections[pos].image_id, []).append(pos)
    for image_id, positions in by_image.items():
        gt = ground_truth.get(image_id, np.zeros((0, 4)))
        wins = np.array([detections[p].window for p in positions])
        tp[positions] = match_flags(wins, gt, iou_match)
    return ap_from_flags(scores, tp, n_gt)


# ---------------------------------------------------------------------------
# policies


def exhaustive_episode(image, scorer) -> Episode:
    """Score every proposal independently, in index order."""
    trace = [TraceRow(t + 1, i, float(scorer(image.id, i)), 0.0)
             for t, i in enumerate(range(image.n_proposals))]
    return Episode(image.id, None, trace, image.windows.copy(), "exhaustive")


def subsampling_baseline(image, scorer, budget: int, rng_seed: int) -> Episode:
    """Score a uniformly random prefix of the proposals."""
    if budget < 1:
        raise InvalidParameterError("budget must be >= 1")
    rng = np.random.default_rng([int(rng_seed), zlib.crc32(image.id.encode("utf-8"))])
    order = rng.permutation(image.n_proposals)[:budget]
    trace = [TraceRow(t + 1, int(i), float(scorer(image.id, int(i))), 0.0)
             for t, i in enumerate(order)]
    return Episode(image.id, None, trace, image.windows[order].copy(), "random")


def episode_detections(episode: Episode, budget: int | None = None) -> list:
    """Detections of the first ``budget`` visits, ordered by proposal index."""
    ep = episode if budget is None else episode.truncated(budget)
    idx, wins, scores = ep.detections()
    return [Detection(ep.image_id, w, s, i)
            for i, w, s in zip(idx.tolist(), wins.tolist(), scores.tolist())]


def _ground_truth(dataset, class_name: str) -> dict:
    return {im.id: im.gt(class_name) for im in dataset}


def dataset_ap(dataset, episodes: dict, class_name: str, budget: int | None = None,
               iou_threshold: float = NMS_THRESHOLD) -> float | None:
    """AP of the first ``budget`` visits of every image (images without an episode add none)."""
    dets = []
    for im in dataset:
        ep = episodes.get(im.id)
        if ep is not None:
            dets.extend(nms(episode_detections(ep, budget), iou_threshold))
    return average_precision(dets, _ground_truth(dataset, class_name))


def _check_checkpoints(checkpoints, max_budget: int | None = None) -> np.ndarray:
    cps = np.asarray(list(checkpoints), dtype=np.int64)
    if cps.size == 0:
        raise InvalidInputError("need at least one checkpoint")
    if cps[0] < 0 or np.any(np.diff(cps) <= 0):
        raise InvalidInputError("checkpoints must be non-negative and strictly increasing")
    if max_budget is not None and cps[-1] > max_budget:
        raise InvalidInputError(f"checkpoint {cps[-1]} exceeds the largest proposal count "
                                f"{max_budget}")
    return cps


class _PrefixAP:
    """Pools per-image prefix NMS/matching results into one AP per checkpoint."""

    def __init__(self, checkpoints: np.ndarray, n_gt: int):
        self.cps = checkpoints
        self.n_gt = n_gt
        self.scores, self.kept, self.tp = [], [], []

    def add(self, windows, scores, indices, gt, iou_threshold=NMS_THRESHOLD):
        """Add one image's visited windows, scores and proposal indices, in visit order."""
        m = len(scores)
        rank = np.lexsort((indices, -np.asarray(scores, dtype=np.float64)))
        visit_time = np.arange(m, dtype=np.int64)
        suppress = iou_matrix(windows, windows) > iou_threshold
        gt_iou = iou_matrix(windows, gt) if len(gt) else np.zeros((m, 0))
        kept, tp = prefix_nms_match(rank, visit_time, suppress, gt_iou, self.cps,
                                    MATCH_THRESHOLD)
        self.scores.append(np.asarray(scores, dtype=np.float64)[rank])
        self.kept.append(kept)
        self.tp.append(tp)

    def curve(self) -> np.ndarray:
        if not self.scores:
            return np.array([0.0 if self.n_gt else np.nan] * len(self.cps))
        scores = np.concatenate(self.scores)
        kept = np.concatenate(self.kept, axis=1)
        tp = np.concatenate(self.tp, axis=1)
        out = []
        for c in range(len(self.cps)):
            sel = kept[c]
            ap = ap_from_flags(scores[sel], tp[c][sel], self.n_gt)
            out.append(np.nan if ap is None else ap)
        return np.array(out)


def budget_curve(dataset, episodes: dict, checkpoints, class_name: str,
                 policy: str = "active", iou_threshold: float = NMS_THRESHOLD,
                 fast: bool = True) -> BudgetCurve:
    """AP after the first ``b`` visits of every image, for each checkpoint ``b``.

    ``episodes`` maps image id to an episode run at least to the largest
    checkpoint (shorter ones contribute all their visits).  ``fast=False``
    runs plain NMS and AP at every checkpoint; both give identical numbers.
    """
    max_n = max((im.n_proposals for im in dataset), default=0)
    cps = _check_checkpoints(checkpoints, max_n)
    gt = _ground_truth(dataset, class_name)
    n_gt = sum(len(g) for g in gt.values())
    if n_gt == 0:
        raise InvalidInputError(f"no ground truth for class {class_name!r}; AP is undefined")
    if not fast:
        ap = [dataset_ap(dataset, episodes, class_name, int(b), iou_threshold) for b in cps]
        return BudgetCurve(cps, ap, class_name, policy)
    pool = _PrefixAP(cps, n_gt)
    for im in dataset:
        ep = episodes.get(im.id)
        if ep is None:
            continue
        ep = ep.truncated(int(cps[-1]))
        pool.add(ep.windows, ep.scores, ep.indices, gt[im.id], iou_threshold)
    return BudgetCurve(cps, pool.curve(), class_name, policy)


def run_policy(dataset, policy: str, scorer, *, forest=None, theta: Hyperparameters | None = None,
               budget: int | None = None, seed: int = 0, start=None) -> dict:
    """Episodes for every image under ``active``, ``random`` or ``exhaustive``."""
    out = {}
    for im in dataset:
        if policy == "active":
            th = theta if budget is None else theta.with_budget(budget)
            out[im.id] = run_episode(im, forest, scorer, th, start)
        elif policy == "random":
            out[im.id] = subsampling_baseline(im, scorer, budget or im.n_proposals, seed)
        elif policy == "exhaustive":
            out[im.id] = exhaustive_episode(im, scorer)
        else:
            raise InvalidInputError(f"unknown policy {policy!r}; use active, random or exhaustive")
    return out


def subsampling_curves(dataset, scorer, checkpoints, class_name: str, seeds) -> list:
    """One random-order budget curve per seed."""
    cps = list(checkpoints)
    return [budget_curve(dataset, run_policy(dataset, "random", scorer, budget=cps[-1],
                                             seed=s), cps, class_name, policy=f"random:{s}")
            for s in seeds]


def mean_curve(curves, policy: str = "random") -> BudgetCurve:
    ap = np.mean([c.ap for c in curves], axis=0)
    return BudgetCurve(curves[0].budgets, ap, curves[0].class_name, policy)


# ---------------------------------------------------------------------------
# tuning


def _log_grid(n: int = 5) -> tuple:
    return tuple(float(v) for v in np.logspace(-2.0, 0.0, n))


@dataclass(frozen=True)
class GridConfig:
    sigma_s: tuple = field(default_factory=_log_grid)
    sigma_c: tuple = field(default_factory=_log_grid)
    lam: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)

    def __post_init__(self):
        for name in ("sigma_s", "sigma_c", "lam"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not (self.sigma_s and self.sigma_c and self.lam):
            raise InvalidInputError("tuning grid is empty")
        if min(self.sigma_s + self.sigma_c) <= 0:
            raise InvalidParameterError("grid bandwidths must be positive")
        if not all(0.0 <= v <= 1.0 for v in self.lam):
            raise InvalidParameterError("grid lambdas must lie in [0, 1]")

    def points(self) -> list[tuple[float, float, float]]:
        """``(lam, sigma_s, sigma_c)`` triples."""
        return [(lam, ss, sc) for lam in self.lam for ss in self.sigma_s for sc in self.sigma_c]

    def to_dict(self) -> dict:
        return {"sigma_s": list(self.sigma_s), "sigma_c": list(self.sigma_c),
                "lambda": list(self.lam)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        try:
            return cls(tuple(d["sigma_s"]), tuple(d["sigma_c"]), tuple(d["lambda"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad grid: {exc}", where="grid config") from None


@dataclass
class TuningResult:
    best: Hyperparameters
    table: list  # one dict per grid point: lambda, sigma_s, sigma_c, auc, fold_auc
    checkpoints: list
    folds: list  # held-out image ids per fold


def fold_split(dataset, k: int, seed: int = 0) -> list[list[str]]:
    """Partition image ids into ``k`` folds after a seeded shuffle."""
    ids = [im.id for im in dataset]
    if k < 2 or k > len(ids):
        raise InvalidParameterError(f"need 2 <= folds <= {len(ids)} images, got {k}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return [sorted(ids[i] for i in part) for part in np.array_split(perm, k)]


def grid_visit_orders(image, contexts: np.ndarray, scores: np.ndarray, start_idx: int,
                      grid: GridConfig, budget: int) -> np.ndarray:
    """Visit order of every grid point on one image, ``(G, min(budget, n))``.

    Equivalent to calling :func:`run_episode` once per grid point.
    """
    ss = np.array(grid.sigma_s)
    sc = np.array(grid.sigma_c)
    ks, kc = kernel_rows(image.windows, contexts, 2.0 * ss * ss, 2.0 * sc * sc)
    pts = grid.points()
    s_idx = np.array([grid.sigma_s.index(p[1]) for p in pts], dtype=np.int64)
    c_idx = np.array([grid.sigma_c.index(p[2]) for p in pts], dtype=np.int64)
    lams = np.array([p[0] for p in pts])
    return lockstep_episodes(start_idx, np.ascontiguousarray(scores, dtype=np.float64),
                             ks, kc, s_idx, c_idx, lams, min(budget, image.n_proposals))


def tune_hyperparameters(dataset, forest, scorer, grid: GridConfig | None = None,
                         folds: int = 2, checkpoints=None, *, class_name: str | None = None,
                         seed: int = 0, forest_factory=None) -> TuningResult:
    """Cross-validated grid search maximizing the area under the budget curve.

    Each fold is held out in turn; its images are searched with every grid
    point and scored by the normalized trapezoidal AUC at ``checkpoints``.
    The start window comes from the other folds' ground truth.  With
    ``forest_factory`` (a callable taking the training images) a forest is
    trained per fold; otherwise ``forest`` serves every fold.  Ties go to the
    smaller lambda, then sigma_C, then sigma_S.
    """
    grid = grid or GridConfig()
    class_name = class_name or forest.class_name
    cps = _check_checkpoints(checkpoints if checkpoints is not None else default_checkpoints(100))
    if cps[0] == 0:
        cps = cps[1:] if len(cps) > 1 else cps
    budget = int(cps[-1])
    parts = fold_split(dataset, folds, seed)
    pts = grid.points()
    fold_auc = np.zeros((len(parts), len(pts)))
    for f, held in enumerate(parts):
        held_set = set(held)
        train_ids = [im.id for im in dataset if im.id not in held_set]
        train = dataset.subset(train_ids)
        model = forest_factory(train) if forest_factory is not None else forest
        try:
            start = initial_window(train, class_name)
        except InvalidInputError:
            start = model.start_window
        test = dataset.subset(held)
        n_gt = sum(len(im.gt(class_name)) for im in test)
        if n_gt == 0:
            raise InvalidInputError(f"fold {f} has no ground truth for {class_name!r}")
        pools = [_PrefixAP(cps, n_gt) for _ in pts]
        for im in test:
            scores = np.asarray(scorer.scores_for(im), dtype=np.float64)
            contexts = model.context_many(im.windows, im.codes)
            orders = grid_visit_orders(im, contexts, scores, start_index(im.windows, start),
                                       grid, budget)
            gt = im.gt(class_name)
            for g, order in enumerate(orders):
                order = order[order >= 0]
                pools[g].add(im.windows[order], scores[order], order, gt)
        for g, pool in enumerate(pools):
            fold_auc[f, g] = area_under_curve(cps, pool.curve())
    mean_auc = fold_auc.mean(axis=0)
    table = [{"lambda": p[0], "sigma_s": p[1], "sigma_c": p[2], "auc": float(mean_auc[g]),
              "fold_auc": fold_auc[:, g].tolist()} for g, p in enumerate(pts)]
    best = min(range(len(pts)), key=lambda g: (-mean_auc[g], pts[g][0], pts[g][2], pts[g][1]))
    lam, ss, sc = pts[best]
    return TuningResult(Hyperparameters(lam, ss, sc, budget), table, cps.tolist(), parts)


# ---------------------------------------------------------------------------
# files

CURVE_COLUMNS = ("budget", "ap")
DETECTION_COLUMNS = ("image_id", "x", "y", "w", "h", "score")


def write_curve(curve: BudgetCurve, path) -> None:
    write_table(path, CURVE_COLUMNS, ((int(b), float(a)) for b, a in curve.points))


def read_curve(path, class_name: str = "", policy: str = "") -> BudgetCurve:
    rows = read_table(path, CURVE_COLUMNS)
    try:
        budgets = [int(r[0]) for r in rows]
        ap = [float(r[1]) for r in rows]
    except (ValueError, IndexError):
        raise ValidationError("unparseable curve row", where=str(path)) from None
    return BudgetCurve(budgets, ap, class_name, policy)


def write_detections(detections, path) -> None:
    write_table(path, DETECTION_COLUMNS,
                ((d.image_id, *d.window, float(d.score)) for d in detections))


def read_detections(path) -> list:
    out = []
    for lineno, row in enumerate(read_table(path, DETECTION_COLUMNS), start=3):
        try:
            out.append(Detection(row[0], [float(v) for v in row[1:5]], float(row[5])))
        except (ValueError, IndexError, InvalidInputError) as exc:
            raise ValidationError(f"bad detection row: {exc}", where=f"{path}:{lineno}") from None
        if not all(math.isfinite(v) for v in out[-1].window):
            raise ValidationError("non-finite window", where=f"{path}:{lineno}")
    return out
