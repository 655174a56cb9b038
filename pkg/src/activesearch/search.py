"""Active search over one image's proposals.

Every proposal carries a belief, all zero at the start.  Each iteration
scores the unvisited proposal with the highest belief, then raises or lowers
every belief by a mix of two forces:

* the score force spreads ``phi - 0.5`` of the observed window to its
  neighbours through the IoU kernel (attractive above 0.5, repulsive below);
* the context force adds kernel mass around the J windows the forest
  predicts from the observation.

``b += lam * S + (1 - lam) * C``.  Beliefs are a raw running sum and are
never renormalized.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import EpisodeExhausted, InvalidInputError, InvalidParameterError, ValidationError
from .forest import QueryStats
from ._kernels import belief_step
from .geometry import (Window, WindowSet, centers, iou_matrix, iou_one_to_many,
                       kernel_from_iou)
from .tabular import read_table, write_table


@dataclass(frozen=True)
class Hyperparameters:
    lam: float = 0.5
    sigma_s: float = 0.1
    sigma_c: float = 0.3
    budget: int = 100

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise InvalidParameterError(f"lambda must lie in [0, 1], got {self.lam}")
        for name in ("sigma_s", "sigma_c"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if int(self.budget) < 1:
            raise InvalidParameterError("budget must be >= 1")

    def with_budget(self, budget: int) -> "Hyperparameters":
        return Hyperparameters(self.lam, self.sigma_s, self.sigma_c, int(budget))

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "sigma_s": self.sigma_s, "sigma_c": self.sigma_c,
                "budget": self.budget}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        return cls(float(d["lambda"]), float(d["sigma_s"]), float(d["sigma_c"]),
                   int(d.get("budget", 100)))


def initial_window(dataset, class_name: str) -> Window:
    """Componentwise mean of every ground-truth box of the class."""
    boxes = [im.gt(class_name) for im in dataset]
    boxes = np.concatenate(boxes) if boxes else np.zeros((0, 4))
    if len(boxes) == 0:
        raise InvalidInputError(f"no ground-truth boxes for class {class_name!r}")
    return Window.from_array(boxes.mean(axis=0))


def start_index(windows: np.ndarray, start) -> int:
    """Proposal closest to the start window: highest IoU, then nearest center."""
    ov = iou_one_to_many(start, windows)
    start_c = centers(np.asarray(start.astuple() if isinstance(start, Window) else start))
    dist = np.linalg.norm(centers(windows) - start_c, axis=1)
    key = np.where(ov == ov.max(), dist, np.inf)
    return int(np.argmin(key))


@dataclass
class BeliefState:
    beliefs: np.ndarray
    visited: list = field(default_factory=list)  # (index, score) in visit order
    t: int = 0

    def __post_init__(self):
        self.beliefs = np.asarray(self.beliefs, dtype=np.float64)
        self.mask = np.zeros(len(self.beliefs), dtype=bool)
        for i, _ in self.visited:
            self.mask[i] = True

    @classmethod
    def fresh(cls, n: int) -> "BeliefState":
        return cls(np.zeros(n))

    @property
    def exhausted(self) -> bool:
        return bool(self.mask.all())

    def mark(self, index: int, score: float) -> None:
        if self.mask[index]:
            raise InvalidInputError(f"proposal {index} already visited")
        self.mask[index] = True
        self.visited.append((int(index), float(score)))
        self.t += 1


def select_next(state: BeliefState, windows: np.ndarray | None = None, start=None) -> int:
    """Highest-belief unvisited proposal (lowest index on ties).

    On the first iteration, when ``windows`` and ``start`` are given, the
    proposal nearest the start window is chosen instead.
    """
    if state.exhausted:
        raise EpisodeExhausted("every proposal has been visited")
    if state.t == 0 and start is not None and windows is not None:
        return start_index(windows, start)
    return int(np.argmax(np.where(state.mask, -np.inf, state.beliefs)))


def score_force(o_i, o_t, phi_t: float, sigma_s: float):
    """Kernel(o_i, o_t) * (phi_t - 0.5); ``o_i`` may be one window or an (n, 4) array."""
    if isinstance(o_i, Window) or np.ndim(o_i) == 1:
        return float(kernel_from_iou(iou_one_to_many(o_t, np.reshape(_arr(o_i), (1, 4)))[0],
                                     sigma_s) * (phi_t - 0.5))
    return kernel_from_iou(iou_one_to_many(o_t, o_i), sigma_s) * (phi_t - 0.5)


def context_force(o_i, gamma, sigma_c: float):
    """Sum of kernels between ``o_i`` and every displaced window in ``gamma``."""
    gamma = np.asarray([_arr(g) for g in gamma], dtype=np.float64).reshape(-1, 4)
    if len(gamma) == 0:
        raise InvalidInputError("context needs at least one displaced window")
    if isinstance(o_i, Window) or np.ndim(o_i) == 1:
        return float(kernel_from_iou(iou_matrix(gamma, _arr(o_i)), sigma_c).sum())
    return kernel_from_iou(iou_matrix(gamma, o_i), sigma_c).sum(axis=0)


def _arr(w):
    return w.as_array() if isinstance(w, Window) else np.asarray(w, dtype=np.float64)


def force_rows(o_t, gamma: np.ndarray, windows: np.ndarray, sigma_s: float, sigma_c: float):
    """Unsigned score kernel row and context force row for one observation."""
    ks = kernel_from_iou(iou_one_to_many(o_t, windows), sigma_s)
    kc = kernel_from_iou(iou_matrix(gamma, windows), sigma_c).sum(axis=0)
    return ks, kc


def update_beliefs(state: BeliefState, o_t, phi_t: float, gamma, theta: Hyperparameters,
                   windows: np.ndarray) -> BeliefState:
    """Add ``lam * S + (1 - lam) * C`` to every belief, visited ones included."""
    ks, kc = force_rows(_arr(o_t), np.asarray(gamma, dtype=np.float64).reshape(-1, 4),
                        windows, theta.sigma_s, theta.sigma_c)
    state.beliefs += theta.lam * (ks * (phi_t - 0.5)) + (1.0 - theta.lam) * kc
    return state


@dataclass
class TraceRow:
    t: int
    index: int
    score: float
    belief: float


@dataclass
class Episode:
    image_id: str
    theta: Hyperparameters | None
    trace: list
    windows: np.ndarray  # windows of the visited proposals, visit order
    policy: str = "active"
    beliefs: np.ndarray | None = None
    contexts: np.ndarray | None = None  # (t, J, 4) displaced windows per visit
    snapshots: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trace)

    @property
    def indices(self) -> np.ndarray:
        return np.array([r.index for r in self.trace], dtype=np.int64)

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.trace], dtype=np.float64)

    def truncated(self, budget: int) -> "Episode":
        return Episode(self.image_id, self.theta, self.trace[:budget], self.windows[:budget],
                       self.policy)

    def detections(self):
        """Visited windows with their scores, ordered by proposal index."""
        idx = self.indices
        order = np.argsort(idx, kind="stable")
        return idx[order], self.windows[order], self.scores[order]


TRACE_COLUMNS = ("t", "proposal_index", "x", "y", "w", "h", "score", "belief_at_selection")
SNAPSHOT_COLUMNS = ("proposal_index", "belief")


def write_trace(episode: Episode, path) -> None:
    rows = ((r.t, r.index, *map(float, w), r.score, r.belief)
            for r, w in zip(episode.trace, episode.windows))
    write_table(path, TRACE_COLUMNS, rows)


def write_snapshot(beliefs: np.ndarray, path) -> None:
    write_table(path, SNAPSHOT_COLUMNS, ((i, float(b)) for i, b in enumerate(beliefs)))


def read_trace(path, image_id: str) -> Episode:
    """Episode with the visits recorded in a trace file (no beliefs or contexts)."""
    rows = read_table(path, TRACE_COLUMNS)
    trace, windows = [], []
    for lineno, row in enumerate(rows, start=3):
        try:
            t, idx = int(row[0]), int(row[1])
            win = [float(v) for v in row[2:6]]
            score, belief = float(row[6]), float(row[7])
        except (ValueError, IndexError):
            raise ValidationError("unparseable trace row", where=f"{path}:{lineno}") from None
        trace.append(TraceRow(t, idx, score, belief))
        windows.append(win)
    return Episode(image_id, None, trace, np.array(windows).reshape(-1, 4), "trace")


def run_episode(image, forest, scorer, theta: Hyperparameters, start=None, *,
                snapshots=(), context: str = "eager", stats: QueryStats | None = None,
                timed: bool = False) -> Episode:
    """Search one image until the budget is spent or every proposal is visited.

    ``context="eager"`` routes all proposals through the forest in one
    vectorized pass up front; ``"lazy"`` queries the forest only for the
    observed window at each iteration.  Both give identical episodes.
    ``start`` defaults to the forest's stored start window.
    """
    n = image.n_proposals
    if n == 0:
        raise InvalidInputError(f"image {image.id!r} has no proposals")
    if start is None:
        start = forest.start_window
    if start is None:
        raise InvalidInputError("no start window given and the model stores none")
    ws = WindowSet(image.windows)
    windows = ws.windows
    snapshots = set(int(s) for s in snapshots)
    eager = None
    if context == "eager":
        eager = forest.context_many(windows, image.codes)
    elif context != "lazy":
        raise InvalidInputError(f"unknown context mode {context!r}")

    beliefs = np.zeros(n)
    visited = np.zeros(n, dtype=bool)
    ks = np.empty(n)
    kc = np.empty(n)
    two_ss = 2.0 * theta.sigma_s * theta.sigma_s
    two_sc = 2.0 * theta.sigma_c * theta.sigma_c
    budget = min(int(theta.budget), n)
    trace, contexts, snaps = [], [], {}
    t_query, t_update = [], []
    idx = start_index(windows, start)
    for t in range(1, budget + 1):
        belief = float(beliefs[idx])
        phi = float(scorer(image.id, idx))
        if not 0.0 <= phi <= 1.0:
            raise InvalidInputError(f"scorer returned {phi} for proposal {idx} of {image.id!r}")
        tic = time.perf_counter()
        if eager is not None:
            gamma = eager[idx]
        else:
            gamma = forest.context_windows(windows[idx], image.codes[idx], stats)
        tac = time.perf_counter()
        visited[idx] = True
        nxt = belief_step(beliefs, visited, windows[idx], phi, gamma, ws.x, ws.y, ws.w,
                          ws.h, ws.area, theta.lam, two_ss, two_sc, ks, kc)
        if timed:
            t_query.append(tac - tic)
            t_update.append(time.perf_counter() - tac)
        trace.append(TraceRow(t, idx, phi, belief))
        contexts.append(gamma)
        if t in snapshots:
            snaps[t] = beliefs.copy()
        idx = nxt
    order = np.array([r.index for r in trace], dtype=np.int64)
    ep = Episode(image.id, theta, trace, windows[order].copy(), "active",
                 beliefs, np.array(contexts).reshape(len(trace), -1, 4), snaps)
    if timed:
        ep.timings = {"forest_query": t_query, "belief_update": t_update}
    return ep


def recompute_beliefs(windows: np.ndarray, episode: Episode, theta: Hyperparameters) -> np.ndarray:
    """Non-incremental beliefs: the whole cumulative sum evaluated at once."""
    seen = episode.windows
    scores = episode.scores
    s = kernel_from_iou(iou_matrix(windows, seen), theta.sigma_s) @ (scores - 0.5)
    ctx = episode.contexts.reshape(-1, 4)
    c = kernel_from_iou(iou_matrix(windows, ctx), theta.sigma_c).sum(axis=1)
    return theta.lam * s + (1.0 - theta.lam) * c
