"""Window scorers: the black-box classifier the search queries.

A scorer maps ``(image_id, proposal_index)`` to a score in [0, 1] and must be
deterministic.  Two implementations ship: an IoU oracle with seeded noise for
synthetic benchmarks, and a replay of precomputed score tables.
"""

from __future__ import annotations

import os
import zlib
from typing import Protocol, runtime_checkable

import numpy as np

from .dataio import load_score_table
from .errors import InvalidInputError, ValidationError
from .geometry import iou_matrix


@runtime_checkable
class ScoreFn(Protocol):
    cost_label: str

    def __call__(self, image_id: str, index: int) -> float: ...

    def scores_for(self, image) -> np.ndarray: ...


def _check_range(scores: np.ndarray, where: str) -> np.ndarray:
    bad = ~((scores >= 0.0) & (scores <= 1.0))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"score {scores[i]!r} at index {i} outside [0, 1]", where=where)
    return scores


def oracle_score(window, ground_truth, gamma: float = 1.0, noise: float = 0.0) -> float:
    """``clip(max_g IoU(window, g) ** gamma + noise, 0, 1)``; empty ground truth gives base 0."""
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 4)
    base = float(iou_matrix(np.asarray(window, dtype=np.float64), gt).max()) if len(gt) else 0.0
    return min(max(base ** gamma + noise, 0.0), 1.0)


def stable_image_key(image_id: str) -> int:
    return zlib.crc32(image_id.encode("utf-8"))


class OracleScorer:
    """IoU-with-ground-truth scorer plus per-proposal uniform noise.

    The noise for image ``i`` is drawn once as a length-N vector from
    ``default_rng([seed, crc32(i)])``, so a score depends only on the image,
    the proposal index and the seed.
    """

    cost_label = "oracle"

    def __init__(self, dataset, class_name: str, noise: float = 0.05, gamma: float = 1.0,
                 seed: int = 0):
        if not (0.0 <= noise <= 1.0):
            raise InvalidInputError(f"noise amplitude must lie in [0, 1], got {noise}")
        if gamma <= 0:
            raise InvalidInputError("gamma must be positive")
        self.images = {im.id: im for im in dataset}
        self.class_name = class_name
        self.noise = float(noise)
        self.gamma = float(gamma)
        self.seed = int(seed)
        self._cache: dict[str, np.ndarray] = {}

    def scores_for(self, image) -> np.ndarray:
        image_id = image if isinstance(image, str) else image.id
        cached = self._cache.get(image_id)
        if cached is not None:
            return cached
        im = self.images[image_id]
        gt = im.gt(self.class_name)
        base = iou_matrix(im.windows, gt).max(axis=1) if len(gt) else np.zeros(im.n_proposals)
        eps = np.zeros(im.n_proposals)
        if self.noise > 0:
            rng = np.random.default_rng([self.seed, stable_image_key(image_id)])
            eps = rng.uniform(-self.noise, self.noise, size=im.n_proposals)
        scores = np.clip(base ** self.gamma + eps, 0.0, 1.0)
        scores.setflags(write=False)
        self._cache[image_id] = scores
        return scores

    def __call__(self, image_id: str, index: int) -> float:
        return float(self.scores_for(image_id)[index])


class ScoreTable:
    """Dense per-image scores aligned with proposal indices."""

    def __init__(self, scores):
        arr = np.array(scores, dtype=np.float64).reshape(-1)
        _check_range(arr, "score table")
        arr.setflags(write=False)
        self.scores = arr

    def __len__(self):
        return len(self.scores)

    @classmethod
    def load(cls, path, n_proposals: int | None = None) -> "ScoreTable":
        return cls(load_score_table(path, n_proposals))


def table_score(table: ScoreTable, index: int) -> float:
    if not (0 <= index < len(table)):
        raise InvalidInputError(f"proposal index {index} out of range 0..{len(table) - 1}")
    return float(table.scores[index])


class TableScorer:
    """Replays precomputed scores, one :class:`ScoreTable` per image."""

    cost_label = "table"

    def __init__(self, tables: dict):
        self.tables = dict(tables)

    @classmethod
    def from_directory(cls, path, dataset) -> "TableScorer":
        """Load ``<path>/<image_id>.tsv`` for every image of the dataset."""
        tables = {}
        for im in dataset:
            f = os.path.join(path, f"{im.id}.tsv")
            if not os.path.exists(f):
                raise ValidationError("missing score table", where=f)
            tables[im.id] = ScoreTable.load(f, im.n_proposals)
        return cls(tables)

    def scores_for(self, image) -> np.ndarray:
        image_id = image if isinstance(image, str) else image.id
        return self.tables[image_id].scores

    def __call__(self, image_id: str, index: int) -> float:
        return table_score(self.tables[image_id], index)


class ConstantScorer:
    """Scores every window identically; a degenerate scorer for ablations."""

    cost_label = "constant"

    def __init__(self, value: float = 0.5):
        if not (0.0 <= value <= 1.0):
            raise InvalidInputError("constant score must lie in [0, 1]")
        self.value = float(value)
        self._cache: dict[int, np.ndarray] = {}

    def scores_for(self, image) -> np.ndarray:
        n = image.n_proposals
        if n not in self._cache:
            arr = np.full(n, self.value)
            arr.setflags(write=False)
            self._cache[n] = arr
        return self._cache[n]

    def __call__(self, image_id: str, index: int) -> float:
        return self.value


class CountingScorer:
    """Wraps a scorer and counts per-proposal calls."""

    def __init__(self, inner):
        self.inner = inner
        self.cost_label = inner.cost_label
        self.calls = 0
        self.seen: set = set()

    def scores_for(self, image) -> np.ndarray:
        return self.inner.scores_for(image)

    def __call__(self, image_id: str, index: int) -> float:
        self.calls += 1
        self.seen.add((image_id, int(index)))
        return self.inner(image_id, index)


def parse_scorer_spec(spec: str, dataset, class_name: str, seed: int = 0):
    """Build a scorer from ``oracle:<noise>`` or ``table:<dir>``."""
    kind, _, arg = spec.partition(":")
    if kind == "oracle":
        try:
            noise = float(arg) if arg else 0.05
        except ValueError:
            raise InvalidInputError(f"bad oracle noise in scorer spec {spec!r}") from None
        return OracleScorer(dataset, class_name, noise=noise, seed=seed)
    if kind == "table":
        if not arg:
            raise InvalidInputError("table scorer needs a directory: table:<dir>")
        return TableScorer.from_directory(arg, dataset)
    if kind == "constant":
        return ConstantScorer(float(arg) if arg else 0.5)
    raise InvalidInputError(f"unknown scorer spec {spec!r}; use oracle:<noise>, table:<dir> or constant:<value>")
