"""Context extractor: a forest of distance-test trees regressing displacements.

Each internal node compares the distance between the query window and a
stored pivot sample against a threshold (``d >= tau`` goes left).  The
distance is either ``1 - IoU`` of the windows or the normalized Hamming
distance of the appearance codes.  Leaves hold the medoid displacement of
the training samples that reached them.

Splits are chosen extremely-randomized style: a fixed number of random
(pivot, kind, threshold) triplets per node, keeping the one with the largest
information gain, where the entropy of a displacement set is the sum of the
per-dimension histogram entropies.
"""

from __future__ import annotations

import json
import math
import os
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ._kernels import route_leaves
from .errors import InvalidInputError, NoTrainingDataError, ValidationError
from .features import AppearanceCode, DistanceKind, EmbedderModel, hamming_matrix
from .geometry import (Displacement, Window, apply_displacements, centers, clamp_array,
                       iou, iou_matrix, iou_rows)

FORMAT_VERSION = 1
HIST_LOW, HIST_HIGH = -1.0, 1.0
LEAF = -1
# splits with a gain below this are treated as uninformative (round-off)
_MIN_GAIN = 1e-12


@dataclass
class ForestConfig:
    n_trees: int = 10
    images_per_tree: int = 40
    max_depth: int = 15
    min_leaf: int = 5
    n_candidates: int = 100
    n_bins: int = 20
    check: bool = False

    def __post_init__(self):
        for name in ("n_trees", "images_per_tree", "max_depth", "n_candidates", "n_bins"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.min_leaf < 1:
            raise InvalidInputError("min_leaf must be >= 1")


@dataclass(frozen=True)
class TrainingSample:
    window: Window
    code: AppearanceCode
    displacement: Displacement
    image_id: str = ""


@dataclass
class SampleSet:
    """Column-oriented training samples for one tree."""

    windows: np.ndarray
    codes: np.ndarray
    displacements: np.ndarray
    image_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.windows = np.ascontiguousarray(self.windows, dtype=np.float64).reshape(-1, 4)
        codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        self.codes = codes if codes.ndim == 2 else codes.reshape(len(self.windows), -1)
        self.displacements = np.ascontiguousarray(self.displacements,
                                                  dtype=np.float64).reshape(-1, 4)
        if not (len(self.windows) == len(self.codes) == len(self.displacements)):
            raise InvalidInputError("sample columns differ in length")

    def __len__(self):
        return len(self.windows)

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample]) -> "SampleSet":
        if not samples:
            return cls(np.zeros((0, 4)), np.zeros((0, 1), np.uint8), np.zeros((0, 4)))
        return cls(np.array([s.window.astuple() for s in samples]),
                   np.stack([s.code.packed for s in samples]),
                   np.array([s.displacement.astuple() for s in samples]),
                   [s.image_id for s in samples])

    def sample(self, i: int) -> TrainingSample:
        return TrainingSample(Window.from_array(self.windows[i]), AppearanceCode(self.codes[i]),
                              Displacement.from_array(self.displacements[i]),
                              self.image_ids[i] if self.image_ids else "")


# ---------------------------------------------------------------------------
# entropy and information gain


def bin_indices(displacements: np.ndarray, n_bins: int = 20) -> np.ndarray:
    d = np.asarray(displacements, dtype=np.float64).reshape(-1, 4)
    idx = np.floor((d - HIST_LOW) / (HIST_HIGH - HIST_LOW) * n_bins).astype(np.int64)
    return np.clip(idx, 0, n_bins - 1)


def entropy(displacements, n_bins: int = 20) -> float:
    """Sum over the four dimensions of the histogram Shannon entropy, in bits."""
    d = np.asarray(displacements, dtype=np.float64).reshape(-1, 4)
    if len(d) == 0:
        raise InvalidInputError("entropy of an empty displacement set")
    bins = bin_indices(d, n_bins)
    total = 0.0
    for k in range(4):
        p = np.bincount(bins[:, k], minlength=n_bins) / len(d)
        p = p[p > 0]
        total -= float(np.sum(p * np.log2(p)))
    return total


def _entropy_from_counts(counts: np.ndarray, sizes: np.ndarray,
                         clog: np.ndarray | None = None) -> np.ndarray:
    """Summed per-dimension entropies from ``(m, 4 * bins)`` counts and set sizes.

    Uses H = log2(n) - sum(c log2 c) / n per dimension; zero-size rows give 0.
    ``clog`` is an optional lookup table of ``c * log2(c)`` indexed by ``c``.
    """
    c = np.rint(counts).astype(np.int64)
    if clog is None:
        clog = _clog_table(int(c.max(initial=0)))
    n = np.asarray(sizes, dtype=np.float64)
    safe = np.where(n > 0, n, 1.0)
    out = 4.0 * np.log2(safe) - clog[c].sum(axis=1) / safe
    return np.maximum(out, 0.0)


def _clog_table(n: int) -> np.ndarray:
    c = np.arange(n + 1, dtype=np.float64)
    out = np.zeros(n + 1)
    out[1:] = c[1:] * np.log2(c[1:])
    return out


def _sorted_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    return a[np.lexsort(a.T[::-1])] if len(a) else a


def information_gain(parent, left, right, n_bins: int = 20) -> float:
    """Entropy reduction of splitting ``parent`` into ``left`` and ``right``.

    Arguments are displacement collections; ``left`` and ``right`` must both
    be non-empty and together form ``parent`` as a multiset.
    """
    p = np.asarray(parent, dtype=np.float64).reshape(-1, 4)
    l = np.asarray(left, dtype=np.float64).reshape(-1, 4)
    r = np.asarray(right, dtype=np.float64).reshape(-1, 4)
    if len(l) == 0 or len(r) == 0:
        raise InvalidInputError("both sides of a split must be non-empty")
    if len(l) + len(r) != len(p) or not np.array_equal(_sorted_rows(np.vstack([l, r])),
                                                       _sorted_rows(p)):
        raise InvalidInputError("left and right do not partition the parent set")
    n = len(p)
    return (entropy(p, n_bins) - len(l) / n * entropy(l, n_bins)
            - len(r) / n * entropy(r, n_bins))


def medoid_index(displacements: np.ndarray) -> int:
    """Index of the element with the smallest summed Euclidean distance to the rest.

    Ties go to the lowest index.
    """
    d = np.asarray(displacements, dtype=np.float64).reshape(-1, 4)
    m = len(d)
    if m == 0:
        raise InvalidInputError("medoid of an empty set")
    if m <= 2048:
        diff = d[:, None, :] - d[None, :, :]
        sums = np.sqrt((diff * diff).sum(axis=2)).sum(axis=1)
        return int(np.argmin(sums))
    # large leaves: collapse duplicates, weight by multiplicity
    uniq, first, counts = np.unique(d, axis=0, return_index=True, return_counts=True)
    sums = np.empty(len(uniq))
    for s in range(0, len(uniq), 512):
        diff = uniq[s:s + 512, None, :] - uniq[None, :, :]
        sums[s:s + 512] = np.sqrt((diff * diff).sum(axis=2)) @ counts
    best = np.flatnonzero(sums == sums.min())
    return int(first[best].min())


# ---------------------------------------------------------------------------
# trees


@dataclass
class Leaf:
    displacement: np.ndarray
    n_samples: int = 1


@dataclass
class Split:
    kind: DistanceKind
    threshold: float
    pivot_window: np.ndarray
    pivot_code: np.ndarray
    left: "Leaf | Split"
    right: "Leaf | Split"


class Tree:
    """Flattened distance-test tree; node 0 is the root."""

    def __init__(self, kind, threshold, left, right, pivot_windows, pivot_codes, values,
                 n_samples=None):
        self.kind = np.asarray(kind, dtype=np.int8)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.pivot_windows = np.asarray(pivot_windows, dtype=np.float64).reshape(-1, 4)
        self.pivot_codes = np.asarray(pivot_codes, dtype=np.uint8).reshape(len(self.kind), -1)
        self.values = np.asarray(values, dtype=np.float64).reshape(-1, 4)
        self.n_samples = (np.zeros(len(self.kind), np.int64) if n_samples is None
                          else np.asarray(n_samples, dtype=np.int64))
        self.nbits = 8 * self.pivot_codes.shape[1]
        # scalar routing tables; python floats/ints are faster than numpy scalars
        self._kind = self.kind.tolist()
        self._thr = self.threshold.tolist()
        self._left = self.left.tolist()
        self._right = self.right.tolist()
        self._pw = [tuple(r) for r in self.pivot_windows.tolist()]
        self._pc = [int.from_bytes(r.tobytes(), "big") for r in self.pivot_codes]
        self._pc_words = None

    @classmethod
    def from_nested(cls, root, nbytes: int) -> "Tree":
        kind, thr, left, right, pw, pc, val, ns = [], [], [], [], [], [], [], []

        def add(node):
            i = len(kind)
            kind.append(LEAF)
            thr.append(0.0)
            left.append(-1)
            right.append(-1)
            pw.append(np.zeros(4))
            pc.append(np.zeros(nbytes, np.uint8))
            val.append(np.zeros(4))
            ns.append(0)
            if isinstance(node, Leaf):
                val[i] = np.asarray(node.displacement, dtype=np.float64)
                ns[i] = node.n_samples
            else:
                kind[i] = int(node.kind)
                thr[i] = float(node.threshold)
                pw[i] = np.asarray(node.pivot_window, dtype=np.float64)
                pc[i] = np.asarray(node.pivot_code, dtype=np.uint8).reshape(-1)
                left[i] = add(node.left)
                right[i] = add(node.right)
            return i

        add(root)
        return cls(kind, thr, left, right, np.array(pw), np.array(pc).reshape(len(kind), nbytes),
                   np.array(val), ns)

    @classmethod
    def single_leaf(cls, displacement, nbytes: int = 64) -> "Tree":
        return cls.from_nested(Leaf(np.asarray(displacement, dtype=np.float64)), nbytes)

    @property
    def n_nodes(self) -> int:
        return len(self.kind)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.kind == LEAF))

    def depth(self) -> int:
        """Length (in edges) of the longest root-to-leaf path."""
        best, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            if self._kind[node] == LEAF:
                best = max(best, d)
            else:
                stack.append((self._left[node], d + 1))
                stack.append((self._right[node], d + 1))
        return best

    def leaf_of(self, window, code_int: int, stats=None) -> int:
        """Node index of the leaf reached by one query; counts distance evaluations."""
        kinds, thr, pw, pc = self._kind, self._thr, self._pw, self._pc
        node, evals = 0, 0
        while kinds[node] != LEAF:
            if kinds[node] == DistanceKind.LOCATION:
                d = 1.0 - iou(window, pw[node])
            else:
                d = (code_int ^ pc[node]).bit_count() / self.nbits
            evals += 1
            node = self._left[node] if d >= thr[node] else self._right[node]
        if stats is not None:
            stats.distance_evals += evals
            stats.routes += 1
        return node

    def route(self, window, code, stats=None) -> np.ndarray:
        if isinstance(code, AppearanceCode):
            code = code.packed
        code_int = code if isinstance(code, int) else int.from_bytes(
            np.asarray(code, np.uint8).tobytes(), "big")
        if isinstance(window, Window):
            window = window.astuple()
        return self.values[self.leaf_of(window, code_int, stats)]

    def leaves_many(self, windows: np.ndarray, codes: np.ndarray,
                    evals: np.ndarray | None = None) -> np.ndarray:
        """Leaf node index for each of ``n`` queries (compiled loop).

        ``evals``, if given, is an int64 array of length ``n`` that receives
        the per-query count of distance tests.
        """
        windows = np.ascontiguousarray(windows, dtype=np.float64).reshape(-1, 4)
        words = _as_words(np.asarray(codes, dtype=np.uint8).reshape(len(windows), -1))
        if self._pc_words is None:
            self._pc_words = _as_words(self.pivot_codes)
        if evals is None:
            evals = np.zeros(len(windows), dtype=np.int64)
        return route_leaves(self.kind, self.threshold, self.left, self.right,
                            self.pivot_windows, self._pc_words, windows, words,
                            float(self.nbits), evals)

    def leaves_levelwise(self, windows: np.ndarray, codes: np.ndarray) -> np.ndarray:
        """Pure-numpy routing, level by level; reference for :meth:`leaves_many`."""
        windows = np.asarray(windows, dtype=np.float64).reshape(-1, 4)
        codes = np.asarray(codes, dtype=np.uint8).reshape(len(windows), -1)
        node = np.zeros(len(windows), dtype=np.int64)
        active = np.flatnonzero(self.kind[node] != LEAF)
        while active.size:
            nd = node[active]
            d = np.empty(active.size)
            loc = self.kind[nd] == DistanceKind.LOCATION
            if loc.any():
                d[loc] = 1.0 - iou_rows(windows[active[loc]], self.pivot_windows[nd[loc]])
            app = ~loc
            if app.any():
                x = codes[active[app]] ^ self.pivot_codes[nd[app]]
                d[app] = np.bitwise_count(x).sum(axis=1, dtype=np.int64) / self.nbits
            node[active] = np.where(d >= self.threshold[nd], self.left[nd], self.right[nd])
            active = active[self.kind[node[active]] != LEAF]
        return node

    def route_many(self, windows: np.ndarray, codes: np.ndarray) -> np.ndarray:
        return self.values[self.leaves_many(windows, codes)]

    def arrays(self) -> dict:
        return {"kind": self.kind, "threshold": self.threshold, "left": self.left,
                "right": self.right, "pivot_windows": self.pivot_windows,
                "pivot_codes": self.pivot_codes, "values": self.values,
                "n_samples": self.n_samples}


def _as_words(codes: np.ndarray) -> np.ndarray:
    """Packed codes as uint64 words, zero-padded; popcount of XOR is unchanged."""
    pad = -codes.shape[1] % 8
    if pad:
        codes = np.concatenate([codes, np.zeros((len(codes), pad), np.uint8)], axis=1)
    return np.ascontiguousarray(codes).view(np.uint64)


def route(tree: Tree, proposal, stats=None) -> Displacement:
    """Displacement stored at the leaf a proposal reaches."""
    return Displacement.from_array(tree.route(proposal.window, proposal.code, stats))


@dataclass
class QueryStats:
    distance_evals: int = 0
    routes: int = 0


# ---------------------------------------------------------------------------
# training


class _TreeBuilder:
    def __init__(self, samples: SampleSet, config: ForestConfig, rng: np.random.Generator):
        self.s = samples
        self.cfg = config
        self.rng = rng
        nb = config.n_bins
        bins = bin_indices(samples.displacements, nb)
        # one-hot histogram membership, one block of n_bins columns per dimension
        self.onehot = np.zeros((len(samples), 4 * nb), dtype=np.float32)
        self.clog = _clog_table(len(samples))
        rows = np.arange(len(samples))
        for k in range(4):
            self.onehot[rows, k * nb + bins[:, k]] = 1.0

    def build(self):
        return self._grow(np.arange(len(self.s)), 0)

    def _leaf(self, idx):
        disp = self.s.displacements[idx]
        m = medoid_index(disp)
        if self.cfg.check and len(idx) <= 200:
            brute = [sum(math.dist(a, b) for b in disp) for a in disp]
            assert np.array_equal(disp[m], disp[int(np.argmin(brute))]), "medoid mismatch"
        return Leaf(disp[m].copy(), len(idx))

    def _grow(self, idx, depth):
        n = len(idx)
        if depth >= self.cfg.max_depth or n <= self.cfg.min_leaf:
            return self._leaf(idx)
        split = self._best_split(idx)
        if split is None:
            return self._leaf(idx)
        kind, tau, pivot, go_left = split
        return Split(DistanceKind(kind), tau, self.s.windows[pivot].copy(),
                     self.s.codes[pivot].copy(),
                     self._grow(idx[go_left], depth + 1),
                     self._grow(idx[~go_left], depth + 1))

    def _best_split(self, idx):
        n = len(idx)
        onehot = self.onehot[idx]
        total = onehot.sum(axis=0)
        h_parent = float(_entropy_from_counts(total[None, :], np.array([n]), self.clog)[0])
        if h_parent <= _MIN_GAIN:
            return None
        T = self.cfg.n_candidates
        pivots = self.rng.integers(n, size=T)
        kinds = self.rng.integers(2, size=T)
        picks = self.rng.integers(n, size=T)

        dist = np.empty((T, n))
        loc = kinds == DistanceKind.LOCATION
        if loc.any():
            dist[loc] = 1.0 - iou_matrix(self.s.windows[idx[pivots[loc]]], self.s.windows[idx])
        if (~loc).any():
            codes = self.s.codes[idx]
            dist[~loc] = hamming_matrix(codes[pivots[~loc]], codes)
        tau = dist[np.arange(T), picks]
        go_left = dist >= tau[:, None]

        n_left = go_left.sum(axis=1)
        n_right = n - n_left
        c_left = go_left.astype(np.float32) @ onehot
        c_right = total[None, :] - c_left
        gain = (h_parent - n_left / n * _entropy_from_counts(c_left, n_left, self.clog)
                - n_right / n * _entropy_from_counts(c_right, n_right, self.clog))
        gain[(n_left == 0) | (n_right == 0)] = -np.inf
        best = int(np.argmax(gain))
        if not gain[best] > _MIN_GAIN:
            return None
        assert n_left[best] > 0 and n_right[best] > 0 and gain[best] >= 0
        return int(kinds[best]), float(tau[best]), int(idx[pivots[best]]), go_left[best]


def train_tree(samples: SampleSet, config: ForestConfig | None = None,
               rng_seed: int = 0) -> Tree:
    config = config or ForestConfig()
    if len(samples) == 0:
        raise InvalidInputError("cannot train a tree on an empty sample set")
    builder = _TreeBuilder(samples, config, np.random.default_rng(rng_seed))
    return Tree.from_nested(builder.build(), samples.codes.shape[1])


def closest_gt_index(windows: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per window, index of the highest-IoU box; center distance breaks ties
    and decides when every IoU is zero."""
    overlaps = iou_matrix(windows, gt)
    cdist = np.linalg.norm(centers(windows)[:, None, :] - centers(gt)[None, :, :], axis=2)
    best = overlaps.max(axis=1, keepdims=True)
    key = np.where(overlaps == best, cdist, np.inf)
    return np.argmin(key, axis=1)


def image_samples(image, class_name: str) -> SampleSet:
    gt = image.gt(class_name)
    target = gt[closest_gt_index(image.windows, gt)]
    return SampleSet(image.windows, image.codes, target - image.windows,
                     [image.id] * image.n_proposals)


def concat_samples(parts: Sequence[SampleSet]) -> SampleSet:
    return SampleSet(np.concatenate([p.windows for p in parts]),
                     np.concatenate([p.codes for p in parts]),
                     np.concatenate([p.displacements for p in parts]),
                     [i for p in parts for i in p.image_ids])


def _tree_job(args):
    parts, config, t, seed = args
    ss = np.random.SeedSequence([seed, t])
    rng = np.random.default_rng(ss)
    k = min(config.images_per_tree, len(parts))
    chosen = rng.choice(len(parts), size=k, replace=False)
    tree_seed = int(rng.integers(2**63))
    samples = concat_samples([parts[i] for i in chosen])
    return train_tree(samples, config, tree_seed), [parts[i].image_ids[0] for i in chosen]


class ForestModel:
    def __init__(self, trees, class_name: str, config: ForestConfig | None = None,
                 embedder: EmbedderModel | None = None, meta: dict | None = None,
                 start_window=None):
        if not trees:
            raise InvalidInputError("a forest needs at least one tree")
        self.trees = list(trees)
        self.class_name = class_name
        self.config = config or ForestConfig(n_trees=len(self.trees))
        self.embedder = embedder
        self.meta = dict(meta or {})
        self.start_window = None if start_window is None else np.asarray(start_window, float)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def nbits(self) -> int:
        return self.trees[0].nbits

    def query(self, window, code, stats: QueryStats | None = None) -> np.ndarray:
        """Displacements predicted by every tree, ``(J, 4)``."""
        if isinstance(code, AppearanceCode):
            code = code.packed
        code_int = int.from_bytes(np.asarray(code, np.uint8).tobytes(), "big")
        if isinstance(window, Window):
            window = window.astuple()
        else:
            window = tuple(float(v) for v in window)
        return np.stack([t.values[t.leaf_of(window, code_int, stats)] for t in self.trees])

    def context_windows(self, window, code, stats: QueryStats | None = None) -> np.ndarray:
        """Clamped displaced windows ``(J, 4)`` for one observation."""
        return apply_displacements(window, self.query(window, code, stats))

    def context_many(self, windows: np.ndarray, codes: np.ndarray) -> np.ndarray:
        """Clamped displaced windows ``(n, J, 4)`` for many observations at once."""
        windows = np.asarray(windows, dtype=np.float64).reshape(-1, 4)
        disp = np.stack([t.route_many(windows, codes) for t in self.trees], axis=1)
        return clamp_array(windows[:, None, :] + disp)

    def save(self, path) -> None:
        header = {
            "format_version": FORMAT_VERSION,
            "kind": "forest",
            "class_name": self.class_name,
            "n_trees": self.n_trees,
            "config": asdict(self.config),
            "embedder": None if self.embedder is None else self.embedder.to_dict(),
            "start_window": None if self.start_window is None else self.start_window.tolist(),
            "meta": self.meta,
        }
        arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
        for t, tree in enumerate(self.trees):
            for name, arr in tree.arrays().items():
                arrays[f"tree{t}/{name}"] = arr
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        # an npz archive written with fixed timestamps so equal models give equal bytes
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            for name, arr in arrays.items():
                info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
                info.compress_type = zipfile.ZIP_DEFLATED
                with zf.open(info, "w", force_zip64=True) as fh:
                    np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)

    @classmethod
    def load(cls, path) -> "ForestModel":
        try:
            data = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise ValidationError(f"not a model file: {exc}", where=str(path)) from None
        with data:
            if "header" not in data.files:
                raise ValidationError("model file has no header", where=str(path))
            header = json.loads(str(data["header"]))
            if header.get("kind") != "forest" or header.get("format_version") != FORMAT_VERSION:
                raise ValidationError(
                    f"unsupported model format {header.get('format_version')!r}",
                    where=str(path), field="format_version")
            trees = []
            for t in range(int(header["n_trees"])):
                a = {k: data[f"tree{t}/{k}"] for k in
                     ("kind", "threshold", "left", "right", "pivot_windows", "pivot_codes",
                      "values", "n_samples")}
                trees.append(Tree(a["kind"], a["threshold"], a["left"], a["right"],
                                  a["pivot_windows"], a["pivot_codes"], a["values"],
                                  a["n_samples"]))
        emb = header.get("embedder")
        return cls(trees, header["class_name"], ForestConfig(**header["config"]),
                   None if emb is None else EmbedderModel.from_dict(emb),
                   header.get("meta"), header.get("start_window"))


def extract_context(model: ForestModel, proposal) -> list[Window]:
    """J displaced windows (duplicates kept) for one proposal."""
    ctx = model.context_windows(proposal.window, proposal.code)
    return [Window.from_array(r) for r in ctx]


def train_forest(dataset, class_name: str, config: ForestConfig | None = None,
                 rng_seed: int = 0, jobs: int = 1) -> ForestModel:
    """Train one tree per independent random subset of the class's images.

    Tree ``t`` draws its image subset and split randomness from
    ``SeedSequence([rng_seed, t])``, so the result does not depend on ``jobs``.
    """
    config = config or ForestConfig()
    eligible = [im for im in dataset if len(im.gt(class_name))]
    if not eligible:
        raise NoTrainingDataError(f"no ground truth for class {class_name!r}")
    parts = [image_samples(im, class_name) for im in eligible]
    tasks = [(parts, config, t, rng_seed) for t in range(config.n_trees)]
    if jobs > 1 and config.n_trees > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_tree_job, tasks))
    else:
        results = [_tree_job(task) for task in tasks]
    meta = {"seed": rng_seed, "n_images": len(eligible),
            "tree_images": [ids for _, ids in results],
            "n_candidate_samples": int(sum(len(p) for p in parts))}
    return ForestModel([tree for tree, _ in results], class_name, config, meta=meta)
