"""Dataset records, the JSON-lines dataset format and score-table files.

A dataset file is one JSON object per line.  The first line is a header::

    {"schema_version": 1, "kind": "dataset", "split": "train", "n_bits": 512}

and each following line is one image::

    {"id": "s0001", "width": 640, "height": 480,
     "proposals": [[x, y, w, h, "hexcode"], ...],
     "ground_truth": {"car": [[x, y, w, h], ...]}}
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ValidationError
from .features import AppearanceCode
from .geometry import Window
from .tabular import SCHEMA_VERSION, read_table, write_table

_EPS = 1e-9


@dataclass(frozen=True)
class Proposal:
    window: Window
    code: AppearanceCode
    index: int


@dataclass(eq=False)
class ImageRecord:
    id: str
    windows: np.ndarray  # (n, 4) float64
    codes: np.ndarray  # (n, nbytes) uint8, packed bits
    ground_truth: dict = field(default_factory=dict)  # class -> (g, 4) float64
    width: int = 0
    height: int = 0

    def __post_init__(self):
        self.windows = np.ascontiguousarray(self.windows, dtype=np.float64).reshape(-1, 4)
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        if self.codes.ndim == 1:
            self.codes = self.codes.reshape(len(self.windows), -1)
        self.ground_truth = {
            str(k): np.ascontiguousarray(v, dtype=np.float64).reshape(-1, 4)
            for k, v in self.ground_truth.items()
        }

    @property
    def n_proposals(self) -> int:
        return len(self.windows)

    @property
    def n_bits(self) -> int:
        return 8 * self.codes.shape[1]

    def proposal(self, index: int) -> Proposal:
        return Proposal(Window.from_array(self.windows[index]),
                        AppearanceCode(self.codes[index]), int(index))

    def gt(self, class_name: str) -> np.ndarray:
        return self.ground_truth.get(class_name, np.zeros((0, 4)))

    def validate(self) -> None:
        where = f"image {self.id!r}"
        n = len(self.windows)
        if n < 1:
            raise ValidationError("image has no proposals", where=where, field="proposals")
        if self.codes.shape[0] != n:
            raise ValidationError("one appearance code per proposal required",
                                  where=where, field="proposals")
        _check_boxes(self.windows, where, "proposals")
        for cls, boxes in self.ground_truth.items():
            _check_boxes(boxes, where, f"ground_truth.{cls}")

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (self.id == other.id and self.width == other.width
                and self.height == other.height
                and np.array_equal(self.windows, other.windows)
                and np.array_equal(self.codes, other.codes)
                and self.ground_truth.keys() == other.ground_truth.keys()
                and all(np.array_equal(v, other.ground_truth[k])
                        for k, v in self.ground_truth.items()))


def _check_boxes(boxes: np.ndarray, where: str, fld: str) -> None:
    if boxes.size == 0:
        return
    if not np.all(np.isfinite(boxes)):
        raise ValidationError("non-finite coordinate", where=where, field=fld)
    x, y, w, h = boxes.T
    bad = (w <= 0) | (h <= 0)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"row {i} has non-positive size", where=where, field=fld)
    bad = (x < -_EPS) | (y < -_EPS) | (x + w > 1 + _EPS) | (y + h > 1 + _EPS)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"row {i} lies outside the unit image", where=where, field=fld)


@dataclass(eq=False)
class Dataset:
    images: list
    split: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {}
        for i, im in enumerate(self.images):
            if im.id in self._index:
                raise ValidationError("duplicate image id", where=f"image {im.id!r}", field="id")
            self._index[im.id] = i

    def __len__(self):
        return len(self.images)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.images)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.images[self._index[key]]
        return self.images[key]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.split == other.split and self.images == other.images

    @property
    def n_bits(self) -> int:
        return self.images[0].n_bits if self.images else 0

    def classes(self) -> list[str]:
        names = set()
        for im in self.images:
            names.update(k for k, v in im.ground_truth.items() if len(v))
        return sorted(names)

    def subset(self, ids) -> "Dataset":
        return Dataset([self[i] for i in ids], split=self.split, meta=dict(self.meta))

    def validate(self) -> None:
        nbytes = None
        for im in self.images:
            im.validate()
            if nbytes is None:
                nbytes = im.codes.shape[1]
            elif im.codes.shape[1] != nbytes:
                raise ValidationError("appearance code length differs from the rest of the dataset",
                                      where=f"image {im.id!r}", field="proposals")


def _image_to_json(im: ImageRecord) -> str:
    props = [[*map(float, w), bytes(c).hex()] for w, c in zip(im.windows, im.codes)]
    gt = {k: [list(map(float, b)) for b in v] for k, v in im.ground_truth.items()}
    return json.dumps({"id": im.id, "width": im.width, "height": im.height,
                       "proposals": props, "ground_truth": gt}, separators=(",", ":"))


def save_dataset(dataset: Dataset, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    header = {"schema_version": SCHEMA_VERSION, "kind": "dataset", "split": dataset.split,
              "n_bits": dataset.n_bits, "meta": dataset.meta}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for im in dataset.images:
            fh.write(_image_to_json(im) + "\n")


def _image_from_json(obj, where: str) -> ImageRecord:
    if not isinstance(obj, dict):
        raise ValidationError("record is not an object", where=where)
    for key in ("id", "proposals"):
        if key not in obj:
            raise ValidationError("missing field", where=where, field=key)
    where = f"image {obj['id']!r}"
    props = obj["proposals"]
    if not isinstance(props, list) or not props:
        raise ValidationError("image has no proposals", where=where, field="proposals")
    windows = np.empty((len(props), 4))
    codes = []
    for i, p in enumerate(props):
        if not (isinstance(p, list) and len(p) == 5 and isinstance(p[4], str)):
            raise ValidationError(f"proposal {i} must be [x, y, w, h, hex]",
                                  where=where, field="proposals")
        try:
            windows[i] = [float(v) for v in p[:4]]
            codes.append(bytes.fromhex(p[4]))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"proposal {i}: {exc}", where=where, field="proposals") from None
    if len({len(c) for c in codes}) != 1:
        raise ValidationError("appearance codes differ in length", where=where, field="proposals")
    code_arr = np.frombuffer(b"".join(codes), dtype=np.uint8).reshape(len(codes), -1)
    gt_raw = obj.get("ground_truth", {})
    if not isinstance(gt_raw, dict):
        raise ValidationError("must map class -> boxes", where=where, field="ground_truth")
    gt = {}
    for cls, boxes in gt_raw.items():
        try:
            arr = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        except (TypeError, ValueError):
            raise ValidationError("boxes must be [x, y, w, h] rows",
                                  where=where, field=f"ground_truth.{cls}") from None
        gt[cls] = arr
    im = ImageRecord(str(obj["id"]), windows, code_arr, gt,
                     int(obj.get("width", 0)), int(obj.get("height", 0)))
    im.validate()
    return im


def load_dataset(path) -> Dataset:
    """Parse and validate a dataset file; errors name the image and field."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValidationError("empty dataset file", where=path)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValidationError(f"header does not parse: {exc}", where=path) from None
    if not isinstance(header, dict) or header.get("kind") != "dataset":
        raise ValidationError("first line must be the dataset header", where=path)
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {header.get('schema_version')!r}",
                              where=path, field="schema_version")
    images = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno} does not parse: {exc}", where=path) from None
        images.append(_image_from_json(obj, f"{path}:{lineno}"))
    ds = Dataset(images, split=str(header.get("split", "")), meta=header.get("meta", {}) or {})
    ds.validate()
    return ds


SCORE_COLUMNS = ("proposal_index", "score")


def save_score_table(scores, path) -> None:
    write_table(path, SCORE_COLUMNS, ((i, float(s)) for i, s in enumerate(scores)))


def load_score_table(path, n_proposals: int | None = None) -> np.ndarray:
    """Read one image's ``(proposal_index, score)`` table into a dense array.

    Indices must cover ``0..n-1`` exactly once and scores must lie in [0, 1].
    """
    rows = read_table(path, SCORE_COLUMNS)
    n = len(rows) if n_proposals is None else n_proposals
    scores = np.full(n, np.nan)
    for lineno, row in enumerate(rows, start=3):
        where = f"{path}:{lineno}"
        if len(row) != 2:
            raise ValidationError("expected 2 columns", where=where)
        try:
            idx, s = int(row[0]), float(row[1])
        except ValueError:
            raise ValidationError("unparseable row", where=where) from None
        if not (0 <= idx < n):
            raise ValidationError(f"proposal_index {idx} out of range 0..{n - 1}",
                                  where=where, field="proposal_index")
        if not (math.isfinite(s) and 0.0 <= s <= 1.0):
            raise ValidationError(f"score {s} outside [0, 1]", where=where, field="score")
        if not math.isnan(scores[idx]):
            raise ValidationError(f"proposal_index {idx} repeated", where=where,
                                  field="proposal_index")
        scores[idx] = s
    if np.isnan(scores).any():
        missing = int(np.flatnonzero(np.isnan(scores))[0])
        raise ValidationError(f"no score for proposal_index {missing}", where=path,
                              field="proposal_index")
    return scores
