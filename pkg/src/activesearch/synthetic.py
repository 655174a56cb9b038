"""Synthetic scenes in which window appearance predicts where the object is.

Each scene is a stack of horizontal background bands (sky, building, road,
ground from top to bottom).  Objects stand on the road band, and directly
above every object, at a fixed vertical offset, sits a small patch with its
own distinctive appearance ("band A").  Proposals are a shuffled mix of
jittered object boxes, jittered band-A patches and random background boxes.

A proposal's appearance code is the signature code of the region it covers
(object, band A, or the band holding its center) with bits flipped
independently at ``noise_rate``.  Signatures are fixed per generator seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .dataio import Dataset, ImageRecord
from .errors import ValidationError
from .geometry import clamp_array, iou_matrix

CONFIG_VERSION = 1
BAND_NAMES = ("sky", "building", "road", "ground")


@dataclass
class SyntheticConfig:
    n_train: int = 100
    n_test: int = 200
    proposals_per_image: int = 500
    n_bits: int = 512
    noise_rate: float = 0.1
    n_region_types: int = 4
    min_objects: int = 1
    max_objects: int = 2
    object_size: tuple = (0.08, 0.16)
    anchor_offset: float = 0.25
    anchor_proposals: int = 12
    object_proposals: int = 4
    jitter: float = 0.08
    class_name: str = "car"
    width: int = 640
    height: int = 480
    seed: int = 0

    def __post_init__(self):
        self.object_size = tuple(float(v) for v in self.object_size)
        self.validate()

    def validate(self) -> None:
        def bad(name, msg):
            raise ValidationError(msg, where="synthetic config", field=name)

        if self.n_train < 1:
            bad("n_train", "must be >= 1")
        if self.n_test < 0:
            bad("n_test", "must be >= 0")
        if self.proposals_per_image < 10:
            bad("proposals_per_image", "must be >= 10")
        if self.n_bits < 8 or self.n_bits % 8:
            bad("n_bits", "must be a positive multiple of 8")
        if not (0.0 <= self.noise_rate < 0.5):
            bad("noise_rate", "must lie in [0, 0.5)")
        if not (1 <= self.n_region_types <= len(BAND_NAMES)):
            bad("n_region_types", f"must lie in 1..{len(BAND_NAMES)}")
        if not (1 <= self.min_objects <= self.max_objects):
            bad("max_objects", "need 1 <= min_objects <= max_objects")
        lo, hi = self.object_size
        if not (0.0 < lo <= hi <= 0.3):
            bad("object_size", "need 0 < low <= high <= 0.3")
        if not (0.0 < self.anchor_offset <= 0.4):
            bad("anchor_offset", "must lie in (0, 0.4]")
        if self.anchor_proposals < 0 or self.object_proposals < 1:
            bad("object_proposals", "need object_proposals >= 1 and anchor_proposals >= 0")
        per_obj = self.anchor_proposals + self.object_proposals
        if per_obj * self.max_objects > self.proposals_per_image:
            bad("proposals_per_image", "too small for the requested object/anchor proposals")
        if not (0.0 <= self.jitter <= 0.5):
            bad("jitter", "must lie in [0, 0.5]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_size"] = list(self.object_size)
        return {"schema_version": CONFIG_VERSION, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        if not isinstance(d, dict):
            raise ValidationError("config must be a JSON object", where="synthetic config")
        d = dict(d)
        version = d.pop("schema_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValidationError(f"unsupported schema_version {version!r}",
                                  where="synthetic config", field="schema_version")
        known = {f.name: f for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ValidationError("unknown field", where="synthetic config", field=key)
        kwargs = {}
        for key, value in d.items():
            default = known[key].default
            try:
                if isinstance(default, bool) or isinstance(default, str):
                    kwargs[key] = type(default)(value)
                elif isinstance(default, int):
                    if isinstance(value, bool) or int(value) != value:
                        raise TypeError
                    kwargs[key] = int(value)
                elif isinstance(default, float):
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = tuple(float(v) for v in value)
            except (TypeError, ValueError):
                raise ValidationError(f"bad value {value!r}", where="synthetic config",
                                      field=key) from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "SyntheticConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"does not parse: {exc}", where=str(path)) from None
        return cls.from_dict(raw)


def signatures(config: SyntheticConfig) -> dict:
    """Signature codes per region type (packed bits), fixed by the seed."""
    rng = np.random.default_rng([config.seed, 0x5167])
    names = ["object", "anchor", *BAND_NAMES[:config.n_region_types]]
    nbytes = config.n_bits // 8
    return {n: rng.integers(0, 256, size=nbytes, dtype=np.uint8) for n in names}


def _jitter(rng, boxes: np.ndarray, count: int, scale: float) -> np.ndarray:
    if count == 0 or len(boxes) == 0:
        return np.zeros((0, 4))
    base = np.repeat(boxes, count, axis=0)
    eps = rng.normal(0.0, scale, size=base.shape)
    out = base.copy()
    out[:, 0] += eps[:, 0] * base[:, 2]
    out[:, 1] += eps[:, 1] * base[:, 3]
    out[:, 2] *= np.exp(eps[:, 2])
    out[:, 3] *= np.exp(eps[:, 3])
    return clamp_array(out)


def _place_objects(rng, cfg: SyntheticConfig, road_top: float, road_bottom: float):
    lo, hi = cfg.object_size
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects, anchors = [], []
    for _ in range(200):
        if len(objects) == n:
            break
        w = rng.uniform(lo, hi)
        h = rng.uniform(lo, hi)
        x = rng.uniform(0.0, 1.0 - w)
        y_lo = max(road_top, cfg.anchor_offset)
        y_hi = road_bottom - h
        if y_hi <= y_lo:
            continue
        y = rng.uniform(y_lo, y_hi)
        obj = np.array([x, y, w, h])
        anc = np.array([x, y - cfg.anchor_offset, w, h])
        if objects:
            taken = np.array(objects + anchors)
            # keep objects and their anchors apart from everything placed so far
            if iou_matrix(np.stack([obj, anc]), taken).max() > 0.0:
                continue
        objects.append(obj)
        anchors.append(anc)
    return np.array(objects), np.array(anchors)


def generate_scene(cfg: SyntheticConfig, index: int, sigs: dict) -> ImageRecord:
    rng = np.random.default_rng([cfg.seed, index])
    k = cfg.n_region_types
    # band boundaries, top to bottom
    cuts = np.sort(np.concatenate([[0.0], [rng.uniform(0.1, 0.25), rng.uniform(0.4, 0.5),
                                           rng.uniform(0.8, 0.9)][:k - 1], [1.0]]))
    road = min(2, k - 1)
    road_top, road_bottom = cuts[road], cuts[road + 1]
    if road_bottom - road_top < cfg.object_size[1] + 0.01:
        road_top, road_bottom = cfg.anchor_offset, 1.0
    objects, anchors = _place_objects(rng, cfg, road_top, road_bottom)

    obj_props = _jitter(rng, objects, cfg.object_proposals, cfg.jitter)
    anc_props = _jitter(rng, anchors, cfg.anchor_proposals, cfg.jitter)
    n_bg = cfg.proposals_per_image - len(obj_props) - len(anc_props)
    w = np.exp(rng.uniform(np.log(0.03), np.log(0.5), size=n_bg))
    h = np.exp(rng.uniform(np.log(0.03), np.log(0.5), size=n_bg))
    x = rng.uniform(0.0, 1.0, size=n_bg) * (1.0 - w)
    y = rng.uniform(0.0, 1.0, size=n_bg) * (1.0 - h)
    bg = np.stack([x, y, w, h], axis=1)
    windows = np.concatenate([obj_props, anc_props, bg])
    windows = windows[rng.permutation(len(windows))]

    # region type per proposal: object > anchor patch > band of the center
    obj_ov = iou_matrix(windows, objects).max(axis=1)
    anc_ov = iou_matrix(windows, anchors).max(axis=1)
    cy = windows[:, 1] + 0.5 * windows[:, 3]
    band = np.clip(np.searchsorted(cuts, cy, side="right") - 1, 0, k - 1)
    base = np.stack([sigs[BAND_NAMES[b]] for b in band])
    base[anc_ov >= 0.5] = sigs["anchor"]
    base[obj_ov >= 0.5] = sigs["object"]
    bits = np.unpackbits(base, axis=1)
    flips = rng.random(bits.shape) < cfg.noise_rate
    codes = np.packbits(bits ^ flips.astype(np.uint8), axis=1)

    return ImageRecord(f"s{index:05d}", windows, codes, {cfg.class_name: objects},
                       cfg.width, cfg.height)


def generate_synthetic(config: SyntheticConfig | None = None) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) datasets; scene ``i`` depends only on (seed, i)."""
    cfg = config or SyntheticConfig()
    sigs = signatures(cfg)
    n = cfg.n_train + cfg.n_test
    scenes = [generate_scene(cfg, i, sigs) for i in range(n)]
    meta = {"generator": cfg.to_dict()}
    train = Dataset(scenes[:cfg.n_train], split="train", meta=meta)
    test = Dataset(scenes[cfg.n_train:], split="test", meta=meta)
    return train, test


def anchor_mask(image: ImageRecord, cfg: SyntheticConfig, threshold: float = 0.5) -> np.ndarray:
    """Proposals lying on a band-A patch (IoU >= threshold with one)."""
    gt = image.gt(cfg.class_name)
    anchors = gt.copy()
    anchors[:, 1] -= cfg.anchor_offset
    return iou_matrix(image.windows, anchors).max(axis=1) >= threshold
