"""Normalized windows, overlap, the IoU smoothing kernel and displacements.

Windows are ``(x, y, w, h)`` in fractions of the image size, with ``(x, y)``
the top-left corner.  Hot paths work on ``(n, 4)`` float arrays; the
:class:`Window` value type is the checked scalar form.

The scalar and the vectorized IoU evaluate the same expression in the same
order, so they agree bit for bit.  Tree routing relies on that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import InvalidInputError, InvalidParameterError

MIN_SIDE = 0.01


@dataclass(frozen=True)
class Window:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvalidInputError(f"window {name} must be finite, got {v}")
        if self.x < 0 or self.y < 0:
            raise InvalidInputError(f"window origin must be non-negative: {self}")
        if not (self.w > 0 and self.h > 0):
            raise InvalidInputError(f"window sides must be positive: {self}")

    @classmethod
    def from_array(cls, row) -> "Window":
        x, y, w, h = (float(v) for v in row)
        return cls(x, y, w, h)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def astuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    def inside_image(self, tol: float = 1e-9) -> bool:
        return self.x + self.w <= 1 + tol and self.y + self.h <= 1 + tol


@dataclass(frozen=True)
class Displacement:
    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self):
        for name in ("dx", "dy", "dw", "dh"):
            v = getattr(self, name)
            if not (-1.0 <= v <= 1.0):
                raise InvalidInputError(f"displacement {name} must lie in [-1, 1], got {v}")

    @classmethod
    def from_array(cls, row) -> "Displacement":
        dx, dy, dw, dh = (float(v) for v in row)
        return cls(dx, dy, dw, dh)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)

    def astuple(self) -> tuple[float, float, float, float]:
        return (self.dx, self.dy, self.dw, self.dh)


ZERO_DISPLACEMENT = Displacement(0.0, 0.0, 0.0, 0.0)


def _coords(win) -> tuple[float, float, float, float]:
    if isinstance(win, Window):
        return win.astuple()
    x, y, w, h = win
    return float(x), float(y), float(w), float(h)


def _extent(a0, alen, b0, blen):
    # overlap length of [a0, a0 + alen) and [b0, b0 + blen).  Written as
    # ``min(alen, blen, len_of_later_start - gap)`` rather than ``min(ends) -
    # max(starts)`` so that it is exactly symmetric, equals the side length for
    # identical intervals and never exceeds either side.
    d = b0 - a0
    return min(alen, blen, (blen if d <= 0.0 else alen) - abs(d))


def iou(a, b) -> float:
    """Intersection over union of two windows (``Window`` or 4-sequences)."""
    ax, ay, aw, ah = _coords(a)
    bx, by, bw, bh = _coords(b)
    ix = _extent(ax, aw, bx, bw)
    iy = _extent(ay, ah, by, bh)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def _extent_array(a0, alen, b0, blen):
    d = b0 - a0
    out = np.where(d <= 0.0, blen, alen) - np.abs(d)
    np.minimum(out, alen, out=out)
    np.minimum(out, blen, out=out)
    np.maximum(out, 0.0, out=out)
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(m, 4)`` and ``(n, 4)`` window arrays -> ``(m, n)``.

    Bit-identical to :func:`iou` applied to every pair.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = (a[:, k, None] for k in range(4))
    bx, by, bw, bh = (b[None, :, k] for k in range(4))
    inter = _extent_array(ax, aw, bx, bw)
    inter *= _extent_array(ay, ah, by, bh)
    return inter / (aw * ah + bw * bh - inter)


def iou_one_to_many(a, b: np.ndarray) -> np.ndarray:
    """IoU of one window against an ``(n, 4)`` array -> ``(n,)``."""
    return iou_matrix(np.asarray(_coords(a), dtype=np.float64), b)[0]


def _check_sigma(sigma: float) -> None:
    if not (sigma > 0) or not math.isfinite(sigma):
        raise InvalidParameterError(f"kernel bandwidth must be positive, got {sigma}")


def kernel_from_iou(overlap, sigma: float):
    """exp(-(1 - IoU)^2 / (2 sigma^2)), scalar or elementwise on arrays."""
    _check_sigma(sigma)
    d = 1.0 - np.asarray(overlap, dtype=np.float64)
    out = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return float(out) if out.ndim == 0 else out


def kernel(a, b, sigma: float) -> float:
    """Smoothing kernel between two windows, in (0, 1]."""
    _check_sigma(sigma)
    d = 1.0 - iou(a, b)
    return math.exp(-(d * d) / (2.0 * sigma * sigma))


def clamp_array(boxes: np.ndarray, min_side: float = MIN_SIDE) -> np.ndarray:
    """Clamp ``(..., 4)`` windows into the unit image (sides first, then origin)."""
    boxes = np.array(boxes, dtype=np.float64, copy=True)
    wh = np.clip(boxes[..., 2:], min_side, 1.0)
    boxes[..., 2:] = wh
    boxes[..., :2] = np.clip(boxes[..., :2], 0.0, 1.0 - wh)
    return boxes


def clamp(win, min_side: float = MIN_SIDE) -> Window:
    x, y, w, h = _coords(win)
    w = min(max(w, min_side), 1.0)
    h = min(max(h, min_side), 1.0)
    x = min(max(x, 0.0), 1.0 - w)
    y = min(max(y, 0.0), 1.0 - h)
    return Window(x, y, w, h)


def displacement_between(src, dst) -> Displacement:
    sx, sy, sw, sh = _coords(src)
    tx, ty, tw, th = _coords(dst)
    return Displacement(tx - sx, ty - sy, tw - sw, th - sh)


def displacements_between(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Row-wise ``dst - src`` for ``(n, 4)`` arrays."""
    return np.asarray(dst, dtype=np.float64) - np.asarray(src, dtype=np.float64)


def apply_displacement(win, d) -> Window:
    """Shift a window by a displacement and clamp the result into the image."""
    x, y, w, h = _coords(win)
    if isinstance(d, Displacement):
        dx, dy, dw, dh = d.astuple()
    else:
        dx, dy, dw, dh = (float(v) for v in d)
    return clamp((x + dx, y + dy, w + dw, h + dh))


def apply_displacements(win, ds: np.ndarray) -> np.ndarray:
    """Apply ``(k, 4)`` displacements to one window; returns clamped ``(k, 4)``."""
    base = np.asarray(_coords(win), dtype=np.float64)
    return clamp_array(base[None, :] + np.asarray(ds, dtype=np.float64).reshape(-1, 4))


def centers(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return boxes[:, :2] + 0.5 * boxes[:, 2:]


def as_window_array(windows: Iterable) -> np.ndarray:
    rows = [_coords(w) for w in windows]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def iou_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two ``(n, 4)`` arrays (same expression as :func:`iou`)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = a.T
    bx, by, bw, bh = b.T
    inter = _extent_array(ax, aw, bx, bw) * _extent_array(ay, ah, by, bh)
    return inter / (aw * ah + bw * bh - inter)


class WindowSet:
    """Fixed ``(n, 4)`` windows with cached coordinate and area arrays.

    :meth:`iou_with` is bit-identical to :func:`iou_matrix`; the cached
    columns also feed the compiled search kernels.
    """

    def __init__(self, windows: np.ndarray):
        self.windows = np.ascontiguousarray(windows, dtype=np.float64).reshape(-1, 4)
        x, y, w, h = self.windows.T
        self.x, self.y = x.copy(), y.copy()
        self.w, self.h = w.copy(), h.copy()
        self.area = w * h

    def __len__(self):
        return len(self.windows)

    def iou_with(self, boxes: np.ndarray) -> np.ndarray:
        """IoU of each row of ``boxes`` against every window -> ``(k, n)``."""
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        bx, by, bw, bh = (b[:, k, None] for k in range(4))
        inter = _extent_array(bx, bw, self.x, self.w)
        inter *= _extent_array(by, bh, self.y, self.h)
        union = bw * bh + self.area
        union -= inter
        inter /= union
        return inter

    def kernel_with(self, boxes: np.ndarray, sigma: float) -> np.ndarray:
        """``kernel_from_iou(self.iou_with(boxes), sigma)`` computed in place."""
        _check_sigma(sigma)
        d = self.iou_with(boxes)
        np.subtract(1.0, d, out=d)
        d *= d
        np.negative(d, out=d)
        d /= 2.0 * sigma * sigma
        np.exp(d, out=d)
        return d
