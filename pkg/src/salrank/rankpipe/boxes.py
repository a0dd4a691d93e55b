"""Box conversions, clipping and generalised IoU (boxes are normalised to the unit square)."""
from __future__ import annotations

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor

MIN_SIZE = 1e-3


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(b, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x0, y0, x1, y1 = np.moveaxis(b, -1, 0)
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def _cols(t: Tensor) -> list[Tensor]:
    return [t[..., i:i + 1] for i in range(t.shape[-1])]


def tensor_cxcywh_to_xyxy(t: Tensor) -> Tensor:
    cx, cy, w, h = _cols(t)
    hw, hh = w * 0.5, h * 0.5
    return ag.concat_lastdim([cx - hw, cy - hh, cx + hw, cy + hh])


def tensor_xyxy_to_cxcywh(t: Tensor) -> Tensor:
    x0, y0, x1, y1 = _cols(t)
    return ag.concat_lastdim([(x0 + x1) * 0.5, (y0 + y1) * 0.5, x1 - x0, y1 - y0])


def _clamp(t: Tensor, lo, hi) -> Tensor:
    lo = lo if isinstance(lo, Tensor) else ag.constant_like(t, lo)
    hi = hi if isinstance(hi, Tensor) else ag.constant_like(t, hi)
    return ag.min_elementwise_pair(ag.max_elementwise_pair(t, lo), hi)


def clip_boxes(t: Tensor, min_size: float = MIN_SIZE) -> Tensor:
    """Clip (..., 4) cxcywh boxes into the unit square with sides of at least ``min_size``."""
    x0, y0, x1, y1 = _cols(tensor_cxcywh_to_xyxy(t))
    x0 = _clamp(x0, 0.0, 1.0 - min_size)
    y0 = _clamp(y0, 0.0, 1.0 - min_size)
    x1 = _clamp(x1, x0 + min_size, 1.0)
    y1 = _clamp(y1, y0 + min_size, 1.0)
    return tensor_xyxy_to_cxcywh(ag.concat_lastdim([x0, y0, x1, y1]))


def giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise-aligned generalised IoU of (..., 4) xyxy arrays."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose


def tensor_giou(a: Tensor, b) -> Tensor:
    """Differentiable GIoU of (..., 4) xyxy tensors, result shaped (..., 1)."""
    b = ag.as_tensor(b)
    ax0, ay0, ax1, ay1 = _cols(a)
    bx0, by0, bx1, by1 = _cols(b)
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    zero = ag.constant_like(area_a, 0.0)
    iw = ag.max_elementwise_pair(ag.min_elementwise_pair(ax1, bx1) - ag.max_elementwise_pair(ax0, bx0), zero)
    ih = ag.max_elementwise_pair(ag.min_elementwise_pair(ay1, by1) - ag.max_elementwise_pair(ay0, by0), zero)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = ag.max_elementwise_pair(ax1, bx1) - ag.min_elementwise_pair(ax0, bx0)
    eh = ag.max_elementwise_pair(ay1, by1) - ag.min_elementwise_pair(ay0, by0)
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose
