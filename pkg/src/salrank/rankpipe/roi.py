"""Bilinear ROI sampling expressed as a constant resampling matrix times the feature map."""
from __future__ import annotations

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor

DEGENERATE = 1e-6


def _axis_weights(start: np.ndarray, length: np.ndarray, n_in: int, n_out: int) -> np.ndarray:
    """(..., n_out, n_in) linear interpolation weights along one axis.

    ``start``/``length`` are in pixel units; output cell c samples the continuous
    coordinate start + (c + 0.5) * length / n_out, i.e. pixel-centre index minus 0.5.
    """
    c = np.arange(n_out) + 0.5
    pos = start[..., None] + c * (length[..., None] / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    w = np.zeros(pos.shape + (n_in,))
    np.put_along_axis(w, lo[..., None], (1.0 - frac)[..., None], axis=-1)
    # add rather than assign: lo == hi at the clamped border
    hi_w = np.take_along_axis(w, hi[..., None], axis=-1) + frac[..., None]
    np.put_along_axis(w, hi[..., None], hi_w, axis=-1)
    return w


def roi_matrix(boxes: np.ndarray, in_hw: tuple[int, int], out_hw: tuple[int, int]) -> np.ndarray:
    """Resampling matrices of shape (..., Hr*Wr, H*W) for (..., 4) normalised cxcywh boxes."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if not np.isfinite(boxes).all():
        raise FloatingPointError("roi_extract: non-finite box coordinates")
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    if np.any(w < DEGENERATE) or np.any(h < DEGENERATE):
        raise ValueError("roi_extract: degenerate box (width or height below 1e-6)")
    H, W = in_hw
    Hr, Wr = out_hw
    wy = _axis_weights((cy - h / 2) * H, h * H, H, Hr)  # (..., Hr, H)
    wx = _axis_weights((cx - w / 2) * W, w * W, W, Wr)  # (..., Wr, W)
    full = wy[..., :, None, :, None] * wx[..., None, :, None, :]
    return full.reshape(*boxes.shape[:-1], Hr * Wr, H * W)


def roi_extract(context: Tensor, boxes, out_size: tuple[int, int] = (7, 7)) -> Tensor:
    """Sample ``out_size`` grids from an (H, W, C) or (B, H, W, C) context.

    ``boxes`` is (4,) for one box, (N, 4) against an unbatched context, or
    (B, N, 4) against a batched one. Gradients reach the context only.
    """
    boxes = np.asarray(boxes.data if isinstance(boxes, Tensor) else boxes, dtype=np.float64)
    *lead, H, W, C = context.shape
    mats = roi_matrix(boxes, (H, W), out_size)
    Hr, Wr = out_size
    if boxes.ndim == 1:
        if lead:
            raise ag.ShapeError("roi_extract: single box needs an unbatched context")
        flat = ag.reshape(context, (H * W, C))
        return ag.reshape(ag.matmul(mats, flat), (Hr, Wr, C))
    n = boxes.shape[-2]
    if tuple(lead) != boxes.shape[:-2]:
        raise ag.ShapeError(f"roi_extract: boxes {boxes.shape} do not match context {context.shape}")
    if not lead:
        flat = ag.reshape(context, (H * W, C))
        return ag.reshape(ag.matmul(mats, flat), (n, Hr, Wr, C))
    flat = ag.reshape(context, (*lead, 1, H * W, C))
    flat = ag.broadcast_to(flat, (*lead, n, H * W, C))
    return ag.reshape(ag.matmul(mats, flat), (*lead, n, Hr, Wr, C))
