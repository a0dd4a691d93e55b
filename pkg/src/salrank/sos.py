"""Selective object saliency: covariance-pooled channel statistics reweight object features.

All functions accept arbitrary leading batch axes, so a stack of N object
maps of shape (N, H, W, C) is processed in one pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

NS_ITERS = 7
TRACE_FLOOR = 1e-12
REG_SCALE = 1e-5
SYMMETRY_TOL = 1e-6


def _eye_like(m: Tensor) -> np.ndarray:
    c = m.shape[-1]
    return np.broadcast_to(np.eye(c), m.shape).copy()


def build_covariance(feature_map: Tensor) -> Tensor:
    """Channel covariance (1/K) sum_k (f_k - mu)(f_k - mu)^T of an (..., H, W, C) map."""
    *lead, h, w, c = feature_map.shape
    k = h * w
    if k < 1:
        raise ag.ShapeError("build_covariance: empty spatial grid")
    x = ag.reshape(feature_map, (*lead, k, c))
    mu = ag.mean_axis(x, -2, keepdims=True)
    xc = x - ag.broadcast_to(mu, x.shape)
    return ag.matmul(ag.transpose(xc), xc) * (1.0 / k)


def trace(m: Tensor) -> Tensor:
    """Batched trace, returned with shape (..., 1, 1)."""
    diag = ag.sum_axis(m * _eye_like(m), -1, keepdims=True)
    return ag.sum_axis(diag, -2, keepdims=True)


def matrix_power_half(m: Tensor, iters: int = NS_ITERS) -> Tensor:
    """Square root of a PSD matrix by trace-normalised coupled Newton-Schulz.

    The input is regularised with ``1e-5 * trace / C`` on the diagonal first.
    Matrices whose trace is below 1e-12 map to zero.
    """
    if m.shape[-1] != m.shape[-2]:
        raise ag.ShapeError(f"matrix_power_half: non-square shape {m.shape}")
    asym = np.abs(m.data - np.swapaxes(m.data, -1, -2)).max(initial=0.0)
    if asym > SYMMETRY_TOL:
        raise ValueError(f"matrix_power_half: input not symmetric (max asymmetry {asym:.3g})")
    c = m.shape[-1]
    eye = _eye_like(m)

    tr = trace(m)
    alive = (tr.data >= TRACE_FLOOR).astype(np.float64)
    # dead entries get trace 1 so the iteration stays finite; they are zeroed at the end
    tr_safe = tr + (1.0 - alive)
    reg = ag.broadcast_to(tr_safe * (REG_SCALE / c), m.shape) * eye
    m_reg = m + reg
    tr_reg = ag.broadcast_to(trace(m_reg), m.shape)

    y = m_reg / tr_reg
    z = Tensor(eye)
    three = Tensor(3.0 * eye)
    for _ in range(iters):
        t = (three - ag.matmul(z, y)) * 0.5
        y, z = ag.matmul(y, t), ag.matmul(t, z)
    root = y * ag.sqrt(tr_reg)
    if alive.all():
        return root
    return root * np.broadcast_to(alive, m.shape)


def gcp(m: Tensor) -> Tensor:
    """Row means of the (powered) covariance: s_c = mean_c' M[c, c']."""
    return ag.mean_axis(m, -1)


@dataclass(frozen=True)
class RectifyParams:
    fc1_w: Tensor  # (C, B)
    fc1_b: Tensor  # (B,)
    fc2_w: Tensor  # (B, 4C)
    fc2_b: Tensor  # (4C,)
    lambda_a: float = 1.0
    lambda_b: float = 0.5
    reduction: int = 4

    @property
    def channels(self) -> int:
        return self.fc1_w.shape[0]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, reduction: int = 4,
             lambda_a: float = 1.0, lambda_b: float = 0.5) -> "RectifyParams":
        hidden = max(1, channels // reduction)
        b1 = 1.0 / np.sqrt(channels)
        b2 = 1.0 / np.sqrt(hidden)
        return cls(
            fc1_w=Tensor(rng.uniform(-b1, b1, (channels, hidden)), requires_grad=True),
            fc1_b=Tensor(np.zeros(hidden), requires_grad=True),
            fc2_w=Tensor(rng.uniform(-b2, b2, (hidden, 4 * channels)), requires_grad=True),
            fc2_b=Tensor(np.zeros(4 * channels), requires_grad=True),
            lambda_a=lambda_a,
            lambda_b=lambda_b,
            reduction=reduction,
        )


@dataclass(frozen=True)
class RectifyCoefficients:
    a1: Tensor
    a2: Tensor
    b1: Tensor
    b2: Tensor


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = ag.matmul(ag.reshape(x, (-1, x.shape[-1])), w)
    y = y + ag.broadcast_to(b, y.shape)
    return ag.reshape(y, (*x.shape[:-1], w.shape[-1]))


def dynamic_coefficients(stats: Tensor, params: RectifyParams) -> RectifyCoefficients:
    c = params.channels
    if stats.shape[-1] != c:
        raise ag.ShapeError(f"dynamic_coefficients: stats width {stats.shape[-1]} != C={c}")
    hidden = ag.relu(_linear(stats, params.fc1_w, params.fc1_b))
    delta = ag.sigmoid(_linear(hidden, params.fc2_w, params.fc2_b)) * 2.0 - 1.0
    da1, da2, db1, db2 = (delta[..., i * c:(i + 1) * c] for i in range(4))
    return RectifyCoefficients(
        a1=da1 * params.lambda_a + 1.0,
        a2=da2 * params.lambda_a,
        b1=db1 * params.lambda_b,
        b2=db2 * params.lambda_b,
    )


def rectify(stats: Tensor, coeffs: RectifyCoefficients) -> Tensor:
    """Per-channel max of two affine pieces."""
    first = coeffs.a1 * stats + coeffs.b1
    second = coeffs.a2 * stats + coeffs.b2
    return ag.max_elementwise_pair(first, second)


def channel_reweight(feature_map: Tensor, scale: Tensor) -> Tensor:
    """Multiply every spatial position of (..., H, W, C) by the (..., C) scale."""
    *lead, h, w, c = feature_map.shape
    s = ag.reshape(scale, (*lead, 1, 1, c))
    return feature_map * ag.broadcast_to(s, feature_map.shape)


def channel_saliency(feature_map: Tensor, params: RectifyParams, iters: int = NS_ITERS) -> Tensor:
    """The rectified statistics vector for each map in the batch."""
    cov = matrix_power_half(build_covariance(feature_map), iters)
    stats = gcp(cov)
    return rectify(stats, dynamic_coefficients(stats, params))


def sos_forward(feature_map: Tensor, params: RectifyParams, iters: int = NS_ITERS) -> Tensor:
    return channel_reweight(feature_map, channel_saliency(feature_map, params, iters))
