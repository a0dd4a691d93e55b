"""Object-context-object relation: grouped-projection interaction between object-context features.

Object-context features are stacked as (..., N, Ho, Wo, 2C). For object i at
cell x, against object j != i at cell y and head p::

    A = phi_k^p(F_i(x)) . phi_q^p(F_j(y))
    rho = softmax of A over the P heads          (softmax_axis="heads")
    raw(i, x) = sum_{j != i} sum_y sum_p W_o^p(rho * phi_v^p(F_i(x)))
    out(i, x) = layer_norm(F_i(x) + raw(i, x)) * gamma + beta
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autograd as ag
from .autograd import Tensor

SoftmaxAxis = Literal["heads", "locations"]
ValueSource = Literal["self", "other"]
AggregateScale = Literal["none", "mean"]

_MASKED_LOGIT = -1e30


@dataclass(frozen=True)
class OcorConfig:
    softmax_axis: SoftmaxAxis = "heads"
    value_source: ValueSource = "self"
    aggregate_scale: AggregateScale = "none"

    def __post_init__(self):
        if self.softmax_axis not in ("heads", "locations"):
            raise ValueError(f"softmax_axis must be 'heads' or 'locations', got {self.softmax_axis!r}")
        if self.value_source not in ("self", "other"):
            raise ValueError(f"value_source must be 'self' or 'other', got {self.value_source!r}")
        if self.aggregate_scale not in ("none", "mean"):
            raise ValueError(f"aggregate_scale must be 'none' or 'mean', got {self.aggregate_scale!r}")


@dataclass(frozen=True)
class OcorParams:
    """Head p uses columns p*d:(p+1)*d of ``w_k``/``w_q``/``w_v`` and ``w_o[p]``."""

    w_k: Tensor  # (2C, 2C)
    w_q: Tensor  # (2C, 2C)
    w_v: Tensor  # (2C, 2C)
    w_o: Tensor  # (P, d, 2C)
    ln_scale: Tensor  # (2C,)
    ln_shift: Tensor  # (2C,)

    @property
    def heads(self) -> int:
        return self.w_o.shape[0]

    @property
    def width(self) -> int:
        return self.w_k.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_o.shape[1]

    @classmethod
    def init(cls, width: int, heads: int, rng: np.random.Generator) -> "OcorParams":
        if width % heads:
            raise ValueError(f"heads={heads} must divide feature width {width}")
        d = width // heads
        bound = 1.0 / np.sqrt(width)

        def proj():
            return Tensor(rng.uniform(-bound, bound, (width, width)), requires_grad=True)

        return cls(
            w_k=proj(),
            w_q=proj(),
            w_v=proj(),
            w_o=Tensor(rng.uniform(-1 / np.sqrt(d), 1 / np.sqrt(d), (heads, d, width)), requires_grad=True),
            ln_scale=Tensor(np.ones(width), requires_grad=True),
            ln_shift=Tensor(np.zeros(width), requires_grad=True),
        )


def _pool_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Adaptive average pooling along one axis as an (out, in) matrix."""
    mat = np.zeros((out_size, in_size))
    for o in range(out_size):
        start = (o * in_size) // out_size
        stop = -((-(o + 1) * in_size) // out_size)
        mat[o, start:stop] = 1.0 / (stop - start)
    return mat


def pool_matrix_2d(in_hw: tuple[int, int], out_hw: tuple[int, int]) -> np.ndarray:
    """(out_h*out_w, in_h*in_w) matrix for row-major adaptive average pooling."""
    return np.kron(_pool_matrix(in_hw[0], out_hw[0]), _pool_matrix(in_hw[1], out_hw[1]))


def adaptive_avg_pool(feature_map: Tensor, out_hw: tuple[int, int]) -> Tensor:
    *lead, h, w, c = feature_map.shape
    pool = pool_matrix_2d((h, w), out_hw)
    flat = ag.reshape(feature_map, (*lead, h * w, c)) if lead else ag.reshape(feature_map, (h * w, c))
    pooled = ag.matmul(pool, flat)
    return ag.reshape(pooled, (*lead, *out_hw, c))


def build_object_context(objects: Tensor, context: Tensor, out_hw: tuple[int, int] = (2, 2)) -> Tensor:
    """Pool (..., N, H, W, C) objects and (..., H', W', C) context to ``out_hw``; concat channels."""
    if objects.shape[-1] != context.shape[-1]:
        raise ag.ShapeError(
            f"build_object_context: channel mismatch {objects.shape} vs {context.shape}"
        )
    if objects.shape[:-4] != context.shape[:-3]:
        raise ag.ShapeError(
            f"build_object_context: batch mismatch {objects.shape} vs {context.shape}"
        )
    obj = adaptive_avg_pool(objects, out_hw)
    ctx = adaptive_avg_pool(context, out_hw)
    lead = ctx.shape[:-3]
    ctx = ag.reshape(ctx, (*lead, 1, *ctx.shape[-3:]))
    ctx = ag.broadcast_to(ctx, obj.shape)
    return ag.concat_lastdim([obj, ctx])


def _heads(x: Tensor, w: Tensor, heads: int) -> Tensor:
    """(B, L, 2C) @ (2C, 2C) -> (B, P, L, d)."""
    b, length, _ = x.shape
    y = ag.reshape(ag.matmul(x, w), (b, length, heads, -1))
    return ag.transpose(y, (0, 2, 1, 3))


def attention_logits(f_i: Tensor, f_j: Tensor, x: int, y: int, p: int, params: OcorParams) -> float:
    """A^p_<i,j>(x, y) for single features of shape (Ho, Wo, 2C); cells are row-major indices."""
    d = params.head_dim
    fi = f_i.data.reshape(-1, f_i.shape[-1])[x]
    fj = f_j.data.reshape(-1, f_j.shape[-1])[y]
    key = fi @ params.w_k.data[:, p * d:(p + 1) * d]
    query = fj @ params.w_q.data[:, p * d:(p + 1) * d]
    return float(key @ query)


def head_weights(logits) -> np.ndarray:
    """Softmax over the head axis (last axis) of A^1..A^P."""
    a = np.asarray(logits, dtype=np.float64)
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def relation_weights(features: Tensor, params: OcorParams, config: OcorConfig = OcorConfig()) -> Tensor:
    """Normalised weights rho of shape (B, P, N*K, N*K) with the i == j blocks zeroed."""
    x, n, k = _flatten(features)
    return _weights(x, n, k, params, config)


def _flatten(features: Tensor) -> tuple[Tensor, int, int]:
    *lead, n, ho, wo, width = features.shape
    batch = int(np.prod(lead)) if lead else 1
    return ag.reshape(features, (batch, n * ho * wo, width)), n, ho * wo


def _other_mask(n: int, k: int) -> np.ndarray:
    owner = np.repeat(np.arange(n), k)
    return (owner[:, None] != owner[None, :]).astype(np.float64)


def _weights(x: Tensor, n: int, k: int, params: OcorParams, config: OcorConfig) -> Tensor:
    heads = params.heads
    keys = _heads(x, params.w_k, heads)
    queries = _heads(x, params.w_q, heads)
    logits = ag.matmul(keys, ag.transpose(queries))  # (B, P, NK, NK)
    mask = np.broadcast_to(_other_mask(n, k), logits.shape)
    if config.softmax_axis == "heads":
        return ag.softmax_axis(logits, 1) * mask
    masked = logits + (1.0 - mask) * _MASKED_LOGIT
    return ag.softmax_axis(masked, -1) * mask


def ocor_forward(features: Tensor, params: OcorParams, config: OcorConfig = OcorConfig()) -> Tensor:
    """Relation-enhanced features, same shape as the (..., N, Ho, Wo, 2C) input."""
    shape = features.shape
    width = shape[-1]
    if width != params.width:
        raise ag.ShapeError(f"ocor_forward: feature width {width} != params width {params.width}")
    x, n, k = _flatten(features)
    batch, length, _ = x.shape
    heads, d = params.heads, params.head_dim

    if n > 1:
        rho = _weights(x, n, k, params, config)
        values = _heads(x, params.w_v, heads)  # (B, P, NK, d)
        if config.value_source == "self":
            # sorted reduction keeps outputs bit-identical under object reordering
            coef = ag.sum_axis(rho, -1, keepdims=True, order_invariant=True)
            per_head = values * ag.broadcast_to(coef, values.shape)
        else:
            per_head = ag.matmul(rho, values)
        lift = ag.broadcast_to(params.w_o, (batch, heads, d, width))
        raw = ag.sum_axis(ag.matmul(per_head, lift), 1)  # (B, NK, 2C)
        if config.aggregate_scale == "mean":
            raw = raw * (1.0 / ((n - 1) * k))
        fused = x + raw
    else:
        fused = x
    normed = ag.layer_norm_lastdim(fused)
    out = normed * ag.broadcast_to(params.ln_scale, normed.shape) + ag.broadcast_to(
        params.ln_shift, normed.shape
    )
    return ag.reshape(out, shape)
