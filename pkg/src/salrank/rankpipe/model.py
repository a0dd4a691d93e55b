"""Multi-stage query-based saliency-ranking pipeline.

Each stage samples object features from the previous boxes, enhances them
with SOS then OCOR, fuses the result with self-attended object queries, and
emits rank logits, a saliency score and a refined box. The final stage also
emits whole-image mask logits.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from ..metrics import RankedInstance
from ..ocor import OcorConfig, OcorParams, build_object_context, ocor_forward
from ..sos import RectifyParams, sos_forward
from . import boxes as bx
from .roi import roi_extract, roi_matrix
from .scenes import BACKBONE_CHANNELS, backbone_features


@dataclass(frozen=True)
class PipelineConfig:
    channels: int = 16
    num_queries: int = 8
    stages: int = 2
    heads: int = 8
    r_max: int = 5
    roi_size: int = 7
    ocor_size: int = 2
    mask_size: int = 14
    grid: int = 16
    image_size: int = 32
    reduction: int = 4
    use_sos: bool = True
    use_ocor: bool = True
    ocor: OcorConfig = field(default_factory=OcorConfig)
    box_step: float = 0.25

    @property
    def num_classes(self) -> int:
        return self.r_max + 1

    @property
    def background(self) -> int:
        return self.r_max


def _uniform(rng, fan_in, shape, scale=1.0):
    bound = scale / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass(frozen=True)
class HeadParams:
    sa_q: Tensor
    sa_k: Tensor
    sa_v: Tensor
    sa_ln_scale: Tensor
    sa_ln_shift: Tensor
    fuse1_w: Tensor
    fuse1_b: Tensor
    fuse2_w: Tensor
    fuse2_b: Tensor
    out_ln_scale: Tensor
    out_ln_shift: Tensor
    cls_w: Tensor
    cls_b: Tensor
    score_w: Tensor
    score_b: Tensor
    box_w: Tensor
    box_b: Tensor
    pos_w: Tensor  # (2, C) box-size embedding added before self-attention

    @classmethod
    def init(cls, cfg: PipelineConfig, rng: np.random.Generator) -> "HeadParams":
        c = cfg.channels
        flat = cfg.ocor_size * cfg.ocor_size * 2 * c
        return cls(
            sa_q=_uniform(rng, c, (c, c)),
            sa_k=_uniform(rng, c, (c, c)),
            sa_v=_uniform(rng, c, (c, c)),
            sa_ln_scale=_ones(c),
            sa_ln_shift=_zeros(c),
            fuse1_w=_uniform(rng, flat, (flat, c)),
            fuse1_b=_zeros(c),
            fuse2_w=_uniform(rng, c, (c, c)),
            fuse2_b=_zeros(c),
            out_ln_scale=_ones(c),
            out_ln_shift=_zeros(c),
            cls_w=_uniform(rng, c, (c, cfg.num_classes)),
            cls_b=_zeros(cfg.num_classes),
            score_w=_uniform(rng, c, (c, 1)),
            score_b=_zeros(1),
            box_w=_uniform(rng, c, (c, 4), scale=0.1),
            box_b=_zeros(4),
            pos_w=_uniform(rng, 2, (2, c)),
        )


@dataclass(frozen=True)
class StageParams:
    rectify: RectifyParams
    ocor: OcorParams
    head: HeadParams


@dataclass(frozen=True)
class PipelineParams:
    stem_w: Tensor  # (backbone channels, C)
    stem_b: Tensor
    init_boxes: Tensor  # (N, 4) cxcywh
    init_queries: Tensor  # (N, C)
    stages: tuple[StageParams, ...]
    mask_w: Tensor  # (C, C)
    mask_b: Tensor  # (1,)
    mask_prior: Tensor  # (1,) weight on the inside-box prior

    @classmethod
    def init(cls, cfg: PipelineConfig, seed: int = 0) -> "PipelineParams":
        rng = np.random.default_rng(seed)
        c = cfg.channels
        stages = tuple(
            StageParams(
                rectify=RectifyParams.init(c, rng, cfg.reduction),
                ocor=OcorParams.init(2 * c, cfg.heads, rng),
                head=HeadParams.init(cfg, rng),
            )
            for _ in range(cfg.stages)
        )
        return cls(
            stem_w=_uniform(rng, BACKBONE_CHANNELS, (BACKBONE_CHANNELS, c), scale=2.0),
            stem_b=_zeros(c),
            init_boxes=Tensor(initial_boxes(cfg.num_queries), requires_grad=True),
            init_queries=Tensor(rng.normal(0.0, 1.0, (cfg.num_queries, c)), requires_grad=True),
            stages=stages,
            mask_w=_uniform(rng, c, (c, c)),
            mask_b=_zeros(1),
            mask_prior=Tensor(np.array([4.0]), requires_grad=True),
        )


def initial_boxes(n: int, size: float = 0.4) -> np.ndarray:
    """Proposal boxes centred on a near-square grid over the image."""
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    cells = [divmod(k, cols) for k in range(n)]
    centres = np.array([[(c + 0.5) / cols, (r + 0.5) / rows] for r, c in cells])
    centres = np.clip(centres, size / 2, 1 - size / 2)
    return np.concatenate([centres, np.full((n, 2), size)], axis=1)


@dataclass
class QueryState:
    stage: int
    box_queries: Tensor  # (B, N, 4) cxcywh
    object_queries: Tensor  # (B, N, C)
    object_features: Optional[Tensor] = None  # (B, N, roi, roi, C)


@dataclass
class StageOutput:
    rank_logits: Tensor  # (B, N, R_max + 1)
    saliency_scores: Tensor  # (B, N)
    boxes: Tensor  # (B, N, 4) cxcywh
    mask_logits: Optional[Tensor] = None  # (B, N, M, M)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = ag.matmul(x, w)
    return y + ag.broadcast_to(b, y.shape)


def _affine_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    n = ag.layer_norm_lastdim(x, eps=1e-5)
    return n * ag.broadcast_to(scale, n.shape) + ag.broadcast_to(shift, n.shape)


def context_features(images: np.ndarray, params: PipelineParams, cfg: PipelineConfig) -> Tensor:
    """(B, S, S, 3) images -> learned (B, G, G, C) context features."""
    raw = np.stack([backbone_features(img, cfg.grid) for img in images])
    b, g, _, k = raw.shape
    flat = ag.reshape(Tensor(raw), (b, g * g, k))
    feats = ag.relu(_linear(flat, params.stem_w, params.stem_b))
    return ag.reshape(feats, (b, g, g, cfg.channels))


def initial_state(params: PipelineParams, batch: int, cfg: PipelineConfig) -> QueryState:
    n, c = cfg.num_queries, cfg.channels
    boxes = ag.broadcast_to(ag.reshape(params.init_boxes, (1, n, 4)), (batch, n, 4))
    queries = ag.broadcast_to(ag.reshape(params.init_queries, (1, n, c)), (batch, n, c))
    return QueryState(0, bx.clip_boxes(boxes), queries)


def self_attention(q: Tensor, head: HeadParams) -> Tensor:
    """Single-head scaled dot-product attention across the queries of each image, with residual + norm."""
    c = q.shape[-1]
    qs = ag.matmul(q, head.sa_q)
    ks = ag.matmul(q, head.sa_k)
    vs = ag.matmul(q, head.sa_v)
    att = ag.softmax_axis(ag.matmul(qs, ag.transpose(ks)) * (1.0 / np.sqrt(c)), -1)
    return _affine_norm(q + ag.matmul(att, vs), head.sa_ln_scale, head.sa_ln_shift)


def stage_forward(state: QueryState, context: Tensor, stage: StageParams,
                  cfg: PipelineConfig) -> tuple[QueryState, StageOutput]:
    b, n = state.box_queries.shape[:2]
    r = cfg.roi_size
    obj = roi_extract(context, state.box_queries.data, (r, r))  # (B, N, r, r, C)
    enhanced = sos_forward(obj, stage.rectify) if cfg.use_sos else obj
    oc = build_object_context(enhanced, context, (cfg.ocor_size, cfg.ocor_size))
    if cfg.use_ocor:
        oc = ocor_forward(oc, stage.ocor, cfg.ocor)
    head = stage.head
    flat = ag.reshape(oc, (b, n, -1))
    h = ag.relu(_linear(flat, head.fuse1_w, head.fuse1_b))
    pos = ag.matmul(Tensor(state.box_queries.data[..., 2:]), head.pos_w)
    fused = h * self_attention(state.object_queries + pos, head)
    q_obj = _affine_norm(fused + ag.relu(_linear(fused, head.fuse2_w, head.fuse2_b)),
                         head.out_ln_scale, head.out_ln_shift)

    logits = _linear(q_obj, head.cls_w, head.cls_b)
    scores = ag.reshape(_linear(q_obj, head.score_w, head.score_b), (b, n))
    delta = _linear(q_obj, head.box_w, head.box_b) * cfg.box_step
    new_boxes = bx.clip_boxes(state.box_queries + delta)
    new_state = QueryState(state.stage + 1, new_boxes, q_obj, obj)
    return new_state, StageOutput(logits, scores, new_boxes)


def box_prior(boxes_cxcywh: np.ndarray, m: int) -> np.ndarray:
    """+1 for mask cells whose centre lies inside the box, -1 elsewhere: (..., m*m)."""
    xyxy = bx.cxcywh_to_xyxy(boxes_cxcywh)
    centres = (np.arange(m) + 0.5) / m
    inside_x = (centres >= xyxy[..., 0:1]) & (centres <= xyxy[..., 2:3])  # (..., m)
    inside_y = (centres >= xyxy[..., 1:2]) & (centres <= xyxy[..., 3:4])
    inside = inside_y[..., :, None] & inside_x[..., None, :]
    return np.where(inside, 1.0, -1.0).reshape(*boxes_cxcywh.shape[:-1], m * m)


def mask_head(state: QueryState, context: Tensor, params: PipelineParams, cfg: PipelineConfig) -> Tensor:
    """Whole-image (B, N, M, M) mask logits: query-conditioned dot product with resampled context plus box prior."""
    b, g, _, c = context.shape
    m = cfg.mask_size
    n = state.object_queries.shape[1]
    resample = roi_matrix(np.array([0.5, 0.5, 1.0, 1.0]), (g, g), (m, m))
    feat = ag.matmul(resample, ag.reshape(context, (b, g * g, c)))  # (B, M*M, C)
    emb = ag.matmul(state.object_queries, params.mask_w)  # (B, N, C)
    logits = ag.matmul(emb, ag.transpose(feat)) * (1.0 / np.sqrt(c))
    prior = box_prior(state.box_queries.data, m)
    logits = logits + ag.broadcast_to(params.mask_prior, logits.shape) * prior
    logits = logits + ag.broadcast_to(params.mask_b, logits.shape)
    return ag.reshape(logits, (b, n, m, m))


def forward(images: np.ndarray, params: PipelineParams, cfg: PipelineConfig) -> list[StageOutput]:
    """Run all stages on a (B, S, S, 3) batch; the last output carries mask logits."""
    context = context_features(images, params, cfg)
    return forward_from_context(context, params, cfg)


def forward_from_context(context: Tensor, params: PipelineParams, cfg: PipelineConfig) -> list[StageOutput]:
    state = initial_state(params, context.shape[0], cfg)
    outputs = []
    for stage in params.stages[: cfg.stages]:
        state, out = stage_forward(state, context, stage, cfg)
        outputs.append(out)
    outputs[-1].mask_logits = mask_head(state, context, params, cfg)
    return outputs


# ---------------------------------------------------------------------------
# inference


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def resize_nearest(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    m_h, m_w = mask.shape
    rows = np.minimum(((np.arange(height) + 0.5) * m_h / height).astype(int), m_h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * m_w / width).astype(int), m_w - 1)
    return mask[np.ix_(rows, cols)]


def decode_instances(final: StageOutput, index: int, cfg: PipelineConfig,
                     image_hw: Optional[tuple[int, int]] = None) -> list[RankedInstance]:
    """Turn one image's final-stage output into deduplicated ranked instances."""
    h, w = image_hw or (cfg.image_size, cfg.image_size)
    probs = _softmax(final.rank_logits.data[index])
    classes = probs.argmax(axis=-1)
    conf = probs[np.arange(len(classes)), classes]
    emitted = [q for q in range(len(classes)) if classes[q] != cfg.background]
    emitted.sort(key=lambda q: (-conf[q], q))
    taken: set[int] = set()
    out = []
    for q in emitted:
        rank = int(classes[q]) + 1
        while rank in taken and rank <= cfg.r_max:
            rank += 1
        if rank > cfg.r_max:
            continue
        taken.add(rank)
        mask = resize_nearest(final.mask_logits.data[index, q] > 0.0, h, w)
        box = bx.cxcywh_to_xyxy(final.boxes.data[index, q]) * [w, h, w, h]
        out.append(RankedInstance(rank, mask, float(conf[q]), [float(v) for v in box]))
    return out


def run_pipeline(images: np.ndarray, params: PipelineParams, cfg: PipelineConfig) -> list[list[RankedInstance]]:
    """Ranked instances for each image of a (B, S, S, 3) batch (single images get B = 1)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    final = forward(images, params, cfg)[-1]
    return [decode_instances(final, i, cfg, images.shape[1:3]) for i in range(images.shape[0])]
