"""Toy-scale training on planted-rank scenes."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from ..metrics import MetricReport, evaluate_images
from ..params import map_tensors, named_tensors
from .losses import GroundTruth, dice_loss, pairwise_rank_loss, set_prediction_loss
from .model import PipelineConfig, PipelineParams, StageOutput, forward, resize_nearest, run_pipeline
from .scenes import Scene, SceneConfig, generate_scenes

log = logging.getLogger(__name__)

HELD_OUT_OFFSET = 1_000_000


class NumericError(FloatingPointError):
    """Loss or gradients became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    scenes: int = 64
    held_out: int = 16
    batch_size: int = 4
    lr: float = 2e-3
    weight_decay: float = 1e-4
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_rank: float = 1.0
    lambda_dice: float = 1.0
    bg_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def total_loss(outputs: Sequence[StageOutput], batch: Sequence[Scene], cfg: PipelineConfig,
               tcfg: TrainConfig) -> Tensor:
    """Set-prediction + ranking + dice losses, averaged over the images of the batch."""
    m = cfg.mask_size
    total = None
    for b, scene in enumerate(batch):
        gts = scene.ground_truth()
        per_stage = [
            dataclasses.replace(o, rank_logits=o.rank_logits[b], boxes=o.boxes[b], mask_logits=None)
            for o in outputs
        ]
        loss, assigns = set_prediction_loss(per_stage, gts, bg_weight=tcfg.bg_weight)
        final = outputs[-1]
        assign = assigns[-1]
        if len(gts):
            scores = ag.matmul(_pick(assign, final.saliency_scores.shape[1]),
                               ag.reshape(final.saliency_scores[b], (-1, 1)))
            loss = loss + pairwise_rank_loss(ag.reshape(scores, (-1,)), [g.rank for g in gts]) * tcfg.lambda_rank
            masks = final.mask_logits[b]  # (N, M, M)
            picked = ag.matmul(_pick(assign, masks.shape[0]), ag.reshape(masks, (masks.shape[0], m * m)))
            gt_masks = np.stack([resize_nearest(g.mask, m, m) for g in gts]).astype(np.float64)
            loss = loss + dice_loss(ag.reshape(picked, (len(gts), m, m)), gt_masks) * tcfg.lambda_dice
        total = loss if total is None else total + loss
    return total * (1.0 / len(batch))


def _pick(assign: np.ndarray, n: int) -> np.ndarray:
    sel = np.zeros((len(assign), n))
    sel[np.arange(len(assign)), assign] = 1.0
    return sel


def loss_and_grads(batch: Sequence[Scene], params: PipelineParams, cfg: PipelineConfig,
                   tcfg: TrainConfig) -> tuple[float, dict[str, np.ndarray]]:
    images = np.stack([s.image for s in batch])
    with ag.Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
        try:
            outputs = forward(images, params, cfg)
        except FloatingPointError as exc:
            raise NumericError(str(exc)) from None
        for k, out in enumerate(outputs):
            for name in ("rank_logits", "saliency_scores", "boxes", "mask_logits"):
                t = getattr(out, name)
                if t is not None and not np.isfinite(t.data).all():
                    raise NumericError(f"non-finite {name} at stage {k}")
        loss = total_loss(outputs, batch, cfg, tcfg)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    ag.backward(tape, loss)
    grads = {}
    for name, t in named_tensors(params).items():
        g = tape.grad(t)
        grads[name] = np.zeros(t.shape) if g is None else g.data
    return value, grads


def apply_update(params: PipelineParams, grads: dict[str, np.ndarray], state: OptimizerState,
                 tcfg: TrainConfig) -> tuple[PipelineParams, OptimizerState]:
    """One decoupled-weight-decay step (plain gradient descent or Adam moments)."""
    lr, wd = tcfg.lr, tcfg.weight_decay
    if lr == 0.0:
        return params, state
    step = state.step + 1
    m, v = dict(state.m), dict(state.v)

    def update(name: str, t: Tensor) -> Tensor:
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
        if tcfg.optimizer == "sgd":
            direction = g
        else:
            m[name] = tcfg.beta1 * m.get(name, 0.0) + (1 - tcfg.beta1) * g
            v[name] = tcfg.beta2 * v.get(name, 0.0) + (1 - tcfg.beta2) * g * g
            m_hat = m[name] / (1 - tcfg.beta1 ** step)
            v_hat = v[name] / (1 - tcfg.beta2 ** step)
            direction = m_hat / (np.sqrt(v_hat) + 1e-8)
        return Tensor(t.data - lr * direction - lr * wd * t.data, requires_grad=True)

    return map_tensors(params, update), OptimizerState(step, m, v)


def train_step(batch: Sequence[Scene], params: PipelineParams, state: OptimizerState,
               cfg: PipelineConfig, tcfg: TrainConfig) -> tuple[PipelineParams, OptimizerState, float]:
    value, grads = loss_and_grads(batch, params, cfg, tcfg)
    params, state = apply_update(params, grads, state, tcfg)
    return params, state, value


@dataclass
class TrainResult:
    params: PipelineParams
    losses: list[float]
    report: MetricReport
    held_out_sor: Optional[float]
    loss_reduction: Optional[float]
    seconds: float
    predictions: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (
            self.held_out_sor is not None
            and self.held_out_sor >= 0.75
            and self.loss_reduction is not None
            and self.loss_reduction >= 0.5
        )


def loss_reduction(losses: Sequence[float], window: int = 10) -> Optional[float]:
    """1 - mean(last window) / mean(first window)."""
    if len(losses) < window:
        return None
    head = float(np.mean(losses[:window]))
    tail = float(np.mean(losses[-window:]))
    return 1.0 - tail / head


def evaluate_model(params: PipelineParams, scenes: Sequence[Scene], cfg: PipelineConfig,
                   iou_threshold: float = 0.5):
    preds, gts = {}, {}
    for start in range(0, len(scenes), 8):
        chunk = scenes[start:start + 8]
        insts = run_pipeline(np.stack([s.image for s in chunk]), params, cfg)
        for scene, found in zip(chunk, insts):
            img = scene.instances()
            preds[scene.image_id] = dataclasses.replace(img, instances=found)
            gts[scene.image_id] = img
    return evaluate_images(preds, gts, iou_threshold, r_den=cfg.r_max), preds


def train_toy(cfg: PipelineConfig, tcfg: TrainConfig, scene_cfg: Optional[SceneConfig] = None,
              on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    scene_cfg = scene_cfg or SceneConfig(seed=tcfg.seed, image_size=cfg.image_size)
    train_set = generate_scenes(scene_cfg, tcfg.scenes)
    held_out = generate_scenes(scene_cfg, tcfg.held_out, start=HELD_OUT_OFFSET)
    params = PipelineParams.init(cfg, seed=tcfg.seed)
    state = OptimizerState()
    order_rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 7]))
    order: list[int] = []
    losses: list[float] = []
    t0 = time.perf_counter()
    for step in range(tcfg.steps):
        if len(order) < tcfg.batch_size:
            order.extend(order_rng.permutation(len(train_set)).tolist())
        idx, order = order[: tcfg.batch_size], order[tcfg.batch_size:]
        params, state, value = train_step([train_set[i] for i in idx], params, state, cfg, tcfg)
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
    report, preds = evaluate_model(params, held_out, cfg)
    return TrainResult(
        params=params,
        losses=losses,
        report=report,
        held_out_sor=report.sor,
        loss_reduction=loss_reduction(losses),
        seconds=time.perf_counter() - t0,
        predictions=[preds[k] for k in sorted(preds)],
    )
