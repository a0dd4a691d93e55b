"""Saliency-ranking evaluation: RLE masks, instance matching, SOR, SA-SOR and MAE."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class InstanceFileError(ValueError):
    """Raised for unreadable or inconsistent instance / prediction files."""


# ---------------------------------------------------------------------------
# RLE


@dataclass(frozen=True)
class RLE:
    height: int
    width: int
    counts: tuple[int, ...]

    def to_json(self) -> dict:
        return {"height": self.height, "width": self.width, "counts": list(self.counts)}


def rle_encode(mask: np.ndarray) -> RLE:
    """Row-major runs, alternating zero/one, starting with a (possibly empty) zero-run."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"rle_encode expects a 2-D mask, got shape {mask.shape}")
    flat = mask.reshape(-1).astype(bool)
    h, w = mask.shape
    if flat.size == 0:
        return RLE(h, w, ())
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return RLE(h, w, tuple(int(r) for r in runs))


def rle_decode(rle: RLE) -> np.ndarray:
    counts = list(rle.counts)
    total = sum(counts)
    expected = rle.height * rle.width
    if total != expected:
        raise ValueError(f"RLE counts sum to {total}, expected {expected} ({rle.height}x{rle.width})")
    if any(c < 0 for c in counts):
        raise ValueError("RLE counts must be non-negative")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape(rle.height, rle.width)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask_iou: dimension mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


# ---------------------------------------------------------------------------
# instances and files


@dataclass
class RankedInstance:
    rank: int
    mask: np.ndarray
    score: float = 1.0
    box: Optional[list[float]] = None

    def to_json(self) -> dict:
        out = {"rank": int(self.rank), "score": float(self.score), "mask": rle_encode(self.mask).to_json()}
        if self.box is not None:
            out["box"] = [float(v) for v in self.box]
        return out


@dataclass
class ImageInstances:
    image_id: str
    height: int
    width: int
    instances: list[RankedInstance] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "height": self.height,
            "width": self.width,
            "instances": [inst.to_json() for inst in self.instances],
        }


def _parse_instance(raw: dict, where: str, height: int, width: int) -> RankedInstance:
    try:
        rank = raw["rank"]
        m = raw["mask"]
        rle = RLE(int(m["height"]), int(m["width"]), tuple(int(c) for c in m["counts"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InstanceFileError(f"{where}: malformed instance ({exc})") from None
    if not isinstance(rank, int) or isinstance(rank, bool) or rank < 1:
        raise InstanceFileError(f"{where}: rank must be an integer >= 1, got {rank!r}")
    if (rle.height, rle.width) != (height, width):
        raise InstanceFileError(
            f"{where}: mask is {rle.height}x{rle.width} but image is {height}x{width}"
        )
    try:
        mask = rle_decode(rle)
    except ValueError as exc:
        raise InstanceFileError(f"{where}: {exc}") from None
    score = float(raw.get("score", 1.0))
    box = raw.get("box")
    if box is not None:
        box = [float(v) for v in box]
        if len(box) != 4:
            raise InstanceFileError(f"{where}: box must have 4 numbers")
    return RankedInstance(rank=rank, mask=mask, score=score, box=box)


def parse_instance_file(doc: dict, source: str = "<memory>") -> dict[str, ImageInstances]:
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise InstanceFileError(f"{source}: top level must be an object with an 'images' list")
    images: dict[str, ImageInstances] = {}
    for n, raw in enumerate(doc["images"]):
        try:
            image_id = raw["image_id"]
            height, width = int(raw["height"]), int(raw["width"])
            raw_instances = raw.get("instances", [])
        except (KeyError, TypeError, ValueError) as exc:
            raise InstanceFileError(f"{source}: images[{n}] malformed ({exc})") from None
        if not isinstance(image_id, str):
            raise InstanceFileError(f"{source}: images[{n}].image_id must be a string")
        if image_id in images:
            raise InstanceFileError(f"{source}: duplicate image_id {image_id!r}")
        insts = [
            _parse_instance(r, f"{source}: image {image_id!r} instance {k}", height, width)
            for k, r in enumerate(raw_instances)
        ]
        images[image_id] = ImageInstances(image_id, height, width, insts)
    return images


def load_instance_file(path) -> dict[str, ImageInstances]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InstanceFileError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceFileError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_instance_file(doc, str(path))


def dump_instance_file(images: Sequence[ImageInstances]) -> str:
    doc = {"images": [img.to_json() for img in images]}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


# ---------------------------------------------------------------------------
# matching and per-image statistics


@dataclass
class Matching:
    pairs: list[tuple[int, int, float]]  # (pred index, gt index, iou)
    unmatched_preds: list[int]
    unmatched_gts: list[int]


def match_instances(preds: Sequence[RankedInstance], gts: Sequence[RankedInstance],
                    iou_threshold: float = 0.5) -> Matching:
    """Greedy matching by descending score (ties: smaller rank, then input order)."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].rank, i))
    free = set(range(len(gts)))
    pairs = []
    for pi in order:
        best, best_iou = None, -1.0
        for gi in sorted(free):
            iou = mask_iou(preds[pi].mask, gts[gi].mask)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = gi, iou
        if best is not None:
            free.discard(best)
            pairs.append((pi, best, best_iou))
    matched_preds = {p for p, _, _ in pairs}
    return Matching(
        pairs=pairs,
        unmatched_preds=[i for i in range(len(preds)) if i not in matched_preds],
        unmatched_gts=sorted(free),
    )


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing their mean position."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        return None
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        return None
    return float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))


def spearman(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    if len(x) < 2:
        return None
    return pearson(average_ranks(x), average_ranks(y))


def sor(pred_ranks: Sequence[int], gt_ranks: Sequence[int]) -> Optional[float]:
    """Normalised Spearman correlation (rho + 1) / 2 over matched pairs; None if undefined."""
    rho = spearman(pred_ranks, gt_ranks)
    return None if rho is None else (rho + 1.0) / 2.0


def sa_sor(preds: Sequence[RankedInstance], gts: Sequence[RankedInstance],
           matching: Matching) -> Optional[float]:
    """Pearson over ground-truth instances; a missed instance contributes predicted rank 0."""
    if len(gts) < 2:
        return None
    paired = [0.0] * len(gts)
    for pi, gi, _ in matching.pairs:
        paired[gi] = float(preds[pi].rank)
    return pearson([g.rank for g in gts], paired)


def render_saliency(instances: Sequence[RankedInstance], height: int, width: int, r_den: int) -> np.ndarray:
    """Gray value (r_den - r + 1) / r_den on each mask; the more salient instance wins overlaps."""
    out = np.zeros((height, width))
    for inst in sorted(instances, key=lambda i: -i.rank):
        if inst.rank > r_den:
            raise ValueError(f"rank {inst.rank} exceeds r_den={r_den}")
        if inst.mask.shape != (height, width):
            raise ValueError(f"mask shape {inst.mask.shape} does not match image {height}x{width}")
        out[np.asarray(inst.mask, dtype=bool)] = (r_den - inst.rank + 1) / r_den
    return out


def mae(preds: Sequence[RankedInstance], gts: Sequence[RankedInstance],
        height: int, width: int, r_den: int = 5) -> float:
    p = render_saliency(preds, height, width, r_den)
    g = render_saliency(gts, height, width, r_den)
    return float(np.abs(p - g).mean())


# ---------------------------------------------------------------------------
# evaluation over files


@dataclass
class ImageReport:
    image_id: str
    matched_pairs: list[tuple[int, int, float]]
    sor: Optional[float]
    sor_rho: Optional[float]
    sa_sor: Optional[float]
    mae: float


@dataclass
class MetricReport:
    images: list[ImageReport]
    sor: Optional[float]
    sa_sor: Optional[float]
    mae: Optional[float]
    skipped_sor: int
    skipped_sa_sor: int
    iou_threshold: float
    r_den: int

    def to_json(self) -> dict:
        return {
            "aggregate": {"mae": self.mae, "sa_sor": self.sa_sor, "sor": self.sor},
            "images": [
                {
                    "image_id": r.image_id,
                    "mae": r.mae,
                    "matched_pairs": [
                        {"gt": g, "iou": iou, "pred": p} for p, g, iou in r.matched_pairs
                    ],
                    "sa_sor": r.sa_sor,
                    "sor": r.sor,
                    "sor_rho": r.sor_rho,
                }
                for r in self.images
            ],
            "num_images": len(self.images),
            "options": {"iou_threshold": self.iou_threshold, "r_den": self.r_den},
            "skipped": {"sa_sor": self.skipped_sa_sor, "sor": self.skipped_sor},
        }

    def dumps(self) -> str:
        return json.dumps(_round_floats(self.to_json()), sort_keys=True, indent=2) + "\n"


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.9g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def evaluate_image(pred: ImageInstances, gt: ImageInstances, iou_threshold: float = 0.5,
                   r_den: int = 5) -> ImageReport:
    matching = match_instances(pred.instances, gt.instances, iou_threshold)
    pred_ranks = [pred.instances[p].rank for p, _, _ in matching.pairs]
    gt_ranks = [gt.instances[g].rank for _, g, _ in matching.pairs]
    rho = spearman(pred_ranks, gt_ranks)
    return ImageReport(
        image_id=gt.image_id,
        matched_pairs=matching.pairs,
        sor=None if rho is None else (rho + 1.0) / 2.0,
        sor_rho=rho,
        sa_sor=sa_sor(pred.instances, gt.instances, matching),
        mae=mae(pred.instances, gt.instances, gt.height, gt.width, r_den),
    )


def _mean_or_none(values: list[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def evaluate_images(preds: dict[str, ImageInstances], gts: dict[str, ImageInstances],
                    iou_threshold: float = 0.5, r_den: int = 5, source: str = "predictions") -> MetricReport:
    unknown = sorted(set(preds) - set(gts))
    if unknown:
        raise InstanceFileError(f"{source}: unknown image id {unknown[0]!r}")
    reports = []
    for image_id in sorted(gts):
        gt = gts[image_id]
        pred = preds.get(image_id, ImageInstances(image_id, gt.height, gt.width, []))
        if (pred.height, pred.width) != (gt.height, gt.width):
            raise InstanceFileError(f"{source}: image {image_id!r} size differs from ground truth")
        try:
            reports.append(evaluate_image(pred, gt, iou_threshold, r_den))
        except ValueError as exc:
            raise InstanceFileError(f"{source}: image {image_id!r}: {exc}") from None
    sors = [r.sor for r in reports if r.sor is not None]
    sasors = [r.sa_sor for r in reports if r.sa_sor is not None]
    return MetricReport(
        images=reports,
        sor=_mean_or_none(sors),
        sa_sor=_mean_or_none(sasors),
        mae=_mean_or_none([r.mae for r in reports]),
        skipped_sor=len(reports) - len(sors),
        skipped_sa_sor=len(reports) - len(sasors),
        iou_threshold=iou_threshold,
        r_den=r_den,
    )


def evaluate(pred_path, gt_path, iou_threshold: float = 0.5, r_den: int = 5) -> MetricReport:
    gts = load_instance_file(gt_path)
    preds = load_instance_file(pred_path)
    return evaluate_images(preds, gts, iou_threshold, r_den, source=str(pred_path))
