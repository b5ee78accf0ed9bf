"""Anchor-free rotated-box head, training loss and average-precision evaluation.

Each token-grid cell predicts one objectness logit and five box numbers
(ox, oy, log w/P, log h/P, a). Decoding:

    cx = (col + sigmoid(ox)) * P      w = P * exp(log w/P)
    cy = (row + sigmoid(oy)) * P      theta = (pi/2) * tanh(a)
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .density import RefinedMask
from .errors import ShapeError
from .functional import bce_with_logits, log_softmax, nll_from_log_probs, smooth_l1
from .geometry import RotatedBox, iou_matrix, rotated_nms
from .layers import Conv2d, Module
from .tensor import Tensor

logger = logging.getLogger(__name__)

BOX_PARAMS = 5
FOCUS_WEIGHT = 0.5
DENSITY_WEIGHT = 1.0
FOCUS_THRESHOLD = 0.5
# decode-time clamp on log-extents; exp(8) is far beyond any image
LOG_EXTENT_LIMIT = 8.0


@dataclass
class Detection:
    box: RotatedBox
    grid_cell: int

    @property
    def score(self) -> float:
        return float(self.box.score)


@dataclass
class HeadOutput:
    objectness: Tensor
    boxes: Tensor

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.objectness.shape[2], self.objectness.shape[3]


@dataclass
class LossBreakdown:
    total: Tensor
    objectness: Tensor
    box_reg: Tensor
    focus_aux: Tensor
    density_aux: Tensor
    focus_weight: float = FOCUS_WEIGHT
    density_weight: float = DENSITY_WEIGHT

    def as_floats(self) -> Dict[str, float]:
        return {
            "total": self.total.item(),
            "objectness": self.objectness.item(),
            "box_reg": self.box_reg.item(),
            "focus_aux": self.focus_aux.item(),
            "density_aux": self.density_aux.item(),
        }


@dataclass
class TargetGrid:
    positive: np.ndarray
    params: np.ndarray
    gt_index: np.ndarray

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


class DetectionHead(Module):
    def __init__(self, rng: np.random.Generator, dim: int):
        self.objectness = Conv2d(rng, dim, 1, 1)
        self.boxes = Conv2d(rng, dim, BOX_PARAMS, 1)

    def __call__(self, fused: Tensor) -> HeadOutput:
        return HeadOutput(objectness=self.objectness(fused), boxes=self.boxes(fused))


def head_forward(head: DetectionHead, fused: Tensor) -> HeadOutput:
    return head(fused)


# ---------------------------------------------------------------------------
# Box encoding
# ---------------------------------------------------------------------------

def box_cell(box: RotatedBox, patch: int, grid_h: int, grid_w: int) -> Tuple[int, int]:
    row = min(max(int(math.floor(box.cy / patch)), 0), grid_h - 1)
    col = min(max(int(math.floor(box.cx / patch)), 0), grid_w - 1)
    return row, col


def encode_box(box: RotatedBox, patch: int, row: int, col: int) -> np.ndarray:
    """Regression targets (ox, oy, log w/P, log h/P, sin 2theta, cos 2theta)."""
    return np.array([
        box.cx / patch - col,
        box.cy / patch - row,
        math.log(box.w / patch),
        math.log(box.h / patch),
        math.sin(2.0 * box.theta),
        math.cos(2.0 * box.theta),
    ])


def raw_from_box(box: RotatedBox, patch: int, row: int, col: int) -> np.ndarray:
    """Head outputs that decode exactly to `box`; offsets must lie strictly inside the cell."""
    ox, oy = box.cx / patch - col, box.cy / patch - row
    if not (0.0 < ox < 1.0 and 0.0 < oy < 1.0):
        raise ShapeError(f"box center ({box.cx}, {box.cy}) is on the border of cell ({row}, {col})")
    logit = lambda p: math.log(p / (1.0 - p))  # noqa: E731
    return np.array([
        logit(ox), logit(oy),
        math.log(box.w / patch), math.log(box.h / patch),
        math.atanh(2.0 * box.theta / math.pi),
    ])


def decode_cell(raw: np.ndarray, patch: int, row: int, col: int,
                score: Optional[float] = None) -> RotatedBox:
    sig = lambda v: 0.5 * (1.0 + math.tanh(0.5 * v))  # noqa: E731
    log_w = min(max(float(raw[2]), -LOG_EXTENT_LIMIT), LOG_EXTENT_LIMIT)
    log_h = min(max(float(raw[3]), -LOG_EXTENT_LIMIT), LOG_EXTENT_LIMIT)
    return RotatedBox(
        cx=(col + sig(float(raw[0]))) * patch,
        cy=(row + sig(float(raw[1]))) * patch,
        w=patch * math.exp(log_w),
        h=patch * math.exp(log_h),
        theta=0.5 * math.pi * math.tanh(float(raw[4])),
        score=score,
    )


def assign_targets(gt_boxes: Sequence[Sequence[RotatedBox]], patch: int, grid_h: int,
                   grid_w: int) -> TargetGrid:
    """One ground truth per cell: the largest-area box whose center falls in it, ties to the lower index."""
    batch = len(gt_boxes)
    positive = np.zeros((batch, grid_h, grid_w), dtype=bool)
    params = np.zeros((batch, 6, grid_h, grid_w))
    gt_index = np.full((batch, grid_h, grid_w), -1, dtype=np.int64)
    for b, boxes in enumerate(gt_boxes):
        order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].area, i))
        for i in order:
            row, col = box_cell(boxes[i], patch, grid_h, grid_w)
            if positive[b, row, col]:
                logger.debug("image %d: box %d shares cell (%d, %d), dropped", b, i, row, col)
                continue
            positive[b, row, col] = True
            gt_index[b, row, col] = i
            params[b, :, row, col] = encode_box(boxes[i], patch, row, col)
    return TargetGrid(positive=positive, params=params, gt_index=gt_index)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def box_regression_loss(boxes: Tensor, targets: TargetGrid) -> Tensor:
    count = targets.num_positive
    if count == 0:
        return Tensor(0.0)
    weight = targets.positive[:, None].astype(np.float64)
    angle = boxes[:, 4:5].tanh() * (0.5 * math.pi)
    predicted = [
        boxes[:, 0:1].sigmoid(),
        boxes[:, 1:2].sigmoid(),
        boxes[:, 2:3],
        boxes[:, 3:4],
        (angle * 2.0).sin(),
        (angle * 2.0).cos(),
    ]
    total = None
    for k, pred in enumerate(predicted):
        term = (smooth_l1(pred - targets.params[:, k:k + 1]) * weight).sum()
        total = term if total is None else total + term
    return total / float(count)


def focus_loss(focus_logits: Sequence[Tensor], masks: Sequence[RefinedMask]) -> Tensor:
    """Cross-entropy of each focusing distribution against its mask binarized at 0.5."""
    if not focus_logits:
        return Tensor(0.0)
    total = None
    for logits, mask in zip(focus_logits, masks):
        keep = mask.tokens().data >= FOCUS_THRESHOLD
        # channel 0 is keep
        targets = np.where(keep, 0, 1)
        term = nll_from_log_probs(log_softmax(logits, axis=-1), targets)
        total = term if total is None else total + term
    return total / float(len(focus_logits))


def density_loss(raw_maps: Sequence[Tensor], pooled_targets: Sequence[np.ndarray]) -> Tensor:
    """Mean squared error of the inferring-branch output against the clipped pooled map."""
    if not raw_maps:
        return Tensor(0.0)
    total = None
    for raw, target in zip(raw_maps, pooled_targets):
        diff = raw - np.clip(target, 0.0, 1.0)
        term = (diff * diff).mean()
        total = term if total is None else total + term
    return total / float(len(raw_maps))


def detection_loss(head: HeadOutput, gt_boxes: Sequence[Sequence[RotatedBox]], patch: int,
                   focus_logits: Sequence[Tensor] = (), masks: Sequence[RefinedMask] = (),
                   density_raw: Sequence[Tensor] = (), density_targets: Sequence[np.ndarray] = (),
                   focus_weight: float = FOCUS_WEIGHT,
                   density_weight: float = DENSITY_WEIGHT) -> LossBreakdown:
    grid_h, grid_w = head.grid_shape
    if len(gt_boxes) != head.objectness.shape[0]:
        raise ShapeError(f"{len(gt_boxes)} box lists for a batch of {head.objectness.shape[0]}")
    targets = assign_targets(gt_boxes, patch, grid_h, grid_w)
    objectness = bce_with_logits(head.objectness, targets.positive[:, None]).mean()
    box_reg = box_regression_loss(head.boxes, targets)
    focus_aux = focus_loss(focus_logits, masks)
    density_aux = density_loss(density_raw, density_targets)
    total = objectness + box_reg + focus_aux * focus_weight + density_aux * density_weight
    return LossBreakdown(total=total, objectness=objectness, box_reg=box_reg,
                         focus_aux=focus_aux, density_aux=density_aux,
                         focus_weight=focus_weight, density_weight=density_weight)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def decode_detections(head: HeadOutput, patch: int, score_thresh: float,
                      nms_iou: float) -> List[List[Detection]]:
    """Per image: cells scoring at least `score_thresh`, decoded, then rotated NMS."""
    if not 0.0 < score_thresh < 1.0:
        raise ValueError(f"score_thresh must lie in (0, 1), got {score_thresh}")
    logits = head.objectness.data[:, 0]
    scores = 0.5 * (1.0 + np.tanh(0.5 * logits))
    raw = head.boxes.data
    batch, grid_h, grid_w = scores.shape
    results: List[List[Detection]] = []
    for b in range(batch):
        candidates: List[Detection] = []
        rows, cols = np.nonzero(scores[b] >= score_thresh)
        for row, col in zip(rows.tolist(), cols.tolist()):
            box = decode_cell(raw[b, :, row, col], patch, row, col, score=float(scores[b, row, col]))
            candidates.append(Detection(box=box, grid_cell=row * grid_w + col))
        kept = rotated_nms([d.box for d in candidates], nms_iou)
        results.append([candidates[i] for i in kept])
    return results


def format_detection(image_id: str, det: Detection) -> str:
    b = det.box
    return (f"{image_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f} {b.theta:.6f} "
            f"{det.score:.6f} {b.class_id}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class MatchResult:
    scores: np.ndarray
    true_positive: np.ndarray
    num_gt: int

    @property
    def matched(self) -> int:
        return int(self.true_positive.sum())


@dataclass
class EvalReport:
    per_class: Dict[str, Optional[float]]
    mAP: Optional[float]
    recall: Optional[float]
    num_images: int = 0
    num_gt: int = 0
    num_detections: int = 0

    def to_json(self) -> Dict[str, object]:
        return {"mAP": self.mAP, "recall": self.recall, "per_class": dict(self.per_class),
                "num_images": self.num_images, "num_gt": self.num_gt,
                "num_detections": self.num_detections}


def match_detections(images: Sequence[Tuple[Sequence[RotatedBox], Sequence[RotatedBox]]],
                     iou_thresh: float = 0.5) -> MatchResult:
    """Greedy matching over (detections, ground truths) pairs pooled across images.

    Detections are visited by score descending, ties by (image, index); each takes
    the unmatched ground truth of its own image with the highest IoU, if that IoU
    reaches `iou_thresh`.
    """
    entries = []
    for img, (dets, _) in enumerate(images):
        for i, d in enumerate(dets):
            if d.score is None:
                raise ValueError("detections need scores for evaluation")
            entries.append((-d.score, img, i))
    entries.sort()
    ious = [iou_matrix(dets, gts) for dets, gts in images]
    taken = [np.zeros(len(gts), dtype=bool) for _, gts in images]
    scores = np.zeros(len(entries))
    tp = np.zeros(len(entries), dtype=bool)
    for k, (neg_score, img, i) in enumerate(entries):
        scores[k] = -neg_score
        if not len(taken[img]):
            continue
        candidates = np.where(taken[img], -1.0, ious[img][i])
        j = int(np.argmax(candidates))
        if candidates[j] >= iou_thresh:
            taken[img][j] = True
            tp[k] = True
    return MatchResult(scores=scores, true_positive=tp, num_gt=sum(len(g) for _, g in images))


def ap_from_matches(result: MatchResult) -> Optional[float]:
    """All-points interpolated area under the precision/recall curve; None without ground truth."""
    if result.num_gt == 0:
        return None
    if not len(result.true_positive):
        return 0.0
    cum_tp = np.cumsum(result.true_positive)
    precision = cum_tp / np.arange(1, len(cum_tp) + 1)
    recall = cum_tp / result.num_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def average_precision(dets: Sequence[RotatedBox], gts: Sequence[RotatedBox],
                      iou_thresh: float = 0.5) -> Optional[float]:
    return ap_from_matches(match_detections([(dets, gts)], iou_thresh))


def recall_at(dets: Sequence[RotatedBox], gts: Sequence[RotatedBox],
              iou_thresh: float = 0.5) -> Optional[float]:
    result = match_detections([(dets, gts)], iou_thresh)
    return None if result.num_gt == 0 else result.matched / result.num_gt


def evaluate(images: Sequence[Tuple[Sequence[RotatedBox], Sequence[RotatedBox]]],
             class_names: Sequence[str], iou_thresh: float = 0.5) -> EvalReport:
    """Per-class AP for every class present in the ground truth, their mean, and pooled recall."""
    present = sorted({g.class_id for _, gts in images for g in gts})
    per_class: Dict[str, Optional[float]] = {}
    matched = 0
    total_gt = 0
    for cid in present:
        subset = [([d for d in dets if d.class_id == cid], [g for g in gts if g.class_id == cid])
                  for dets, gts in images]
        result = match_detections(subset, iou_thresh)
        name = class_names[cid] if 0 <= cid < len(class_names) else str(cid)
        per_class[name] = ap_from_matches(result)
        matched += result.matched
        total_gt += result.num_gt
    values = [v for v in per_class.values() if v is not None]
    return EvalReport(
        per_class=per_class,
        mAP=float(np.mean(values)) if values else None,
        recall=matched / total_gt if total_gt else None,
        num_images=len(images),
        num_gt=total_gt,
        num_detections=sum(len(d) for d, _ in images),
    )

