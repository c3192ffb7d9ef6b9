"""Anchor-free box decoding, IoU, greedy per-class NMS, and a COCO-style
mAP50-95 evaluator, plus the JSON-lines box interchange used by the CLI."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .blocks import DetectOutput
from .tensor import ConfigError, sigmoid

Box = tuple[float, float, float, float]

IOU_THRESHOLDS = tuple(0.50 + 0.05 * i for i in range(10))


def _check_box(bbox: Box) -> None:
    x1, y1, x2, y2 = bbox
    if not (x2 > x1 and y2 > y1):
        raise ValueError(f"box must have positive extent, got {bbox}")


@dataclass(frozen=True)
class Detection:
    """One decoded box in input-image pixel coordinates."""

    bbox: Box
    class_id: int
    score: float

    def __post_init__(self):
        _check_box(self.bbox)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruthBox:
    bbox: Box
    class_id: int
    image_id: str | int

    def __post_init__(self):
        _check_box(self.bbox)


@dataclass(frozen=True)
class EvalResult:
    map50: float
    map50_95: float
    per_class: dict[int, dict[str, float]]


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; degenerate overlap is 0."""
    ix1 = max(a[0], b[0])
    iy1 = max(a[1], b[1])
    ix2 = min(a[2], b[2])
    iy2 = min(a[3], b[3])
    iw = max(0.0, ix2 - ix1)
    ih = max(0.0, iy2 - iy1)
    inter = iw * ih
    if inter <= 0.0:
        return 0.0
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _softmax(v: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def decode(
    raw: DetectOutput,
    conf_thresh: float = 0.25,
    reg_max: int | None = None,
    strides: tuple[int, ...] | None = None,
) -> list[Detection]:
    """Decode raw head maps (batch 1) into scored boxes.

    Per cell: each box side is the expected value of a softmax over
    ``reg_max`` distance bins, in cell units, scaled by the stride and
    offset from the cell center; class scores are sigmoids of the class
    logits. Detections below ``conf_thresh`` are dropped. Output order is
    per scale, then class-major over row-major cells.
    """
    reg_max = raw.reg_max if reg_max is None else reg_max
    strides = raw.strides if strides is None else strides
    nc = raw.num_classes
    out: list[Detection] = []
    bins = np.arange(reg_max, dtype=np.float32)
    for fmap, stride in zip(raw.maps, strides):
        if fmap.n != 1:
            raise ConfigError(f"decode expects batch 1, got batch {fmap.n}")
        if fmap.c != 4 * reg_max + nc:
            raise ConfigError(
                f"detect map has {fmap.c} channels, expected 4*{reg_max}+{nc}"
            )
        h, w = fmap.h, fmap.w
        data = fmap.data[0]
        scores = sigmoid(data[4 * reg_max :])  # (nc, h, w)
        keep = np.argwhere(scores >= conf_thresh)  # lexicographic (class, row, col)
        if keep.size == 0:
            continue
        # box distributions are decoded only for surviving cells
        cells = keep[:, 1] * w + keep[:, 2]
        logits = data[: 4 * reg_max].reshape(4, reg_max, h * w)[:, :, cells]
        dist = _softmax(logits, axis=1)
        sides = np.tensordot(bins, dist, axes=([0], [1]))  # (4, kept): l, t, r, b
        # numerical floor: a fully collapsed distribution must still yield a
        # box with positive extent after float32 rounding
        sides = np.maximum(sides, 1e-4)
        cx = keep[:, 2].astype(np.float32) + 0.5
        cy = keep[:, 1].astype(np.float32) + 0.5
        x1 = (cx - sides[0]) * stride
        y1 = (cy - sides[1]) * stride
        x2 = (cx + sides[2]) * stride
        y2 = (cy + sides[3]) * stride
        for i, (cls, row, col) in enumerate(keep):
            out.append(
                Detection(
                    bbox=(float(x1[i]), float(y1[i]), float(x2[i]), float(y2[i])),
                    class_id=int(cls),
                    score=float(scores[cls, row, col]),
                )
            )
    return out


def nms(dets: list[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression, score-descending.

    A box is dropped when its IoU with an already-kept box of the same
    class exceeds ``iou_thresh``. Ties break on lower class id, then
    input order, which also fixes the output order. Suppression is
    vectorized; the arithmetic matches ``iou`` exactly.
    """
    n = len(dets)
    if n <= 1:
        return list(dets)
    order = sorted(range(n), key=lambda i: (-dets[i].score, dets[i].class_id, i))
    boxes = np.array([dets[i].bbox for i in order], dtype=np.float64)
    classes = np.array([dets[i].class_id for i in order])
    x1, y1, x2, y2 = boxes.T
    areas = np.maximum(0.0, x2 - x1) * np.maximum(0.0, y2 - y1)
    alive = np.ones(n, dtype=bool)
    kept: list[int] = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in range(n):
            if not alive[i]:
                continue
            kept.append(order[i])
            mask = alive & (classes == classes[i])
            mask[: i + 1] = False
            idx = np.nonzero(mask)[0]
            if idx.size == 0:
                continue
            iw = np.minimum(x2[idx], x2[i]) - np.maximum(x1[idx], x1[i])
            ih = np.minimum(y2[idx], y2[i]) - np.maximum(y1[idx], y1[i])
            inter = np.maximum(0.0, iw) * np.maximum(0.0, ih)
            union = areas[idx] + areas[i] - inter
            overlap = np.where((inter > 0) & (union > 0), inter / union, 0.0)
            alive[idx[overlap > iou_thresh]] = False
    return [dets[i] for i in kept]


def _class_ap(
    preds: list[tuple[float, object, Box]],
    gts_by_image: dict[object, list[Box]],
    total_gt: int,
    thresh: float,
) -> float:
    """101-point interpolated AP for one class at one IoU threshold.

    ``preds`` are (score, image_id, bbox), already sorted by descending
    score. Greedy matching: each prediction takes the unmatched GT of the
    same image with the highest IoU >= thresh.
    """
    matched: dict[object, list[bool]] = {k: [False] * len(v) for k, v in gts_by_image.items()}
    tp = np.zeros(len(preds))
    for i, (_, img, box) in enumerate(preds):
        gts = gts_by_image.get(img, [])
        best_iou = 0.0
        best_j = -1
        for j, gbox in enumerate(gts):
            if matched[img][j]:
                continue
            v = iou(box, gbox)
            if v >= thresh and v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            matched[img][best_j] = True
            tp[i] = 1.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / total_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def evaluate_map(
    preds_by_image: dict[object, list[Detection]],
    gts_by_image: dict[object, list[GroundTruthBox]],
) -> EvalResult:
    """COCO-style evaluation: AP per class at IoU 0.50:0.05:0.95.

    Classes absent from both predictions and ground truth do not exist;
    classes with predictions but no ground truth anywhere score 0. The
    result averages over the participating classes.
    """
    classes = set()
    for dets in preds_by_image.values():
        classes.update(d.class_id for d in dets)
    for gts in gts_by_image.values():
        classes.update(g.class_id for g in gts)

    per_class: dict[int, dict[str, float]] = {}
    ap50_values = []
    ap_values = []
    for cls in sorted(classes):
        cls_gts: dict[object, list[Box]] = {}
        total_gt = 0
        for img in sorted(gts_by_image, key=str):
            boxes = [g.bbox for g in gts_by_image[img] if g.class_id == cls]
            if boxes:
                cls_gts[img] = boxes
                total_gt += len(boxes)
        cls_preds: list[tuple[float, object, Box]] = []
        for img in sorted(preds_by_image, key=str):
            cls_preds.extend(
                (d.score, img, d.bbox) for d in preds_by_image[img] if d.class_id == cls
            )
        cls_preds.sort(key=lambda t: -t[0])
        if total_gt == 0:
            if not cls_preds:
                continue  # class absent from the dataset entirely
            aps = [0.0] * len(IOU_THRESHOLDS)
        else:
            aps = [_class_ap(cls_preds, cls_gts, total_gt, t) for t in IOU_THRESHOLDS]
        ap50 = aps[0]
        ap = float(np.mean(aps))
        per_class[cls] = {"ap50": ap50, "ap": ap}
        ap50_values.append(ap50)
        ap_values.append(ap)

    if not ap_values:
        return EvalResult(0.0, 0.0, {})
    return EvalResult(float(np.mean(ap50_values)), float(np.mean(ap_values)), per_class)


def _iter_box_records(path: str, fields: tuple[str, ...]):
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}:{ln}: bad JSON: {e.msg}") from None
            missing = [k for k in fields if k not in rec]
            if missing:
                raise ConfigError(f"{path}:{ln}: missing fields {missing}")
            yield rec


def read_predictions_jsonl(path: str) -> dict[object, list[Detection]]:
    """Load {image_id, class_id, bbox, score} JSON lines grouped by image."""
    out: dict[object, list[Detection]] = {}
    for rec in _iter_box_records(path, ("image_id", "class_id", "bbox", "score")):
        det = Detection(tuple(rec["bbox"]), int(rec["class_id"]), float(rec["score"]))
        out.setdefault(rec["image_id"], []).append(det)
    return out


def read_ground_truth_jsonl(path: str) -> dict[object, list[GroundTruthBox]]:
    """Load {image_id, class_id, bbox} JSON lines grouped by image."""
    out: dict[object, list[GroundTruthBox]] = {}
    for rec in _iter_box_records(path, ("image_id", "class_id", "bbox")):
        gt = GroundTruthBox(tuple(rec["bbox"]), int(rec["class_id"]), rec["image_id"])
        out.setdefault(rec["image_id"], []).append(gt)
    return out
