"""Detection quality metrics and the metamorphic-relation verdict.

Matching is greedy by descending confidence at a footprint-IoU threshold
(0.5 by default).  Average precision is the 11-point interpolated form:
the mean over recall levels {0, 0.1, ..., 1} of the maximum precision at
any recall at or above the level.  Misleading cooperation errors are
ground-truth boxes the ego-only pipeline detects but the cooperative
pipeline misses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from .errors import SceneValidationError
from .geometry import bev_iou
from .perception import DetectionResult, DetectorConfig, get_pred
from .scene import Box3D, Scene

MATCH_IOU_THRESHOLD = 0.5
RECALL_LEVELS = tuple(i / 10.0 for i in range(11))

# Ground-truth distance buckets (meters from the ego origin, xy plane).
SHORT_RANGE = (0.0, 30.0)
MIDDLE_RANGE = (30.0, 50.0)
LONG_RANGE = (50.0, 100.0)
OVERALL_RANGE = (0.0, 100.0)

Boxes = Sequence[Box3D]


def _boxes_of(result: Union[DetectionResult, Boxes]) -> tuple[Box3D, ...]:
    if isinstance(result, DetectionResult):
        return result.boxes
    return tuple(result)


def _prediction_order(predictions: Boxes) -> list[int]:
    return sorted(range(len(predictions)), key=lambda i: (-predictions[i].confidence, i))


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int, float], ...]  # (prediction idx, gt idx, iou)
    unmatched_predictions: tuple[int, ...]
    unmatched_gt: tuple[int, ...]


def match(
    predictions: Boxes, gts: Boxes, iou_thr: float = MATCH_IOU_THRESHOLD
) -> Matching:
    """Greedy one-to-one matching in descending confidence order.

    Each prediction takes the still-unmatched ground truth with the
    highest IoU at or above the threshold; IoU ties break on the lower
    ground-truth index.
    """
    taken = [False] * len(gts)
    pairs = []
    unmatched_pred = []
    for p_idx in _prediction_order(predictions):
        best_gt = -1
        best_iou = 0.0
        for g_idx, gt in enumerate(gts):
            if taken[g_idx]:
                continue
            iou = bev_iou(predictions[p_idx], gt)
            if iou >= iou_thr and iou > best_iou:
                best_gt = g_idx
                best_iou = iou
        if best_gt >= 0:
            taken[best_gt] = True
            pairs.append((p_idx, best_gt, best_iou))
        else:
            unmatched_pred.append(p_idx)
    unmatched_gt = tuple(i for i, used in enumerate(taken) if not used)
    return Matching(tuple(pairs), tuple(unmatched_pred), unmatched_gt)


def average_precision(
    predictions: Boxes, gts: Boxes, iou_thr: float = MATCH_IOU_THRESHOLD
) -> float:
    """11-point interpolated average precision in [0, 1].

    Defined as 1.0 when there is nothing to detect and nothing predicted,
    and 0.0 when predictions exist but no ground truth does.
    """
    if not gts:
        return 1.0 if not predictions else 0.0
    if not predictions:
        return 0.0
    matching = match(predictions, gts, iou_thr)
    matched_preds = {p for p, _, _ in matching.pairs}
    tp = 0
    sweep = []  # (recall, precision) after each prediction, best-first
    for rank, p_idx in enumerate(_prediction_order(predictions), start=1):
        if p_idx in matched_preds:
            tp += 1
        sweep.append((tp / len(gts), tp / rank))
    total = 0.0
    for level in RECALL_LEVELS:
        total += max((prec for rec, prec in sweep if rec >= level), default=0.0)
    return total / len(RECALL_LEVELS)


# ---------------------------------------------------------------------------
# range-bucketed AP


@dataclass(frozen=True)
class BucketScore:
    ap: float
    gt_count: int
    prediction_count: int
    empty: bool  # true when neither ground truth nor predictions fell here

    def to_json_obj(self) -> dict:
        return {
            "ap": self.ap,
            "gt_count": self.gt_count,
            "prediction_count": self.prediction_count,
            "empty": self.empty,
        }


@dataclass(frozen=True)
class RangeBuckets:
    short: BucketScore
    middle: BucketScore
    long: BucketScore
    overall: BucketScore

    def to_json_obj(self) -> dict:
        return {
            "short": self.short.to_json_obj(),
            "middle": self.middle.to_json_obj(),
            "long": self.long.to_json_obj(),
            "overall": self.overall.to_json_obj(),
        }


def _bucket_of(distance: float) -> Optional[str]:
    if SHORT_RANGE[0] <= distance < SHORT_RANGE[1]:
        return "short"
    if MIDDLE_RANGE[0] <= distance < MIDDLE_RANGE[1]:
        return "middle"
    if LONG_RANGE[0] <= distance < LONG_RANGE[1]:
        return "long"
    return None  # beyond the evaluated range, excluded everywhere


def _xy_distance(box: Box3D, origin: tuple[float, float]) -> float:
    return math.hypot(box.center[0] - origin[0], box.center[1] - origin[1])


def ap_by_range(
    predictions: Union[DetectionResult, Boxes],
    gts: Boxes,
    ego_origin: tuple[float, float] = (0.0, 0.0),
    iou_thr: float = MATCH_IOU_THRESHOLD,
) -> RangeBuckets:
    """AP per ground-truth distance bucket plus the overall 0-100 m band.

    Ground truth is partitioned by its distance to the ego origin.
    Matched predictions follow their ground truth's bucket; unmatched
    predictions fall into the bucket of their own center.  Anything
    beyond 100 m is excluded from every bucket, including overall.
    """
    preds = _boxes_of(predictions)
    eligible_gt = [
        (i, g) for i, g in enumerate(gts) if _bucket_of(_xy_distance(g, ego_origin))
    ]
    gt_boxes = [g for _, g in eligible_gt]
    matching = match(preds, gt_boxes, iou_thr)
    pred_bucket: dict[int, Optional[str]] = {}
    for p_idx, g_idx, _ in matching.pairs:
        pred_bucket[p_idx] = _bucket_of(_xy_distance(gt_boxes[g_idx], ego_origin))
    for p_idx in matching.unmatched_predictions:
        pred_bucket[p_idx] = _bucket_of(_xy_distance(preds[p_idx], ego_origin))

    def score(bucket_names: tuple[str, ...]) -> BucketScore:
        bucket_gts = [
            g
            for _, g in eligible_gt
            if _bucket_of(_xy_distance(g, ego_origin)) in bucket_names
        ]
        bucket_preds = [
            preds[i] for i in range(len(preds)) if pred_bucket.get(i) in bucket_names
        ]
        return BucketScore(
            ap=average_precision(bucket_preds, bucket_gts, iou_thr),
            gt_count=len(bucket_gts),
            prediction_count=len(bucket_preds),
            empty=not bucket_gts and not bucket_preds,
        )

    return RangeBuckets(
        short=score(("short",)),
        middle=score(("middle",)),
        long=score(("long",)),
        overall=score(("short", "middle", "long")),
    )


# ---------------------------------------------------------------------------
# misleading cooperation errors


def count_mce(
    ego_result: Union[DetectionResult, Boxes],
    cp_result: Union[DetectionResult, Boxes],
    gts: Boxes,
    iou_thr: float = MATCH_IOU_THRESHOLD,
    score_floor: float = 0.0,
) -> tuple[int, tuple[int, ...]]:
    """Ground-truth boxes detected by the ego pipeline but missed by the
    cooperative one: (count, offending ground-truth indices)."""
    ego_boxes = [b for b in _boxes_of(ego_result) if b.confidence >= score_floor]
    cp_boxes = [b for b in _boxes_of(cp_result) if b.confidence >= score_floor]

    def detected(boxes: list[Box3D], gt: Box3D) -> bool:
        return bool(match(boxes, [gt], iou_thr).pairs)

    offending = tuple(
        i
        for i, gt in enumerate(gts)
        if detected(ego_boxes, gt) and not detected(cp_boxes, gt)
    )
    return len(offending), offending


# ---------------------------------------------------------------------------
# metamorphic relation


@dataclass(frozen=True)
class MrVerdict:
    ap_original: float
    ap_transformed: float
    epsilon: float
    violated: bool
    mce_count: int

    def to_json_obj(self) -> dict:
        return {
            "ap_original": self.ap_original,
            "ap_transformed": self.ap_transformed,
            "epsilon": self.epsilon,
            "violated": self.violated,
            "mce_count": self.mce_count,
        }


def check_mr(
    detector: DetectorConfig,
    seed_scene: Scene,
    transformed_scene: Scene,
    epsilon: float = 0.1,
) -> MrVerdict:
    """Cooperative-output consistency between a seed scene and its
    transform: violated when AP drops by more than epsilon.

    Both scenes must carry identical ground truth; a mismatch means the
    transformation broke oracle preservation and is a hard error.
    """
    if seed_scene.ground_truth != transformed_scene.ground_truth:
        raise SceneValidationError(
            f"ground truth mismatch between {seed_scene.scene_id} "
            f"and {transformed_scene.scene_id}"
        )
    gts = seed_scene.ground_truth
    _, cp_seed = get_pred(detector, seed_scene)
    ego_trans, cp_trans = get_pred(detector, transformed_scene)
    ap_original = average_precision(cp_seed.boxes, gts)
    ap_transformed = average_precision(cp_trans.boxes, gts)
    mce, _ = count_mce(ego_trans, cp_trans, gts)
    return MrVerdict(
        ap_original=ap_original,
        ap_transformed=ap_transformed,
        epsilon=epsilon,
        violated=ap_original - ap_transformed > epsilon,
        mce_count=mce,
    )
