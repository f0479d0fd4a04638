"""COCO-convention average precision over novel classes.

AP per (class, IoU threshold) uses greedy highest-IoU matching and 101-point
interpolated precision/recall; the headline number averages the thresholds
0.50:0.05:0.95 over every class that has at least one ground-truth box.
All tie-breaks are by input position, so reports are bit-identical across
runs for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .geometry import BoundingBox, box_iou
from .postproc import ScoredDetection, topk_by_score

__all__ = [
    "IOU_THRESHOLDS",
    "GroundTruthBox",
    "EvalReport",
    "match_detections",
    "ap_101",
    "evaluate",
]

IOU_THRESHOLDS = (0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95)
RECALL_GRID = tuple(i / 100 for i in range(101))


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    box: BoundingBox
    class_id: int


@dataclass(frozen=True)
class EvalReport:
    """nAP metrics plus the per-class AP values they average."""

    nap: float
    nap50: float
    nap75: float
    per_class_ap: dict[int, tuple[float, ...]]  # class_id -> AP per IoU threshold
    det_count: int
    gt_count: int

    def to_text(self) -> str:
        lines = [
            f"nAP={self.nap!r}",
            f"nAP50={self.nap50!r}",
            f"nAP75={self.nap75!r}",
            f"det_count={self.det_count}",
            f"gt_count={self.gt_count}",
        ]
        for class_id in sorted(self.per_class_ap):
            aps = ",".join(repr(a) for a in self.per_class_ap[class_id])
            lines.append(f"class_{class_id}_ap={aps}")
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "nAP": self.nap,
            "nAP50": self.nap50,
            "nAP75": self.nap75,
            "det_count": self.det_count,
            "gt_count": self.gt_count,
            "per_class_ap": {
                str(c): list(self.per_class_ap[c]) for c in sorted(self.per_class_ap)
            },
        }


def match_detections(
    dets: Sequence[tuple[str, ScoredDetection]],
    gts: Sequence[GroundTruthBox],
    iou_thr: float,
) -> list[bool]:
    """True-positive flag per detection under greedy matching.

    ``dets`` are (image_id, detection) pairs already sorted by descending
    score (ties by input position).  Within each image and class, a detection
    claims the still-unmatched ground truth of highest IoU when that IoU
    reaches the threshold; every ground truth matches at most once.
    """
    gt_by_key: dict[tuple[str, int], list[int]] = {}
    for g_idx, g in enumerate(gts):
        gt_by_key.setdefault((g.image_id, g.class_id), []).append(g_idx)
    matched: set[int] = set()
    flags = []
    for image_id, det in dets:
        candidates = gt_by_key.get((image_id, det.class_id), ())
        best_idx = -1
        best_iou = 0.0
        for g_idx in candidates:
            if g_idx in matched:
                continue
            iou = box_iou(det.box, gts[g_idx].box)
            if iou > best_iou:  # strict ">" keeps the lowest gt index on ties
                best_iou = iou
                best_idx = g_idx
        if best_idx >= 0 and best_iou >= iou_thr:
            matched.add(best_idx)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def ap_101(tp_flags: Sequence[bool], total_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP/FP flags."""
    if total_gt < 0:
        raise ValueError(f"total_gt must be >= 0, got {total_gt}")
    if total_gt == 0:
        return 0.0
    recalls = []
    precisions = []
    tp = 0
    for rank, flag in enumerate(tp_flags, start=1):
        if flag:
            tp += 1
        recalls.append(tp / total_gt)
        precisions.append(tp / rank)
    # precision envelope: running max from the right
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    interpolated = []
    j = 0
    for r in RECALL_GRID:
        while j < len(recalls) and recalls[j] < r:
            j += 1
        interpolated.append(precisions[j] if j < len(recalls) else 0.0)
    return sum(interpolated) / len(RECALL_GRID)


def evaluate(
    detections: Mapping[str, Sequence[ScoredDetection]],
    gts: Sequence[GroundTruthBox],
    max_dets: int = 100,
) -> EvalReport:
    """Score a detection run: nAP, nAP50, nAP75 and per-class AP curves.

    Detections are truncated to the ``max_dets`` best per image before
    scoring.  Classes without any ground truth are excluded from the averages
    (their detections simply count as false positives of an unscored class).
    """
    if max_dets < 1:
        raise ValueError(f"max_dets must be >= 1, got {max_dets}")
    flat: list[tuple[str, ScoredDetection]] = []
    for image_id in sorted(detections):
        for det in topk_by_score(list(detections[image_id]), max_dets):
            flat.append((image_id, det))

    gt_counts: dict[int, int] = {}
    for g in gts:
        gt_counts[g.class_id] = gt_counts.get(g.class_id, 0) + 1

    per_class_ap: dict[int, tuple[float, ...]] = {}
    for class_id in sorted(gt_counts):
        class_dets = [
            (image_id, det) for image_id, det in flat if det.class_id == class_id
        ]
        class_dets.sort(key=lambda pair: -pair[1].score)  # stable: ties keep position
        aps = []
        for thr in IOU_THRESHOLDS:
            flags = match_detections(class_dets, gts, thr)
            aps.append(ap_101(flags, gt_counts[class_id]))
        per_class_ap[class_id] = tuple(aps)

    all_aps = [ap for aps in per_class_ap.values() for ap in aps]
    nap = sum(all_aps) / len(all_aps) if all_aps else 0.0
    ap50 = [aps[IOU_THRESHOLDS.index(0.50)] for aps in per_class_ap.values()]
    ap75 = [aps[IOU_THRESHOLDS.index(0.75)] for aps in per_class_ap.values()]
    nap50 = sum(ap50) / len(ap50) if ap50 else 0.0
    nap75 = sum(ap75) / len(ap75) if ap75 else 0.0
    return EvalReport(
        nap=nap,
        nap50=nap50,
        nap75=nap75,
        per_class_ap=per_class_ap,
        det_count=len(flat),
        gt_count=len(gts),
    )
