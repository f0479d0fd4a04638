"""Dense feature maps, mask-weighted RoI pooling, prototypes, cosine matching."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import BinaryMask, BoundingBox, SoftMask

__all__ = [
    "FeatureMap",
    "ClassPrototype",
    "SupportAnnotation",
    "map_box_to_grid",
    "masked_roi_pool",
    "l2_normalize",
    "cosine",
    "build_prototypes",
    "match_proposal",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Per-image dense features of shape (channels, grid_h, grid_w).

    ``image_w``/``image_h`` are the source pixel dimensions; they define the
    scale used to map pixel boxes onto grid cells.
    """

    data: np.ndarray
    image_w: int
    image_h: int

    def __post_init__(self) -> None:
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or min(d.shape) < 1:
            raise ValueError(f"feature map must be (C, h, w) with all dims >= 1, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("feature map contains non-finite values")
        if self.image_w < 1 or self.image_h < 1:
            raise ValueError(f"image dims must be >= 1, got {self.image_w}x{self.image_h}")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid_h(self) -> int:
        return self.data.shape[1]

    @property
    def grid_w(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class SupportAnnotation:
    """One labeled exemplar: an image id, a box, its class, and its mask."""

    image_id: str
    box: BoundingBox
    class_id: int
    mask: BinaryMask

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")


@dataclass(frozen=True, eq=False)
class ClassPrototype:
    """Unit-norm class representative built from pooled support features."""

    class_id: int
    vector: np.ndarray
    support_count: int


def map_box_to_grid(box: BoundingBox, fm: FeatureMap) -> tuple[int, int, int, int]:
    """Map a pixel box to an inclusive grid-cell range (gx1, gy1, gx2, gy2).

    Coordinates scale by grid/image; the min corner floors and the max corner
    ceils minus one, so every cell the box touches is kept.  The range is
    clamped to the grid and never empty.
    """
    bx1 = min(max(box.x1, 0.0), float(fm.image_w))
    bx2 = min(max(box.x2, 0.0), float(fm.image_w))
    by1 = min(max(box.y1, 0.0), float(fm.image_h))
    by2 = min(max(box.y2, 0.0), float(fm.image_h))
    sx = fm.grid_w / fm.image_w
    sy = fm.grid_h / fm.image_h
    gx1 = int(np.floor(bx1 * sx))
    gy1 = int(np.floor(by1 * sy))
    gx2 = int(np.ceil(bx2 * sx)) - 1
    gy2 = int(np.ceil(by2 * sy)) - 1
    gx1 = min(max(gx1, 0), fm.grid_w - 1)
    gy1 = min(max(gy1, 0), fm.grid_h - 1)
    gx2 = min(max(gx2, gx1), fm.grid_w - 1)
    gy2 = min(max(gy2, gy1), fm.grid_h - 1)
    return gx1, gy1, gx2, gy2


def masked_roi_pool(fm: FeatureMap, box: BoundingBox, sm: SoftMask) -> np.ndarray:
    """Weighted mean of feature columns over the box's grid range.

    Cell weights come from the soft mask and the sums run only over the
    mapped cell range, so the result describes the object region rather
    than the whole rectangle.  If the mask contributes zero weight there,
    pooling falls back to a plain mean over the range (with a warning).
    """
    if (sm.height, sm.width) != (fm.grid_h, fm.grid_w):
        raise ValueError(
            f"soft mask {sm.width}x{sm.height} does not match "
            f"feature grid {fm.grid_w}x{fm.grid_h}"
        )
    gx1, gy1, gx2, gy2 = map_box_to_grid(box, fm)
    w = sm.weights[gy1 : gy2 + 1, gx1 : gx2 + 1]
    total = float(w.sum())
    if total == 0.0:
        log.warning(
            "mask contributes zero weight inside grid box (%d,%d)-(%d,%d); "
            "falling back to unweighted mean",
            gx1, gy1, gx2, gy2,
        )
        w = np.ones_like(w)
        total = float(w.sum())
    block = fm.data[:, gy1 : gy2 + 1, gx1 : gx2 + 1]
    return (block * w).sum(axis=(1, 2)) / total


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale to unit Euclidean length; rejects the zero vector."""
    arr = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return arr / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; both vectors must be nonzero."""
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for a zero vector")
    return float(np.dot(va, vb) / (na * nb))


def build_prototypes(features_by_class: Iterable[tuple[int, np.ndarray]]) -> list[ClassPrototype]:
    """Mean each class's support features, then normalize to unit length.

    Input is (class_id, feature) pairs; output is ordered by class_id.
    """
    groups: dict[int, list[np.ndarray]] = {}
    for class_id, feat in features_by_class:
        groups.setdefault(int(class_id), []).append(np.asarray(feat, dtype=np.float64))
    protos = []
    for class_id in sorted(groups):
        feats = groups[class_id]
        mean = np.mean(np.stack(feats, axis=0), axis=0)
        protos.append(
            ClassPrototype(class_id=class_id, vector=l2_normalize(mean), support_count=len(feats))
        )
    return protos


def match_proposal(
    fq: np.ndarray, prototypes: Sequence[ClassPrototype]
) -> tuple[int, float]:
    """Best class by cosine similarity; ties break toward the lowest class_id."""
    if not prototypes:
        raise ValueError("cannot match against an empty prototype list")
    best_id = -1
    best_sim = -np.inf
    for proto in sorted(prototypes, key=lambda p: p.class_id):
        sim = cosine(fq, proto.vector)
        if sim > best_sim:
            best_sim = sim
            best_id = proto.class_id
    return best_id, float(best_sim)
