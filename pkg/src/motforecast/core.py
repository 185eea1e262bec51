"""Box algebra, distances and the per-frame data model shared by every module.

Boxes are centroid-form ``(x, y, w, h)`` in pixels everywhere inside the
package; top-left form only appears at the MOTChallenge file boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

EPS_SIZE = 1e-3


class BoundingBox(NamedTuple):
    x: float
    y: float
    w: float
    h: float

    @property
    def valid(self) -> bool:
        return self.w > 0 and self.h > 0

    def to_tlwh(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2.0, self.y - self.h / 2.0, self.w, self.h)

    @classmethod
    def from_tlwh(cls, left: float, top: float, w: float, h: float) -> "BoundingBox":
        return cls(left + w / 2.0, top + h / 2.0, w, h)

    def shifted(self, vel: Sequence[float]) -> "BoundingBox":
        return BoundingBox(self.x + vel[0], self.y + vel[1], self.w + vel[2], self.h + vel[3])


ZERO_BOX = BoundingBox(0.0, 0.0, 0.0, 0.0)


class Velocity(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


ZERO_VELOCITY = Velocity(0.0, 0.0, 0.0, 0.0)


class BoxWithVelocity(NamedTuple):
    box: BoundingBox
    vel: Velocity

    def as_array(self) -> np.ndarray:
        return np.array([*self.box, *self.vel], dtype=np.float64)


@dataclass
class FrameObservations:
    """Detector output for one frame.

    ``embeddings`` are L2-normalized on construction; ``context`` is an optional
    frame-level feature vector consumed by the learned forecaster.
    """

    frame_index: int
    detections: list[BoundingBox] = field(default_factory=list)
    confidences: list[float] = field(default_factory=list)
    embeddings: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    context: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be >= 0, got {self.frame_index}")
        self.detections = [BoundingBox(*map(float, b)) for b in self.detections]
        self.confidences = [float(c) for c in self.confidences]
        n = len(self.detections)
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.size == 0:
            emb = emb.reshape(n, emb.shape[1] if emb.ndim == 2 else 0)
        if len(self.confidences) != n or emb.shape[0] != n:
            raise ValueError(
                f"frame {self.frame_index}: {n} detections, {len(self.confidences)} "
                f"confidences, {emb.shape[0]} embeddings"
            )
        if emb.shape[1] > 0:
            emb = normalize_rows(emb)
        self.embeddings = emb
        if self.context is not None:
            self.context = np.asarray(self.context, dtype=np.float64).ravel()

    def __len__(self) -> int:
        return len(self.detections)


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero embedding")
    return vectors / norms


def boxes_to_array(boxes: Sequence[Sequence[float]]) -> np.ndarray:
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two centroid-form boxes.

    Degenerate boxes (non-positive width or height) have IOU 0 with everything,
    so zero-padding sentinels never match.
    """
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    iw = min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2)
    ih = min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # roundoff can push identical boxes a hair above 1
    return min(inter / (aw * ah + bw * bh - inter), 1.0)


def iou_matrix(boxes_a: Sequence, boxes_b: Sequence) -> np.ndarray:
    a = boxes_to_array(boxes_a)
    b = boxes_to_array(boxes_b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    a_lo, a_hi = a[:, None, :2] - a[:, None, 2:] / 2, a[:, None, :2] + a[:, None, 2:] / 2
    b_lo, b_hi = b[None, :, :2] - b[None, :, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (a[:, None, 2] > 0) & (a[:, None, 3] > 0) & (b[None, :, 2] > 0) & (b[None, :, 3] > 0)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=valid & (union > 0))
    return np.minimum(out, 1.0, out=out)


def iou_distance(track_boxes: Sequence, det_boxes: Sequence) -> np.ndarray:
    return 1.0 - iou_matrix(track_boxes, det_boxes)


def cosine_distance(track_embs, det_embs) -> np.ndarray:
    a = np.asarray(track_embs, dtype=np.float64)
    b = np.asarray(det_embs, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0] if a.ndim == 2 else 0, b.shape[0] if b.ndim == 2 else 0))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"embedding dimension mismatch: {a.shape} vs {b.shape}")
    sim = normalize_rows(a) @ normalize_rows(b).T
    return np.clip(1.0 - sim, 0.0, 2.0)


def velocities_from_boxes(boxes: Sequence[Sequence[float]]) -> list[Velocity]:
    if len(boxes) == 0:
        return []
    arr = boxes_to_array(boxes)
    diffs = np.vstack([np.zeros((1, 4)), np.diff(arr, axis=0)])
    return [Velocity(*map(float, d)) for d in diffs]


def center_distance_normalized(box: Sequence[float], frame_w: float, frame_h: float) -> float:
    """Centroid distance to the frame center in units of half the frame diagonal, clamped to [0, 1]."""
    if frame_w <= 0 or frame_h <= 0:
        raise ValueError("frame dimensions must be positive")
    d = math.hypot(box[0] - frame_w / 2.0, box[1] - frame_h / 2.0)
    return min(1.0, d / (0.5 * math.hypot(frame_w, frame_h)))


def floor_size(boxes: np.ndarray, eps: float = EPS_SIZE) -> np.ndarray:
    boxes = np.array(boxes, dtype=np.float64)
    boxes[..., 2:4] = np.maximum(boxes[..., 2:4], eps)
    return boxes
