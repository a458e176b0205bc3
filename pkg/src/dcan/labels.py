"""Ground-truth targets: binary start/end labels from intersection-over-region,
and the IoU / foreground matching maps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import valid_mask

logger = logging.getLogger(__name__)

__all__ = [
    "VideoAnnotation",
    "GroundTruth",
    "iou",
    "boundary_labels",
    "matching_labels",
    "ground_truth",
    "stack_ground_truth",
]


@dataclass
class VideoAnnotation:
    """Normalized instances ``(t_s, t_e)`` with ``0 <= t_s < t_e <= 1``."""

    instances: list[tuple[float, float]] = field(default_factory=list)
    duration_seconds: float = 1.0

    def __post_init__(self):
        self.instances = [(float(s), float(e)) for s, e in self.instances]
        for s, e in self.instances:
            if not (0.0 <= s < e <= 1.0):
                raise ValueError(f"instance ({s}, {e}) is not a valid normalized interval")

    @classmethod
    def from_seconds(cls, segments, duration: float) -> "VideoAnnotation":
        inst = []
        for s, e in segments:
            s, e = max(0.0, s / duration), min(1.0, e / duration)
            if e > s:
                inst.append((s, e))
        return cls(inst, duration)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.instances, dtype=np.float64).reshape(-1, 2)


@dataclass
class GroundTruth:
    g_start: np.ndarray  # (T,)
    g_end: np.ndarray  # (T,)
    g_iou: np.ndarray  # (D, T)
    g_cls: np.ndarray  # (D, T)
    valid_mask: np.ndarray  # (D, T) bool


def iou(a, b) -> float:
    la, lb = a[1] - a[0], b[1] - b[0]
    if la <= 0 or lb <= 0:
        logger.warning("degenerate interval in iou(%s, %s)", a, b)
        return 0.0
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    return inter / (la + lb - inter)


def _ior(anchor_lo, anchor_hi, region_lo, region_hi):
    inter = np.clip(np.minimum(anchor_hi, region_hi) - np.maximum(anchor_lo, region_lo), 0.0, None)
    return inter / (anchor_hi - anchor_lo)


def boundary_labels(ann: VideoAnnotation, T: int, region_scale: float = 0.1, threshold: float = 0.5):
    """Binary start/end labels on the ``j / T`` grid.

    Each boundary owns a region of width ``max(3/T, region_scale * duration)``
    centred on it; position ``j`` is positive when its anchor
    ``[j/T - 1/2T, j/T + 1/2T]`` lies more than ``threshold`` inside a region.
    """
    if T < 2:
        raise ValueError("T must be >= 2")
    delta = 1.0 / T
    centers = np.arange(T) * delta
    lo, hi = centers - delta / 2, centers + delta / 2
    inst = ann.as_array()
    if len(inst) == 0:
        return np.zeros(T), np.zeros(T)
    width = np.maximum(3 * delta, region_scale * (inst[:, 1] - inst[:, 0]))
    labels = []
    for col in (0, 1):
        r_lo = (inst[:, col] - width / 2)[:, None]
        r_hi = (inst[:, col] + width / 2)[:, None]
        score = _ior(lo[None, :], hi[None, :], r_lo, r_hi).max(axis=0)
        labels.append((score > threshold).astype(np.float64))
    return labels[0], labels[1]


def matching_labels(ann: VideoAnnotation, T: int, D: int, threshold: float = 0.9):
    """IoU map over cells ``[j/T, (j+i+1)/T]``, its binarization, and the validity mask."""
    if D > T:
        raise ValueError(f"D={D} exceeds T={T}")
    mask = valid_mask(D, T)
    i = np.arange(D)[:, None]
    j = np.arange(T)[None, :]
    start = j / T
    end = (j + i + 1) / T
    g_iou = np.zeros((D, T))
    for s, e in ann.instances:
        inter = np.clip(np.minimum(end, e) - np.maximum(start, s), 0.0, None)
        union = (end - start) + (e - s) - inter
        g_iou = np.maximum(g_iou, inter / union)
    g_iou = np.where(mask, g_iou, 0.0)
    g_cls = ((g_iou > threshold) & mask).astype(np.float64)
    return g_iou, g_cls, mask


def ground_truth(ann: VideoAnnotation, T: int, D: int, region_scale: float = 0.1, cls_threshold: float = 0.9) -> GroundTruth:
    g_start, g_end = boundary_labels(ann, T, region_scale)
    g_iou, g_cls, mask = matching_labels(ann, T, D, cls_threshold)
    return GroundTruth(g_start, g_end, g_iou, g_cls, mask)


def stack_ground_truth(items: list[GroundTruth]) -> GroundTruth:
    return GroundTruth(
        np.stack([g.g_start for g in items]),
        np.stack([g.g_end for g in items]),
        np.stack([g.g_iou for g in items]),
        np.stack([g.g_cls for g in items]),
        np.stack([g.valid_mask for g in items]),
    )
