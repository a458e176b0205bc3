"""Proposal and detection metrics: recall at a proposal budget, AR@AN, the
AR-vs-AN AUC, and class-agnostic average precision."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ConfigError

__all__ = [
    "MetricConfig",
    "tiou",
    "recall_at",
    "ar_at_an",
    "ar_curve",
    "auc",
    "average_precision",
    "mean_ap",
    "evaluate_all",
]


def _grid(lo: float, hi: float, step: float) -> list[float]:
    n = int(round((hi - lo) / step)) + 1
    return [round(lo + k * step, 10) for k in range(n)]


@dataclass
class MetricConfig:
    tiou_grid_proposals: list[float] = field(default_factory=lambda: _grid(0.5, 0.95, 0.05))
    tiou_grid_map: list[float] = field(default_factory=lambda: [0.5, 0.75, 0.95])
    map_average_grid: list[float] = field(default_factory=lambda: _grid(0.5, 0.95, 0.05))
    an_max: int = 100

    @classmethod
    def activitynet(cls) -> "MetricConfig":
        return cls()

    @classmethod
    def thumos(cls) -> "MetricConfig":
        grid = [0.3, 0.4, 0.5, 0.6, 0.7]
        return cls(_grid(0.5, 1.0, 0.05), grid, grid, 100)

    def validate(self) -> "MetricConfig":
        for grid in (self.tiou_grid_proposals, self.tiou_grid_map, self.map_average_grid):
            if not grid or any(not 0 < t <= 1 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
                raise ConfigError(f"tIoU grid must be strictly increasing in (0, 1]: {grid}")
        if self.an_max < 2:
            raise ConfigError("an_max must be >= 2")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "MetricConfig":
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def tiou(seg: np.ndarray, others: np.ndarray) -> np.ndarray:
    """tIoU between one segment and each row of ``others``."""
    others = np.asarray(others, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(np.minimum(seg[1], others[:, 1]) - np.maximum(seg[0], others[:, 0]), 0.0, None)
    union = (seg[1] - seg[0]) + (others[:, 1] - others[:, 0]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _as_props(p) -> np.ndarray:
    if isinstance(p, np.ndarray):
        return p.reshape(-1, 3)
    return np.array([(q.start, q.end, q.score) if hasattr(q, "score") else tuple(q) for q in p],
                    dtype=np.float64).reshape(-1, 3)


def _sorted_props(p) -> np.ndarray:
    arr = _as_props(p)
    return arr[np.argsort(-arr[:, 2], kind="stable")]


def _overlaps(props: dict, gts: dict) -> dict:
    """Per video: matrix of tIoU, rows = proposals by descending score, cols = gts."""
    out = {}
    for vid, gt in gts.items():
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
        pr = _sorted_props(props.get(vid, np.empty((0, 3))))
        m = np.zeros((len(pr), len(gt)))
        for r in range(len(pr)):
            m[r] = tiou(pr[r, :2], gt)
        out[vid] = m
    return out


def _count_gts(gts: dict) -> int:
    n = sum(len(np.asarray(g).reshape(-1, 2)) for g in gts.values())
    if n == 0:
        raise ValueError("no ground-truth instances")
    return n


def recall_at(props: dict, gts: dict, threshold: float, an: int, _ov: dict | None = None) -> float:
    """Fraction of gt instances covered (tIoU >= threshold) by some top-``an`` proposal.

    Each gt counts at most once; totals are pooled over videos.
    """
    n_gt = _count_gts(gts)
    ov = _ov if _ov is not None else _overlaps(props, gts)
    hit = 0
    for m in ov.values():
        if m.shape[1] == 0 or m.shape[0] == 0:
            continue
        hit += int((m[:an] >= threshold).any(axis=0).sum())
    return hit / n_gt


def ar_at_an(props: dict, gts: dict, an: int, grid, _ov: dict | None = None) -> float:
    ov = _ov if _ov is not None else _overlaps(props, gts)
    return float(np.mean([recall_at(props, gts, t, an, ov) for t in grid]))


def ar_curve(props: dict, gts: dict, grid, an_max: int = 100) -> np.ndarray:
    """AR for AN = 1..an_max, computed from one overlap pass."""
    n_gt = _count_gts(gts)
    ov = _overlaps(props, gts)
    grid = np.asarray(grid, dtype=np.float64)
    hits = np.zeros((an_max, len(grid)))
    for m in ov.values():
        if m.size == 0:
            continue
        # first rank at which each gt is covered, per threshold
        covered = m[:, :, None] >= grid[None, None, :]
        first = np.where(covered.any(axis=0), covered.argmax(axis=0), np.iinfo(np.int64).max)
        for k, thr_first in enumerate(first.T):
            counts = np.bincount(np.minimum(thr_first, an_max), minlength=an_max + 1)[:an_max]
            hits[:, k] += np.cumsum(counts)
    return (hits / n_gt).mean(axis=1)


def auc(curve) -> float:
    """Trapezoidal area under AR over AN = 1..len(curve), normalized to percent."""
    curve = np.asarray(curve, dtype=np.float64)
    span = len(curve) - 1
    area = float(np.sum((curve[1:] + curve[:-1]) / 2.0))
    return area / span * 100.0


def average_precision(preds: dict, gts: dict, threshold: float) -> float:
    """Class-agnostic AP with greedy matching and all-point interpolation."""
    n_gt = _count_gts(gts)
    rows = []
    for vid, p in preds.items():
        for s, e, sc in _as_props(p):
            rows.append((sc, vid, s, e))
    if not rows:
        return 0.0
    scores = np.array([r[0] for r in rows])
    order = np.argsort(-scores, kind="stable")
    gt_arr = {v: np.asarray(g, dtype=np.float64).reshape(-1, 2) for v, g in gts.items()}
    used = {v: np.zeros(len(g), dtype=bool) for v, g in gt_arr.items()}
    tp = np.zeros(len(rows))
    for rank, idx in enumerate(order):
        _, vid, s, e = rows[idx]
        g = gt_arr.get(vid)
        if g is None or len(g) == 0:
            continue
        ov = tiou(np.array([s, e]), g)
        for k in np.argsort(-ov, kind="stable"):
            if ov[k] < threshold:
                break
            if not used[vid][k]:
                used[vid][k] = True
                tp[rank] = 1.0
                break
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def mean_ap(preds: dict, gts: dict, grid) -> dict[str, float]:
    per = {f"{t:.2f}": average_precision(preds, gts, t) for t in grid}
    per["average"] = float(np.mean(list(per.values())))
    return per


def evaluate_all(props: dict, gts: dict, cfg: MetricConfig) -> dict:
    curve = ar_curve(props, gts, cfg.tiou_grid_proposals, cfg.an_max)
    ar = {f"AR@{an}": float(curve[an - 1]) * 100.0 for an in (1, 5, 10, 50, 100) if an <= cfg.an_max}
    maps = mean_ap(props, gts, cfg.tiou_grid_map)
    avg = mean_ap(props, gts, cfg.map_average_grid)["average"]
    return {
        **ar,
        "AUC": auc(curve),
        "mAP": {k: v * 100.0 for k, v in maps.items() if k != "average"},
        "mAP_average": avg * 100.0,
        "curve": [float(x) for x in curve],
        "meta": {
            "auc_integration": "trapezoidal",
            "an_range": [1, cfg.an_max],
            "tiou_grid_proposals": list(cfg.tiou_grid_proposals),
            "n_videos": len(gts),
            "n_instances": _count_gts(gts),
        },
    }
