"""Proposal generation: score fusion, half-max boundary filtering, Soft-NMS."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .model import ConfigError, ScoreMaps

__all__ = [
    "Proposal",
    "FusionConfig",
    "fuse_scores",
    "filter_boundaries",
    "soft_nms",
    "proposals_from_maps",
    "to_array",
]


@dataclass(frozen=True)
class Proposal:
    start: float
    end: float
    score: float

    def __post_init__(self):
        if not (0.0 <= self.start < self.end <= 1.0 + 1e-12):
            raise ValueError(f"invalid proposal interval [{self.start}, {self.end}]")


@dataclass
class FusionConfig:
    gamma: float = 0.8
    snms_threshold: float = 0.5
    snms_sigma: float = 0.4
    snms_mode: str = "gaussian"
    n_final: int = 100

    def validate(self) -> "FusionConfig":
        if self.gamma <= 0 or not 0 < self.snms_threshold < 1:
            raise ConfigError("need gamma > 0 and 0 < snms_threshold < 1")
        if self.snms_mode not in ("gaussian", "linear"):
            raise ConfigError(f"unknown snms_mode {self.snms_mode!r}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def to_array(props) -> np.ndarray:
    if isinstance(props, np.ndarray):
        return props.reshape(-1, 3)
    return np.array([(p.start, p.end, p.score) for p in props], dtype=np.float64).reshape(-1, 3)


def _grid_cells(maps: ScoreMaps):
    i, j = np.nonzero(maps.valid_mask)
    T = len(maps.p_start)
    ts = j
    te = j + i + 1
    return i, j, ts, te, np.minimum(te, T - 1)


def fuse_scores(maps: ScoreMaps, cfg: FusionConfig) -> list[Proposal]:
    """One proposal per valid cell: P_start[t_s] * P_end[t_e] * (M_cls * M_reg)^gamma."""
    T = len(maps.p_start)
    i, j, ts, te, te_idx = _grid_cells(maps)
    score = maps.p_start[ts] * maps.p_end[te_idx] * (maps.m_cls[i, j] * maps.m_reg[i, j]) ** cfg.gamma
    return [Proposal(s / T, e / T, float(p)) for s, e, p in zip(ts.tolist(), te.tolist(), score)]


def filter_boundaries(props, p_start: np.ndarray, p_end: np.ndarray) -> list[Proposal]:
    """Keep proposals whose start and end probabilities reach half the respective maximum."""
    T = len(p_start)
    floor_s = 0.5 * np.max(p_start)
    floor_e = 0.5 * np.max(p_end)
    kept = []
    for p in props:
        ts = int(round(p.start * T))
        te = min(int(round(p.end * T)), T - 1)
        if p_start[ts] >= floor_s and p_end[te] >= floor_e:
            kept.append(p)
    return kept


def _pairwise_iou(seg: np.ndarray, others: np.ndarray) -> np.ndarray:
    inter = np.clip(np.minimum(seg[1], others[:, 1]) - np.maximum(seg[0], others[:, 0]), 0.0, None)
    union = (seg[1] - seg[0]) + (others[:, 1] - others[:, 0]) - inter
    return inter / union


def soft_nms(props, cfg: FusionConfig) -> list[Proposal]:
    """Greedy Soft-NMS; overlaps above ``snms_threshold`` are decayed, never removed.

    Selected scores are non-increasing in selection order, so stopping after
    ``n_final`` selections gives the same result as draining the pool.
    """
    arr = to_array(props)
    if len(arr) == 0:
        return []
    seg = arr[:, :2].copy()
    score = arr[:, 2].copy()
    alive = np.ones(len(arr), dtype=bool)
    # deterministic tie-break: higher score, then earlier start, then shorter duration
    order_key = np.lexsort((seg[:, 1] - seg[:, 0], seg[:, 0]))
    rank = np.empty(len(arr), dtype=np.int64)
    rank[order_key] = np.arange(len(arr))
    picked: list[Proposal] = []
    while alive.any() and len(picked) < cfg.n_final:
        idx = np.flatnonzero(alive)
        best = idx[np.lexsort((rank[idx], -score[idx]))[0]]
        alive[best] = False
        picked.append(Proposal(float(seg[best, 0]), float(seg[best, 1]), float(score[best])))
        rest = np.flatnonzero(alive)
        if len(rest) == 0:
            break
        ov = _pairwise_iou(seg[best], seg[rest])
        hit = ov > cfg.snms_threshold
        if cfg.snms_mode == "gaussian":
            decay = np.exp(-(ov**2) / cfg.snms_sigma)
        else:
            decay = 1.0 - ov
        score[rest[hit]] *= decay[hit]
    return picked


def proposals_from_maps(maps: ScoreMaps, cfg: FusionConfig, nms: bool = True) -> list[Proposal]:
    props = filter_boundaries(fuse_scores(maps, cfg), maps.p_start, maps.p_end)
    return soft_nms(props, cfg) if nms else props
