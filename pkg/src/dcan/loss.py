"""Multitask objective: weighted BCE on boundaries and the foreground map,
balanced MSE on the IoU map, plus L2 on parameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .labels import GroundTruth
from .model import ConfigError, ForwardOutput
from .tensor import Tensor, clip, log, tsum

__all__ = ["LossConfig", "SkipTerm", "wce", "reg_loss", "l2_penalty", "total_loss"]

EPS = 1e-7


class SkipTerm(ValueError):
    """A loss term is undefined for this batch (no positives or no negatives)."""


@dataclass
class LossConfig:
    lam: float = 10.0
    beta: float = 1e-4
    cls_binarize: float = 0.9
    region_scale: float = 0.1
    neg_pos_ratio: float = 1.0
    balance_reg: bool = True

    def validate(self) -> "LossConfig":
        if self.lam <= 0 or self.beta < 0:
            raise ConfigError("need lam > 0 and beta >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def wce(p: Tensor, g: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    g = np.asarray(g, dtype=np.float64)
    m = np.ones_like(g) if mask is None else np.asarray(mask, dtype=np.float64)
    if g.shape != p.shape or m.shape != p.shape:
        raise ValueError(f"wce: prediction {p.shape}, labels {g.shape}, mask {m.shape}")
    n = m.sum()
    n_pos = (g * m).sum()
    if n_pos == 0 or n_pos == n:
        raise SkipTerm(f"wce needs positives and negatives, got {n_pos:g} of {n:g}")
    ratio = n / n_pos
    coef_pos = 0.5 * ratio
    coef_neg = 0.5 * ratio / (ratio - 1.0)
    pc = clip(p, EPS, 1.0 - EPS)
    w_pos = Tensor(coef_pos * g * m)
    w_neg = Tensor(coef_neg * (1.0 - g) * m)
    total = tsum(w_pos * log(pc)) + tsum(w_neg * log(1.0 - pc))
    return total * (-1.0 / n)


def reg_loss(m_reg: Tensor, g_iou: np.ndarray, mask: np.ndarray, rng: np.random.Generator | None = None,
             neg_pos_ratio: float = 1.0, balanced: bool = True) -> Tensor:
    """Squared error over cells with positive IoU plus a seeded sample of zero-IoU cells."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), g_iou.shape)
    pos = mask & (g_iou > 0)
    if not pos.any():
        raise SkipTerm("no cell overlaps a ground-truth instance")
    if balanced:
        neg_idx = np.flatnonzero(mask & (g_iou <= 0))
        k = min(len(neg_idx), int(round(neg_pos_ratio * pos.sum())))
        rng = rng if rng is not None else np.random.default_rng(0)
        chosen = rng.choice(neg_idx, size=k, replace=False) if k else np.empty(0, dtype=int)
        sel = pos.ravel().astype(np.float64)
        sel[chosen] = 1.0
        sel = sel.reshape(g_iou.shape)
    else:
        sel = mask.astype(np.float64)
    diff = m_reg - Tensor(g_iou)
    return tsum(Tensor(sel) * diff * diff) * (1.0 / sel.sum())


def l2_penalty(params) -> Tensor:
    terms = [tsum(p * p) for p in params]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def total_loss(out: ForwardOutput, gt: GroundTruth, params, cfg: LossConfig,
               rng: np.random.Generator | None = None) -> tuple[Tensor, dict[str, float]]:
    """Returns the scalar loss and its parts; undefined terms are skipped and reported as 0."""
    mask = np.broadcast_to(out.valid_mask, out.m_cls.shape)
    parts: dict[str, Tensor] = {}
    for name, fn in (
        ("L_start", lambda: wce(out.p_start, gt.g_start)),
        ("L_end", lambda: wce(out.p_end, gt.g_end)),
        ("L_cls", lambda: wce(out.m_cls, gt.g_cls, mask)),
        ("L_reg", lambda: reg_loss(out.m_reg, gt.g_iou, mask, rng, cfg.neg_pos_ratio, cfg.balance_reg)),
    ):
        try:
            parts[name] = fn()
        except SkipTerm:
            pass
    params = list(params)
    l2 = l2_penalty(params) if params else Tensor(0.0)
    total = l2 * cfg.beta
    for name, term in parts.items():
        total = total + (term * cfg.lam if name == "L_reg" else term)
    log_parts = {k: parts[k].item() if k in parts else 0.0 for k in ("L_start", "L_end", "L_cls", "L_reg")}
    log_parts["L_b"] = log_parts["L_start"] + log_parts["L_end"]
    log_parts["L2"] = l2.item()
    log_parts["total"] = total.item()
    return total, log_parts
