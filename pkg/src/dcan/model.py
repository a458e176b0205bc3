"""DCAN network: dual-path base network, multi-path temporal context
aggregation (boundary branch), and coarse-to-fine matching (matching branch).

Matching-map convention shared with ``labels`` and ``inference``: cell
``(i, j)`` is the interval ``[j/T, (j+i+1)/T]``, i.e. row = duration - 1.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import nn
from .tensor import ShapeError, Tensor, concat, expand, matmul, relu, sigmoid, sparse_matmul

__all__ = [
    "ConfigError",
    "ModelConfig",
    "DilationSchedule",
    "ForwardOutput",
    "ScoreMaps",
    "MPTC",
    "DCAN",
    "cell_interval",
    "valid_mask",
    "group_bounds",
]


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    T: int = 100
    D: int = 100
    rgb_dim: int = 200
    flow_dim: int = 200
    base_channels: int = 128
    n_base: int = 3
    n_b: int = 6
    r_smooth: int = 3
    G: int = 2
    n_sample: int = 32
    p_channels: int = 128
    c_group: int = 512
    c_hidden: int = 128
    smooth_blocks: bool = True

    def validate(self) -> "ModelConfig":
        if self.T % self.G or self.D % self.G:
            raise ConfigError(f"T={self.T} and D={self.D} must be multiples of G={self.G}")
        if self.G < 1 or self.G & (self.G - 1):
            raise ConfigError(f"G={self.G} must be a power of two")
        if self.r_smooth % 2 == 0:
            raise ConfigError(f"r_smooth={self.r_smooth} must be odd (coprime with 2^k)")
        if not 1 <= self.D <= self.T:
            raise ConfigError(f"need 1 <= D <= T, got D={self.D}, T={self.T}")
        if self.n_base < 1 or self.n_b < 0 or self.n_sample < 2:
            raise ConfigError("n_base >= 1, n_b >= 0 and n_sample >= 2 are required")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DilationSchedule:
    """Ordered (kind, dilation) entries; kind is ``"E"`` (expanding) or ``"S"`` (smoothing)."""

    entries: list[tuple[str, int]] = field(default_factory=list)

    @classmethod
    def build(cls, n_b: int, r_smooth: int = 3, smooth: bool = True) -> "DilationSchedule":
        entries: list[tuple[str, int]] = []
        for i in range(1, n_b + 1):
            entries.append(("E", 2**i))
            if smooth:
                entries.append(("S", r_smooth))
        return cls(entries).validate()

    def validate(self) -> "DilationSchedule":
        e = [r for kind, r in self.entries if kind == "E"]
        s = [r for kind, r in self.entries if kind == "S"]
        if e != [2**i for i in range(1, len(e) + 1)]:
            raise ConfigError(f"E dilations must be 2, 4, 8, ...; got {e}")
        if len(set(s)) > 1:
            raise ConfigError(f"S dilations must all be equal; got {s}")
        if s:
            kinds = [kind for kind, _ in self.entries]
            if any(a == b for a, b in zip(kinds, kinds[1:])) or kinds[0] != "E":
                raise ConfigError(f"kinds must alternate E,S,E,S,...; got {kinds}")
        return self

    def __len__(self) -> int:
        return len(self.entries)

    def __str__(self) -> str:
        return ",".join(f"{k}{r}" for k, r in self.entries)


def cell_interval(i: int, j: int, T: int) -> tuple[float, float]:
    """Normalized interval represented by matching-map cell (row i, column j)."""
    return j / T, (j + i + 1) / T


def valid_mask(D: int, T: int) -> np.ndarray:
    i = np.arange(D)[:, None]
    j = np.arange(T)[None, :]
    return j + i + 1 <= T


def group_bounds(i: int, j: int, T: int, G: int) -> tuple[float, float]:
    s = j * G / T
    return s, s + (i + 1) * G / T


@dataclass
class ScoreMaps:
    """Per-video numpy view of the network outputs."""

    p_start: np.ndarray
    p_end: np.ndarray
    m_cls: np.ndarray
    m_reg: np.ndarray
    valid_mask: np.ndarray


@dataclass
class ForwardOutput:
    p_start: Tensor  # (B, T)
    p_end: Tensor  # (B, T)
    m_cls: Tensor  # (B, D, T)
    m_reg: Tensor  # (B, D, T)
    valid_mask: np.ndarray  # (D, T) bool

    def maps(self, b: int = 0) -> ScoreMaps:
        return ScoreMaps(
            self.p_start.data[b],
            self.p_end.data[b],
            self.m_cls.data[b],
            self.m_reg.data[b],
            self.valid_mask,
        )


@lru_cache(maxsize=16)
def _sampling_matrices(T: int, D: int, G: int, n_sample: int):
    """Linear-interpolation weights for every (group, sample) position.

    Returns ``(per_sample, fused, group_valid)``: ``per_sample`` is (T, Ng*N)
    with column ``g*N + n``; ``fused`` is (N*T, Ng) with row ``n*T + t``.
    """
    dg, tg = D // G, T // G
    ng = dg * tg
    rows_t, cols_g, cols_n, vals = [], [], [], []
    group_valid = np.zeros((dg, tg), dtype=bool)
    frac = np.linspace(0.0, 1.0, n_sample)
    for i in range(dg):
        for j in range(tg):
            # e = (j + i + 1) * G / T > 1  <=>  interval leaves the clip
            if (j + i + 1) * G > T:
                continue
            group_valid[i, j] = True
            s, e = group_bounds(i, j, T, G)
            pos = (s + (e - s) * frac) * (T - 1)
            lo = np.minimum(np.floor(pos).astype(int), T - 1)
            w = pos - lo
            hi = np.minimum(lo + 1, T - 1)
            g = i * tg + j
            for n in range(n_sample):
                rows_t += [lo[n], hi[n]]
                cols_g += [g, g]
                cols_n += [n, n]
                vals += [1.0 - w[n], w[n]]
    rows_t = np.asarray(rows_t)
    cols_g = np.asarray(cols_g)
    cols_n = np.asarray(cols_n)
    vals = np.asarray(vals)
    per_sample = sp.csr_matrix((vals, (rows_t, cols_g * n_sample + cols_n)), shape=(T, ng * n_sample))
    fused = sp.csr_matrix((vals, (cols_n * T + rows_t, cols_g)), shape=(n_sample * T, ng))
    return per_sample, fused, group_valid


class MPTC(nn.Module):
    """relu(norm(conv_long(x)) + norm(conv_short(x)) + norm(x))."""

    def __init__(self, channels: int, dilation: int, rng: np.random.Generator, kind: str = "E"):
        self.kind = kind
        self.dilation = dilation
        self.conv_long = nn.Conv1d(channels, channels, rng, kernel=3, dilation=dilation)
        self.conv_short = nn.Conv1d(channels, channels, rng, kernel=3, dilation=1)
        self.norm_long = nn.TemporalNorm(channels)
        self.norm_short = nn.TemporalNorm(channels)
        self.norm_skip = nn.TemporalNorm(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(
            self.norm_long(self.conv_long(x))
            + self.norm_short(self.conv_short(x))
            + self.norm_skip(x)
        )


class DCAN(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.schedule = DilationSchedule.build(cfg.n_b, cfg.r_smooth, smooth=cfg.smooth_blocks)
        rng = np.random.default_rng(seed)
        c = cfg.base_channels
        self.rgb_path = [nn.Conv1d(cfg.rgb_dim if k == 0 else c, c, rng) for k in range(cfg.n_base)]
        self.flow_path = [nn.Conv1d(cfg.flow_dim if k == 0 else c, c, rng) for k in range(cfg.n_base)]
        width = 2 * c
        self.blocks = [MPTC(width, r, rng, kind) for kind, r in self.schedule.entries]
        self.boundary_head = nn.Conv1d(width, 2, rng, kernel=3)

        self.reduce = nn.Conv1d(width, cfg.p_channels, rng, kernel=3)
        fan_in = cfg.p_channels * cfg.n_sample
        self.group_weight = Tensor(
            nn.he_uniform(rng, (cfg.c_group, cfg.p_channels, cfg.n_sample), fan_in), requires_grad=True
        )
        self.group_bias = Tensor(np.zeros(cfg.c_group), requires_grad=True)
        stages = int(round(math.log2(cfg.G)))
        widths = [
            int(round(cfg.c_group * (cfg.c_hidden / cfg.c_group) ** ((s + 1) / stages)))
            for s in range(stages)
        ]
        chans = [cfg.c_group] + widths
        self.refine = [nn.Deconv2d(chans[s], chans[s + 1], rng) for s in range(stages)]
        last = chans[-1]
        self.relate = nn.Conv2d(last, cfg.c_hidden, rng, kernel=3)
        self.matching_head = nn.Conv2d(cfg.c_hidden, 2, rng, kernel=1)

    # -- branches ------------------------------------------------------
    def base_forward(self, rgb: Tensor, flow: Tensor) -> Tensor:
        if rgb.shape[0] != flow.shape[0] or rgb.shape[2] != flow.shape[2]:
            raise ShapeError(f"rgb {rgb.shape} and flow {flow.shape} streams differ in batch/length")
        a, b = rgb, flow
        for conv in self.rgb_path:
            a = relu(conv(a))
        for conv in self.flow_path:
            b = relu(conv(b))
        return concat([a, b], axis=1)

    def mtca_forward(self, f: Tensor) -> tuple[Tensor, Tensor]:
        x = f
        for block in self.blocks:
            x = block(x)
        probs = sigmoid(self.boundary_head(x))
        return probs[:, 0, :], probs[:, 1, :]

    def reduced_feature(self, f: Tensor) -> Tensor:
        return relu(self.reduce(f))

    def group_sample(self, f_p: Tensor) -> Tensor:
        """Sampled group features, shape (B, D/G, T/G, C_p, N_sample)."""
        cfg = self.cfg
        bsz, ch, length = f_p.shape
        if length != cfg.T:
            raise ShapeError(f"expected T={cfg.T}, got {length}")
        per_sample, _, _ = _sampling_matrices(cfg.T, cfg.D, cfg.G, cfg.n_sample)
        out = sparse_matmul(f_p.reshape(bsz * ch, length), per_sample)
        out = out.reshape(bsz, ch, cfg.D // cfg.G, cfg.T // cfg.G, cfg.n_sample)
        return out.transpose(0, 2, 3, 1, 4)

    def group_map(self, f_p: Tensor) -> Tensor:
        """Linear map of every group's (C_p x N_sample) sample block to C_group channels.

        The projection is applied before interpolation (both are linear), so
        the (B, Ng, C_p, N) sample tensor is never materialized.
        """
        cfg = self.cfg
        bsz, ch, length = f_p.shape
        n = cfg.n_sample
        dg, tg = cfg.D // cfg.G, cfg.T // cfg.G
        _, fused, group_valid = _sampling_matrices(cfg.T, cfg.D, cfg.G, n)
        w = self.group_weight.transpose(0, 2, 1).reshape(cfg.c_group * n, ch)
        feats = f_p.transpose(1, 0, 2).reshape(ch, bsz * length)
        proj = matmul(w, feats).reshape(cfg.c_group, n, bsz, length)
        proj = proj.transpose(2, 0, 1, 3).reshape(bsz * cfg.c_group, n * length)
        out = sparse_matmul(proj, fused).reshape(bsz, cfg.c_group, dg, tg)
        return relu(out + self._group_bias_map(out.shape, group_valid))

    def _group_bias_map(self, shape, group_valid) -> Tensor:
        # bias only on in-clip groups, so out-of-clip groups stay exactly zero
        bias = expand(self.group_bias.reshape(1, self.cfg.c_group, 1, 1), shape)
        return bias * Tensor(np.broadcast_to(group_valid, shape).astype(np.float64))

    def group_map_reference(self, f_p: Tensor) -> Tensor:
        """Same as :meth:`group_map` but through the explicit sampled tensor."""
        cfg = self.cfg
        bsz = f_p.shape[0]
        dg, tg = cfg.D // cfg.G, cfg.T // cfg.G
        p = self.group_sample(f_p).reshape(bsz * dg * tg, cfg.p_channels * cfg.n_sample)
        w = self.group_weight.reshape(cfg.c_group, cfg.p_channels * cfg.n_sample).transpose(1, 0)
        out = matmul(p, w).reshape(bsz, dg, tg, cfg.c_group).transpose(0, 3, 1, 2)
        _, _, group_valid = _sampling_matrices(cfg.T, cfg.D, cfg.G, cfg.n_sample)
        return relu(out + self._group_bias_map(out.shape, group_valid))

    def cfm_forward(self, f: Tensor) -> tuple[Tensor, Tensor]:
        x = self.group_map(self.reduced_feature(f))
        for deconv in self.refine:
            x = relu(deconv(x))
        x = relu(self.relate(x))
        maps = sigmoid(self.matching_head(x))
        return maps[:, 0], maps[:, 1]

    def __call__(self, rgb: Tensor, flow: Tensor) -> ForwardOutput:
        if rgb.shape[2] != self.cfg.T:
            raise ShapeError(f"model built for T={self.cfg.T}, input has {rgb.shape[2]}")
        f = self.base_forward(rgb, flow)
        p_start, p_end = self.mtca_forward(f)
        m_cls, m_reg = self.cfm_forward(f)
        return ForwardOutput(p_start, p_end, m_cls, m_reg, valid_mask(self.cfg.D, self.cfg.T))

    forward = __call__
