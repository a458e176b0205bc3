"""Exact receptive-field analysis of 1-D convolution stacks.

Offsets are propagated as integer sets (iterated Minkowski sums), so the
result says precisely which input positions can influence one output.
Zero-padding edge effects are ignored: the signal is treated as infinite,
which makes contiguity a property of the kernel supports alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import DilationSchedule, ModelConfig

__all__ = [
    "LayerSpec",
    "ReceptiveField",
    "ContiguityReport",
    "propagate",
    "cumulative",
    "check_contiguity",
    "base_stack",
    "mtca_stack",
    "dcan_stack",
    "format_report",
]


@dataclass(frozen=True)
class LayerSpec:
    kernel: int = 3
    dilation: int = 1
    multi_path: bool = False
    name: str = ""

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.dilation < 1:
            raise ValueError(f"need odd kernel and dilation >= 1, got k={self.kernel}, r={self.dilation}")

    def offsets(self) -> frozenset[int]:
        half = (self.kernel - 1) // 2
        taps = {self.dilation * t for t in range(-half, half + 1)}
        if self.multi_path:
            taps |= set(range(-half, half + 1))  # short path, dilation 1
            taps.add(0)  # shortcut
        return frozenset(taps)


@dataclass(frozen=True)
class ReceptiveField:
    offsets: tuple[int, ...]

    @property
    def lo(self) -> int:
        return self.offsets[0]

    @property
    def hi(self) -> int:
        return self.offsets[-1]

    @property
    def width(self) -> int:
        return self.hi - self.lo + 1


@dataclass
class ContiguityReport:
    contiguous: bool
    holes: list[int] = field(default_factory=list)


def _minkowski(a: set[int], b: frozenset[int]) -> set[int]:
    return {x + y for x in a for y in b}


def propagate(stack: list[LayerSpec]) -> ReceptiveField:
    if not stack:
        raise ValueError("empty layer stack")
    reach = {0}
    for layer in stack:
        reach = _minkowski(reach, layer.offsets())
    return ReceptiveField(tuple(sorted(reach)))


def cumulative(stack: list[LayerSpec]) -> list[tuple[LayerSpec, ReceptiveField]]:
    out = []
    reach = {0}
    for layer in stack:
        reach = _minkowski(reach, layer.offsets())
        out.append((layer, ReceptiveField(tuple(sorted(reach)))))
    return out


def check_contiguity(rf: ReceptiveField) -> ContiguityReport:
    present = set(rf.offsets)
    holes = [x for x in range(rf.lo, rf.hi + 1) if x not in present]
    return ContiguityReport(not holes, holes)


def base_stack(n_base: int) -> list[LayerSpec]:
    # rgb and flow paths run in parallel, so one path's depth is what counts
    return [LayerSpec(3, 1, False, f"base{k}") for k in range(n_base)]


def mtca_stack(schedule: DilationSchedule, multi_path: bool = True) -> list[LayerSpec]:
    return [LayerSpec(3, r, multi_path, f"{kind}{r}") for kind, r in schedule.entries]


def dcan_stack(cfg: ModelConfig, multi_path: bool = True) -> list[LayerSpec]:
    schedule = DilationSchedule.build(cfg.n_b, cfg.r_smooth, smooth=cfg.smooth_blocks)
    return base_stack(cfg.n_base) + mtca_stack(schedule, multi_path)


def _section(title: str, stack: list[LayerSpec]) -> list[str]:
    rf = propagate(stack)
    report = check_contiguity(rf)
    lines = [f"== {title}", f"width       {rf.width}", f"span        [{rf.lo}, {rf.hi}]"]
    lines.append(f"contiguous  {'yes' if report.contiguous else 'no'}")
    if report.holes:
        shown = report.holes if len(report.holes) <= 24 else report.holes[:12] + ["..."] + report.holes[-12:]
        lines.append(f"holes       {len(report.holes)}: {' '.join(str(h) for h in shown)}")
    lines.append(f"{'layer':<10}{'k':>3}{'r':>5}{'paths':>7}{'span':>16}{'width':>7}{'holes':>7}")
    for layer, acc in cumulative(stack):
        n_holes = len(check_contiguity(acc).holes)
        paths = "multi" if layer.multi_path else "long"
        lines.append(
            f"{layer.name:<10}{layer.kernel:>3}{layer.dilation:>5}{paths:>7}"
            f"{f'[{acc.lo}, {acc.hi}]':>16}{acc.width:>7}{n_holes:>7}"
        )
    return lines


def format_report(cfg: ModelConfig) -> str:
    """Text report: configured stack plus the MTCA-only and expansion-only ablations."""
    schedule = DilationSchedule.build(cfg.n_b, cfg.r_smooth, smooth=cfg.smooth_blocks)
    e_only = DilationSchedule.build(cfg.n_b, cfg.r_smooth, smooth=False)
    lines = [
        "# receptive-field analysis (infinite-signal model; zero-padding edges ignored)",
        f"# schedule {schedule}",
        "",
    ]
    lines += _section("base + MTCA (multi-path)", dcan_stack(cfg))
    lines.append("")
    lines += _section("MTCA alone (multi-path)", mtca_stack(schedule))
    lines.append("")
    lines += _section("MTCA alone (long paths only)", mtca_stack(schedule, multi_path=False))
    lines.append("")
    lines += _section("E-only ablation (long paths only, raw input)", mtca_stack(e_only, multi_path=False))
    return "\n".join(lines) + "\n"
