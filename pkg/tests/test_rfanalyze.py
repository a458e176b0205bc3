import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from dcan.model import DilationSchedule, ModelConfig
from dcan.rfanalyze import (
    LayerSpec,
    ReceptiveField,
    base_stack,
    check_contiguity,
    cumulative,
    dcan_stack,
    format_report,
    mtca_stack,
    propagate,
)


def test_single_layer():
    rf = propagate([LayerSpec(3, 1)])
    assert rf.offsets == (-1, 0, 1) and rf.width == 3


def test_two_dilated_single_path_layers_leave_odd_holes():
    rf = propagate([LayerSpec(3, 2), LayerSpec(3, 4)])
    assert all(x % 2 == 0 for x in rf.offsets)
    report = check_contiguity(rf)
    assert report.holes == [x for x in range(rf.lo, rf.hi + 1) if x % 2]


def test_contiguity_basic_sets():
    assert check_contiguity(ReceptiveField((-1, 0, 1))).contiguous
    report = check_contiguity(ReceptiveField((-2, 0, 2)))
    assert not report.contiguous and report.holes == [-1, 1]


def test_base_stack_reaches_three_steps():
    rf = propagate(base_stack(3))
    assert (rf.lo, rf.hi) == (-3, 3)


def test_mtca_alone_width():
    schedule = DilationSchedule.build(6, 3)
    for multi in (True, False):
        assert propagate(mtca_stack(schedule, multi)).width == 289


def test_full_stack_is_contiguous():
    rf = propagate(dcan_stack(ModelConfig()))
    assert check_contiguity(rf).contiguous
    # parallel rgb/flow base paths add one path's depth (3 layers, +-3) to the 289-wide MTCA field
    assert rf.width == 295


def test_expansion_only_has_holes():
    schedule = DilationSchedule.build(3, smooth=False)
    report = check_contiguity(propagate(mtca_stack(schedule, multi_path=False)))
    assert not report.contiguous and report.holes


def test_smoothing_shrinks_holes_on_long_paths():
    smooth = check_contiguity(propagate(mtca_stack(DilationSchedule.build(3, 3), multi_path=False)))
    e_only = check_contiguity(propagate(mtca_stack(DilationSchedule.build(3, smooth=False), multi_path=False)))
    assert len(smooth.holes) < len(e_only.holes)
    # only the two outermost interior positions stay unreachable
    assert smooth.holes == [-22, 22]


def test_cumulative_is_monotone():
    widths = [rf.width for _, rf in cumulative(dcan_stack(ModelConfig(n_b=3)))]
    assert widths == sorted(widths)


def test_report_sections():
    text = format_report(ModelConfig())
    assert "width       289" in text
    assert "width       295" in text
    assert "contiguous  no" in text


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([1, 3, 5]), st.integers(1, 9)), min_size=1, max_size=5))
def test_width_formula_for_any_stack(layers):
    stack = [LayerSpec(k, r) for k, r in layers]
    rf = propagate(stack)
    assert rf.width == 1 + sum((k - 1) * r for k, r in layers)
    assert rf.lo == -rf.hi


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.sampled_from([1, 3]))
def test_multi_path_schedules_are_contiguous(n_b, r_smooth):
    # each block's short path widens the field by 2, so dilation never outruns it when r_smooth <= 3
    for smooth in (True, False):
        schedule = DilationSchedule.build(n_b, r_smooth, smooth)
        assert check_contiguity(propagate(mtca_stack(schedule))).contiguous


def test_matches_brute_force_impulse_response():
    # convolve an impulse through the stack with all-ones kernels
    stack = [LayerSpec(3, 2), LayerSpec(3, 3, multi_path=True), LayerSpec(3, 4)]
    size = 101
    sig = np.zeros(size)
    sig[size // 2] = 1.0
    for layer in stack:
        nxt = np.zeros(size)
        for off in layer.offsets():
            nxt += np.roll(sig, off)
        sig = nxt
    got = {int(x) - size // 2 for x in np.nonzero(sig)[0]}
    assert got == set(propagate(stack).offsets)
