import sys

import numpy as np
import pytest

from dcan.model import ModelConfig
from dcan.tensor import Tensor

FD_EPS = 1e-5
FD_RTOL = 1e-4


def numeric_grad(f, x: Tensor, idx, eps: float = FD_EPS) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``x.data[idx]``."""
    old = x.data[idx]
    x.data[idx] = old + eps
    up = f().item()
    x.data[idx] = old - eps
    down = f().item()
    x.data[idx] = old
    return (up - down) / (2 * eps)


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    # the floor sits above central-difference roundoff (~1e-16 * |f| / h) so exact zeros compare cleanly
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_grads(f, inputs, n_probe=None, rng=None, rtol=FD_RTOL):
    """Compare autodiff and central differences; returns the worst relative error."""
    rng = rng or np.random.default_rng(0)
    for x in inputs:
        x.grad = None
    f().backward()
    worst = 0.0
    for x in inputs:
        flat = list(np.ndindex(x.shape))
        if n_probe is not None and len(flat) > n_probe:
            flat = [flat[k] for k in rng.choice(len(flat), n_probe, replace=False)]
        for idx in flat:
            num = numeric_grad(f, x, idx)
            ana = float(x.grad[idx]) if x.grad is not None else 0.0
            err = rel_err(ana, num)
            worst = max(worst, err)
            assert err <= rtol, f"grad mismatch at {idx}: autodiff {ana}, numeric {num}"
    return worst


def tiny_config(**overrides) -> ModelConfig:
    base = dict(T=16, D=8, rgb_dim=3, flow_dim=3, base_channels=4, n_base=2, n_b=2, r_smooth=3, G=2,
                n_sample=4, p_channels=4, c_group=8, c_hidden=4)
    base.update(overrides)
    return ModelConfig(**base).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def jitter_zero_init(net, rng, scale: float = 0.1) -> None:
    """Move zero-initialised biases and shifts to a generic point.

    At exactly zero bias, cells fed only by zero-filled groups sit on the ReLU kink, where a
    central difference sees half the slope and autodiff sees the zero subgradient.
    """
    for name, p in net.named_parameters():
        if name.endswith(("bias", "shift")):
            p.data += rng.normal(0.0, scale, p.shape)


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
