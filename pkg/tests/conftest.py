import numpy as np
import pytest

from fedchain import nn
from fedchain.streaming import SynthSpec, synth_generate


def central_difference(arch, vector, X, y, eps=1e-5):
    grad = np.zeros_like(vector)
    for k in range(vector.size):
        plus = vector.copy()
        minus = vector.copy()
        plus[k] += eps
        minus[k] -= eps
        lp, _ = nn.loss_and_gradient(arch, plus, X, y)
        lm, _ = nn.loss_and_gradient(arch, minus, X, y)
        grad[k] = (lp - lm) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


@pytest.fixture
def tiny_arch():
    return nn.ModelArch("GRU", input_shape=4, hidden_layers=1, hidden_units=5)


@pytest.fixture
def short_series():
    """Seven detectors, enough points for exactly six rounds at input_shape 12."""
    return synth_generate(SynthSpec(seed=3, n_points=24 + 12 * 5), 7)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("tests.test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in mod.TITLES.items():
        if n in mod.RESULTS:
            _, ok, detail = mod.RESULTS[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
        else:
            terminalreporter.write_line(f"[FAIL] {n}. {title}: not run or errored")
