import numpy as np
import pytest

from drnet import autodiff as ad
from drnet.autodiff import Tensor
from drnet.model import ModelConfig

from oracles import numeric_grad, rel_error

GRAD_STEP = 1e-5
GRAD_RTOL = 1e-4

_REPORT = []


def report(criterion: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}"
    _REPORT.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)


def micro_config(**changes) -> ModelConfig:
    """16-px model small enough for finite differences over every weight."""
    base = dict(input_size=16, stem_channels=2, channels=(3, 3, 4, 4), odm_channels=3, strides=(2, 4, 8, 16),
                anchor_scales=(4.0, 6.0, 9.0, 13.0), ratios=(1.0, 2.0), num_classes=2)
    base.update(changes)
    return ModelConfig(**base)


def grad_check(fn, arrays, rng, step=GRAD_STEP):
    """Relative error between backprop and central differences.

    ``fn`` maps a list of Tensors to a Tensor of any shape; it is reduced to
    a scalar against a fixed random projection so every output entry counts.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(tensors)
    proj = rng.standard_normal(out.shape) if out.shape else np.array(1.0)

    def scalar():
        return float(np.sum(fn([Tensor(a) for a in arrays]).data * proj))

    loss = ad.tsum(ad.mul(out, Tensor(proj))) if out.shape else out
    ad.backward(loss)
    errors = []
    for t, a in zip(tensors, arrays):
        num = numeric_grad(scalar, a, step)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        errors.append(rel_error(ana, num))
    return max(errors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
