import numpy as np
import pytest
import torch


def central_difference(fn, tensor, index, h=1e-5):
    """d fn / d tensor[index] by central differences; ``tensor`` is restored afterwards."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        up = float(fn())
        tensor[index] = orig - h
        down = float(fn())
        tensor[index] = orig
    return (up - down) / (2 * h)


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def sample_indices(tensor, frac, rng, at_least=1):
    n = tensor.numel()
    k = max(at_least, int(round(frac * n)))
    flat = rng.choice(n, size=min(k, n), replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, tensor.shape)) for f in flat]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
