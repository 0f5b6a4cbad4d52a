import numpy as np
import pytest
import torch

from dyolo.hazegen import DatasetSpec, build_dataset


def central_difference_check(fn, inputs, eps=1e-5, seed=0):
    """Compare autograd against central differences for ``sum(w * fn())``.

    ``inputs`` are float64 leaf tensors with requires_grad. Returns the max
    error over all inputs, relative to the largest gradient magnitude of the
    corresponding input.
    """
    gen = torch.Generator().manual_seed(seed)
    out = fn()
    w = torch.randn(out.shape, generator=gen, dtype=torch.float64) if out.dim() else torch.ones((), dtype=torch.float64)

    def scalar():
        return (fn() * w).sum()

    grads = torch.autograd.grad(scalar(), inputs, allow_unused=True)
    worst = 0.0
    for x, g in zip(inputs, grads):
        g = torch.zeros_like(x) if g is None else g
        num = torch.zeros_like(x)
        flat = x.data.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = scalar().item()
                flat[i] = orig - eps
                minus = scalar().item()
                flat[i] = orig
                num.view(-1)[i] = (plus - minus) / (2 * eps)
        scale = max(num.abs().max().item(), g.abs().max().item(), 1e-12)
        worst = max(worst, (num - g).abs().max().item() / scale)
    return worst


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toyset")
    build_dataset(DatasetSpec(out=str(root), train=24, test=8, seed=3))
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed again in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
