import numpy as np
import pytest
import torch


def randomize(module, seed, scale=0.5):
    """Give every parameter (biases and blend_raw included) a random value."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


def numpy_params(module):
    return {k: v.detach().numpy().astype(np.float64) for k, v in module.state_dict().items()}


@pytest.fixture(autouse=True)
def _torch_state():
    # trainer calls switch on deterministic mode; keep tests independent of order
    torch.set_num_threads(1)
    yield
    torch.use_deterministic_algorithms(False)


# one line per acceptance criterion, shown after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
