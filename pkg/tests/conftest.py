import numpy as np
import pytest
import torch

from prostate_bench.synthetic import shape_mask

# Verdict lines from test_acceptance.py, shown in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def circle_fixture(n_slices=4, hw=32, seed=0):
    """Filled circles on a noisy background, one per slice."""
    r = np.random.default_rng(seed)
    images, masks = [], []
    for i in range(n_slices):
        p = {"cy": hw / 2 + r.uniform(-3, 3), "cx": hw / 2 + r.uniform(-3, 3), "r": hw * r.uniform(0.18, 0.28)}
        m = shape_mask("circles", p, (hw, hw))
        img = np.where(m > 0, 0.8, 0.2) + r.normal(0, 0.05, (hw, hw))
        images.append(img.astype(np.float32))
        masks.append(m)
    return np.stack(images), np.stack(masks)
