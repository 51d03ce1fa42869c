import numpy as np
import pytest

from aliasim import env as E
from aliasim.model import build_variant


def jitter_params(model, seed=0, scale=0.3):
    """Perturb every trainable tensor so no gradient is identically zero
    (the head's output layer and the gate start at degenerate values)."""
    g = np.random.default_rng(seed)
    for _, p in model.parameters():
        p.data = np.asarray(p.data + g.uniform(-scale, scale, p.data.shape))
    return model


def tiny_model(variant="intent", family="crossing_path", seed=0, **kw):
    spec = E.make_task(family)
    opts = dict(K=4, H=2, d=8, d_h=8, heads=2, enc_blocks=1, head_blocks=1, time_dim=8)
    opts.update(kw)
    return spec, build_variant(variant, spec, seed=seed, **opts)


@pytest.fixture
def crossing():
    return E.make_task("crossing_path")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
