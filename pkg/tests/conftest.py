import sys

import numpy as np
import pytest
import torch

from semexp.encoders import StubSegmenter, StubVisionLanguageEncoder
from semexp.network import NetworkConfig

torch.set_num_threads(1)

TINY = NetworkConfig(num_scales=2, base_channels=8, smb_per_rsmg=1)


def make_image(mean, size=16, noise=0.05, seed=0):
    rng = np.random.default_rng(seed)
    return np.clip(mean + rng.normal(0.0, noise, (size, size, 3)), 0.0, 1.0)


def numeric_grad(fn, x, eps=1e-6):
    """Central finite differences of a scalar ``fn`` w.r.t. every entry of ``x`` (float64)."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            hi = float(fn(x))
            flat[i] = old - eps
            lo = float(fn(x))
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def encoder():
    return StubVisionLanguageEncoder()


@pytest.fixture
def segmenter():
    return StubSegmenter()


@pytest.fixture
def prompts(encoder):
    return encoder.anchor_prompts()


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results, key=lambda l: int(l.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
