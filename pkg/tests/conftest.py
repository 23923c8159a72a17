import numpy as np
import pytest
import torch

from ugvae.generative import GenerativeConfig
from ugvae.nets import init_bundle
from ugvae.numerics import RngStream


def zero_weights(bundle):
    with torch.no_grad():
        for p in bundle.parameters():
            p.zero_()
    return bundle


def randomize_biases(bundle, seed=0, scale=0.5):
    """Glorot init leaves biases at zero; tests on a generic point want them random."""
    rng = RngStream(seed).substream("test-bias")
    with torch.no_grad():
        for name, p in bundle.named_parameters():
            if name.endswith("bias"):
                p.copy_(torch.from_numpy(rng.substream(name).uniform(tuple(p.shape), -scale, scale)))
    return bundle


def small_setup(seed=0, D=16, d=2, g=2, K=2, B=4, hidden=256):
    bundle = randomize_biases(init_bundle(D, d, g, K, seed, hidden=hidden, feature=hidden,
                                          dtype=torch.float64), seed)
    cfg = GenerativeConfig(D, d, g, K, 0.2, B)
    X = torch.from_numpy(RngStream(seed).substream("x").uniform((B, D)))
    return bundle, cfg, X


@pytest.fixture
def small():
    return small_setup()


@pytest.fixture
def rng():
    return RngStream(1234)


ACCEPTANCE_LINES = []


def report(criterion: int, name: str, passed: bool, detail: str = ""):
    line = f"criterion {criterion:2d} {'PASS' if passed else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE_LINES.append((criterion, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
