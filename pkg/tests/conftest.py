import numpy as np
import pytest
import torch

from sketchguide.backbone import BackboneConfig, ToyDenoiser
from sketchguide.schedule import make_schedule


@pytest.fixture
def tiny_backbone():
    """Untrained 8x8, two-level denoiser; deterministic weights."""
    torch.manual_seed(0)
    model = ToyDenoiser(BackboneConfig(image_size=8, widths=(4, 8), mid_blocks=1, emb_dim=16, groups=2))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@pytest.fixture
def toy_backbone():
    """Untrained default-size (32x32, 9 taps) denoiser."""
    torch.manual_seed(0)
    model = ToyDenoiser(BackboneConfig())
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@pytest.fixture
def sched50():
    return make_schedule(50)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(verdicts, key=lambda c: (int(str(c).split("-")[0]), str(c))):
        passed, detail = verdicts[cid]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {cid}: {detail}")
