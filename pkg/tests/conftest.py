import sys

import pytest
import torch

from isodream.worldmodel import WMConfig, WorldModel

torch.set_num_threads(1)


def tiny_cfg(**kw) -> WMConfig:
    base = dict(image_size=8, cnn_depth=2, embed=6, deter=5, stoch=3, static_dim=3, hidden=6)
    base.update(kw)
    return WMConfig(**base)


def tiny_model(seed=0, **kw) -> WorldModel:
    return WorldModel(tiny_cfg(**kw), seed).double()


def tiny_batch(B=1, T=4, size=8, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return {
        "images": torch.rand(B, T, size, size, 3, generator=g).to(dtype),
        "actions": (torch.rand(B, T, 2, generator=g) * 2 - 1).to(dtype),
        "rewards": torch.randn(B, T, generator=g).to(dtype),
        "dones": (torch.rand(B, T, generator=g) > 0.7).to(dtype),
    }


@pytest.fixture
def wm():
    return tiny_model()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
