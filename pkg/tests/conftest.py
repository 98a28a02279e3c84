from pathlib import Path

import numpy as np
import pytest
import torch

from stkd.config import RunConfig, load_config
from stkd.synthetic import make_dataset

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "demos" / "configs" / "toy.cfg"

_ACCEPTANCE: list[str] = []


def record(number: int, title: str, passed: bool, detail: str = ""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}"
    if detail:
        line += f" ({detail})"
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    """Small tiny-backbone config for fast unit tests."""
    cfg = RunConfig()
    cfg.arch.backbone = "tiny"
    cfg.arch.aspp_channels = 16
    cfg.arch.aspp_rates = (1, 2, 3)
    cfg.arch.low_channels = 16
    cfg.arch.high_channels = 32
    cfg.arch.unit_channels = 16
    cfg.train.crop = 64
    cfg.train.batch_size = 2
    cfg.train.stage1.lr = 0.01
    cfg.train.stage2.lr = 0.001
    cfg.train.checkpoint_every = 1000
    return cfg.validate()


@pytest.fixture
def toy_cfg() -> RunConfig:
    return load_config(TOY_CONFIG)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory) -> Path:
    return make_dataset(tmp_path_factory.mktemp("synth"), n_sequences=2, n_frames=10, size=64, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Stage 1 (500 iters) then stage 2 (300 iters) on one 5-frame moving-square sequence."""
    import time

    from stkd.persistence import index_dataset, load_checkpoint
    from stkd.training import train_stage1, train_stage2

    base = tmp_path_factory.mktemp("toy")
    cfg = load_config(TOY_CONFIG)
    index = index_dataset(make_dataset(base / "data", n_sequences=1, n_frames=5, size=64, seed=0))
    start = time.perf_counter()
    stage1 = train_stage1([index], cfg, base / "run")
    stage2 = train_stage2(load_checkpoint(stage1.checkpoint), [index], cfg, base / "run")
    return {
        "cfg": cfg,
        "index": index,
        "out": base / "run",
        "stage1": stage1,
        "stage2": stage2,
        "seconds": time.perf_counter() - start,
    }
