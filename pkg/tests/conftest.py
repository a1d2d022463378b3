import numpy as np
import pytest
import torch

from urbanmind.config import ExperimentConfig

torch.set_num_threads(1)


def tiny_config(**overrides) -> ExperimentConfig:
    """A configuration that trains end to end in a few seconds."""
    cfg = ExperimentConfig().replace(
        data={"n_days": 6},
        mae={"epochs": 2, "d_v": 8, "d_k": 4, "conv_widths": [4, 8], "lr": 1e-3},
        backbone={"L": 2, "l_frozen": 1, "hidden_dim": 16, "n_heads": 2, "ffn_dim": 32, "epochs": 2, "lr": 1e-3},
        heads={"n_heads": 2, "ffn_dim": 32},
        tta={"epochs": 2},
    )
    return cfg.replace(**overrides) if overrides else cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return tiny_config()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
