import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_config():
    from lcclab.model import ModelConfig

    return ModelConfig(vocab_size=64, n_layers=2, n_heads=2, d_model=16, d_head=8, d_ffn=32, max_seq_len=32, seed=0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
