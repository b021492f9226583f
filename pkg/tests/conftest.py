import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from pdaf.config import Config  # noqa: E402


@pytest.fixture
def tiny_config():
    """Small enough for full train/eval round trips in a few seconds."""
    return Config(image_size=16, train_size=6, val_size=3, test_size=3, feature_channels=8,
                  pretrain_epochs=2, epochs=2, batch_size=2, pretrain_batch_size=3, dpe_width=8)


# one line per acceptance criterion, echoed in the terminal summary so it shows under capture
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
