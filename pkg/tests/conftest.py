import sys
import time
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def record_criterion(name: str, ok: bool, detail: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class TrainedRuns:
    """Locked-seed training runs, computed once per session and shared."""

    def __init__(self):
        from powshift import toytrain

        self.toytrain = toytrain
        self._runs = {}
        self.seconds = {}

    def get(self, mode, ema=True):
        key = (mode, ema)
        if key not in self._runs:
            tt = self.toytrain
            baseline = None if mode == "baseline" else self.get("baseline").float_model
            cfg = tt.TrainConfig(mode=mode) if ema else tt.TrainConfig(mode=mode, ema=False)
            t0 = time.perf_counter()
            self._runs[key] = tt.train(cfg, baseline)
            self.seconds[key] = time.perf_counter() - t0
        return self._runs[key]


@pytest.fixture(scope="session")
def trained():
    return TrainedRuns()
