import json
from pathlib import Path

import pytest

from sharelens.synth import SyntheticTruth, generate_panel

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def frozen():
    return json.loads((DATA / "oracle_values.json").read_text())


@pytest.fixture(scope="session")
def small_panel():
    """Nested-logit panel with reviews; 3 markets x 6 alternatives x 8 periods."""
    truth = SyntheticTruth(sigma_nest=0.4, seed=11, words_per_review=30, reviews_per_doc=1)
    return generate_panel(truth, 3, 6, 8)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
