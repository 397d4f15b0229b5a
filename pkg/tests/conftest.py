import json
import sys
from pathlib import Path

import pytest

FIXTURES = Path(__file__).resolve().parent / "fixtures"
# criterion number -> PASS/FAIL line, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}
sys.path.insert(0, str(FIXTURES))

from diffaudit.ontology import load_ontology  # noqa: E402


@pytest.fixture(scope="session")
def ont():
    return load_ontology()


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


def load_json(name):
    return json.loads((FIXTURES / name).read_text(encoding="utf-8"))


def pytest_terminal_summary(terminalreporter):
    # the test module may be imported under another name; collect from both
    lines = dict(ACCEPTANCE)
    for mod in list(sys.modules.values()):
        if mod is not None and getattr(mod, "__file__", None) == __file__:
            lines.update(getattr(mod, "ACCEPTANCE", {}))
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
