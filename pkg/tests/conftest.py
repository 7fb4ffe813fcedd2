import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from simpleics import scenario  # noqa: E402
from simpleics.world import run_to_bundle  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def make_bundle(out, seed=1, duration="1h", profile=None, campaign=None):
    doc = scenario.load()
    settings = scenario.resolve(doc, seed=seed, duration=duration, profile=profile,
                                campaign=campaign, env={})
    run_to_bundle(doc, settings, out)
    return Path(out)


@pytest.fixture(scope="session")
def default_doc():
    return scenario.load()


@pytest.fixture(scope="session")
def attack_bundle(tmp_path_factory):
    """One virtual hour, default scenario, seed 1, campaign enabled."""
    return make_bundle(tmp_path_factory.mktemp("attack") / "bundle")


@pytest.fixture(scope="session")
def benign_bundle(tmp_path_factory):
    """One virtual hour, default scenario, seed 1, campaign disabled."""
    return make_bundle(tmp_path_factory.mktemp("benign") / "bundle", campaign=False)
