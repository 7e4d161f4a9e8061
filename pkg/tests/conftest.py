import pytest

from ruleloop.dataset import ImageStore, Manifest
from ruleloop.prompts import TemplateRegistry
from ruleloop.rules import load_registry
from ruleloop.synthetic import synthetic_manifest

# Verdict lines recorded by the acceptance suite; echoed after the run so
# they are visible even under output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def registry():
    return load_registry()


@pytest.fixture(scope="session")
def templates():
    return TemplateRegistry()


@pytest.fixture()
def workspace(tmp_path):
    return tmp_path / "ws"


@pytest.fixture()
def small_corpus(workspace, registry) -> Manifest:
    """Rendered 30-image single-domain corpus with ground truth."""
    store = ImageStore(workspace)
    manifest = synthetic_manifest(registry, {"warehouse": 30}, seed=11, store=store)
    manifest.save(workspace / "manifest.jsonl")
    return manifest
