import pytest

from builders import TINY_SPEC
from coattn_affect.synth import generate_synth


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    return generate_synth(TINY_SPEC, tmp_path_factory.mktemp("tiny"))


def pytest_terminal_summary(terminalreporter):
    import sys

    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
