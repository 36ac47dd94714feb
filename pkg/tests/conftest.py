import pytest

from longssm.data import aggregate_visit, corpus_stats, truncate
from longssm.synth import GenProfile, generate


@pytest.fixture(scope="session")
def default_corpus_stats():
    """Statistics of 10k documents from the default generator profile."""
    docs, visits = [], []
    for visit, _ in generate(GenProfile(n_visits=10_000, seed=0)):
        docs.append(truncate(aggregate_visit(visit)))
        visits.append(visit)
    return corpus_stats(docs, visits)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
