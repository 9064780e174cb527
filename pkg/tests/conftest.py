import pytest
import torch

from cycleflow.dataset import SyntheticSpec, generate_synthetic, synthetic_utterances

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic(SyntheticSpec(2, 2, 2, 2, 1, seed=7))


@pytest.fixture(scope="session")
def small_corpus(small_synth):
    """(utterances, speaker embedder) for the 16-utterance toy corpus."""
    return synthetic_utterances(small_synth)


@pytest.fixture(scope="session")
def small_utts(small_corpus):
    return small_corpus[0]


@pytest.fixture(scope="session")
def small_embedder(small_corpus):
    return small_corpus[1]


# -- acceptance summary ---------------------------------------------------------

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Callable recording one ``PASS``/``FAIL`` line per acceptance criterion."""
    def record(number, name, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name} -- {detail}"
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
