import pytest
import torch

from ditjscc.corpus import make_toy_corpus
from ditjscc.encoder import FrozenExtractor
from ditjscc.training import pretrain_extractor

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def corpus():
    return make_toy_corpus(7, 3000)


@pytest.fixture(scope="session")
def extractor(corpus):
    """Surrogate extractor pretrained briefly on the first 2400 images."""
    train, _ = corpus.split(600)
    torch.manual_seed(0)
    ext = FrozenExtractor()
    return pretrain_extractor(ext, train.tensor(), torch.from_numpy(train.labels), steps=600, seed=0)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
