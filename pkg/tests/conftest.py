import numpy as np
import pytest

from adaspec.distributions import Vocab
from adaspec.lm import TableModel, perturb, random_table_model


def markov(rows, eos=None):
    """Order-1 table model from a ``(V+1, V)`` row list (last row: first token)."""
    rows = np.asarray(rows, dtype=np.float64)
    V = rows.shape[1]
    return TableModel(Vocab(V, V - 1 if eos is None else eos), rows)


@pytest.fixture
def small_pair():
    rng = np.random.default_rng(11)
    vocab = Vocab(4, 3)
    target = random_table_model(vocab, 1, rng)
    draft = perturb(target, 0.3, 1.4)
    return target, draft


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
