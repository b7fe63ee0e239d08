"""Model builders shared by the test modules."""

import numpy as np

from adaspec.distributions import Vocab
from adaspec.lm import TableModel, fit_kgram


def disagreement_pair(n: int, disagree):
    """Greedy k-gram pair whose disagreement set with the target is ``disagree``.

    Token ``i`` encodes position ``i`` (token 0 is the prompt), so both models
    are order-1 k-grams fitted on two-token corpora. The target walks
    ``0 -> 1 -> ... -> n``; the draft proposes token ``n + 1`` instead of
    ``i`` for every ``i`` in ``disagree``. EOS is ``n + 2`` and never greedy.
    """
    vocab = Vocab(n + 3, n + 2)
    wrong = n + 1
    target = fit_kgram([[i - 1, i] for i in range(1, n + 1)], 1, 1e-3, vocab)
    draft = fit_kgram([[i - 1, wrong if i in disagree else i] for i in range(1, n + 1)], 1, 1e-3, vocab)
    return target, draft


def eos_free_table(V: int, seed: int) -> TableModel:
    """Random order-1 table whose EOS column is zero."""
    rng = np.random.default_rng(seed)
    table = rng.dirichlet(np.ones(V), size=V + 1)
    table[:, V - 1] = 0.0
    return TableModel(Vocab(V, V - 1), table)
