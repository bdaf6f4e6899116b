import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from tnlcfrs.factored import FactoredGrammar  # noqa: E402
from tnlcfrs.grammar import ExplicitGrammar, GrammarDims  # noqa: E402


def concentrated_grammar():
    """S -> A, A -> T T, T -> w: the single sentence "w w" with probability 1."""
    dims = GrammarDims(1, 0, 1, 1)
    C1 = np.zeros((1, 2, 2))
    C1[0, 1, 1] = 1.0
    return ExplicitGrammar(dims, s=np.ones(1), C1=C1, D1=np.zeros((1, 2, 0)),
                           C2=np.zeros((0, 2, 2)), D2=np.zeros((0, 2, 0, 4)),
                           Q=np.ones((1, 1)))


def concentrated_factored():
    """The concentrated grammar as a rank-1 CPD (one fan-out-2 symbol, unused)."""
    dims = GrammarDims(1, 1, 1, 1)
    pre = np.array([[0.0], [1.0]])
    half = np.array([[0.5], [0.5]])
    return FactoredGrammar(
        dims, (1, 1, 1, 1),
        U1=np.ones((1, 1)), V1=pre, W1=pre,
        U2=np.zeros((1, 1)), V2=half, W2=np.ones((1, 1)),
        U3=np.ones((1, 1)), V3=pre, W3=pre,
        U4=np.zeros((1, 1)), V4=half, W4=np.ones((1, 1)),
        P=np.full((4, 1), 0.25), s=np.ones(1), Q=np.ones((1, 1)))


@pytest.fixture
def concentrated():
    return concentrated_grammar()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
