"""Tensor-decomposed restricted LCFRS-2: unsupervised discontinuous constituency parsing."""

from .factored import FactoredGrammar, from_explicit, precompute, random_factored, validate_factors
from .grammar import ExplicitGrammar, GrammarDims, materialize, normalize_random, sample, validate
from .oracle import enumerate_derivations, inside_explicit, viterbi_explicit
from .rank import inside_rank, marginals, mbr_decode, parse_corpus

__all__ = [
    "ExplicitGrammar", "FactoredGrammar", "GrammarDims", "enumerate_derivations",
    "from_explicit", "inside_explicit", "inside_rank", "marginals", "materialize",
    "mbr_decode", "normalize_random", "parse_corpus", "precompute", "random_factored",
    "sample", "validate", "validate_factors", "viterbi_explicit",
]
