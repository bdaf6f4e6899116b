"""Derivation trees whose nodes dominate one or two contiguous blocks."""
from __future__ import annotations

from dataclasses import dataclass, field

# rule tags in tie-breaking order
RULE_ORDER = ("start", "1a", "1b", "2a", "2b", "2c", "2d", "2e", "emit")


class TreeError(ValueError):
    """Structurally invalid tree."""


@dataclass(frozen=True)
class Node:
    label: object
    kind: str
    blocks: tuple
    children: tuple = ()
    rule: str | None = None
    word: object = None

    @property
    def fanout(self):
        return len(self.blocks)

    @property
    def is_terminal(self):
        return self.kind == "T"


@dataclass(frozen=True)
class DiscoTree:
    """A tree stored as a flat node table; ``root`` indexes into ``nodes``.

    Node kinds: ``S`` (start), ``N1``/``N2`` (fan-out one/two nonterminals),
    ``P`` (preterminal), ``X`` (unlabeled MBR node), ``phrase`` (treebank
    node) and ``T`` (terminal leaf read from a treebank file).
    """

    nodes: tuple
    root: int
    words: tuple = field(default=())

    def __len__(self):
        return len(self.nodes)

    @property
    def length(self):
        return sum(j - i for i, j in self.nodes[self.root].blocks)

    def iter_postorder(self, start=None):
        stack = [(self.root if start is None else start, False)]
        while stack:
            idx, done = stack.pop()
            if done:
                yield idx
                continue
            stack.append((idx, True))
            for c in reversed(self.nodes[idx].children):
                stack.append((c, False))

    def leaves(self):
        return [i for i, n in enumerate(self.nodes) if not n.children]

    def constituents(self):
        """Block tuples of every non-terminal node, in node order."""
        return [n.blocks for n in self.nodes if n.kind != "T"]

    def validate(self):
        """Raise TreeError if block bookkeeping is inconsistent."""
        for idx in self.iter_postorder():
            node = self.nodes[idx]
            prev = None
            for i, j in node.blocks:
                if not i < j:
                    raise TreeError(f"node {idx}: empty block {(i, j)}")
                if prev is not None and not prev < i:
                    raise TreeError(f"node {idx}: blocks not disjoint/ordered "
                                    f"{node.blocks}")
                prev = j
            if node.children:
                pos = sorted(p for c in node.children
                             for a, b in self.nodes[c].blocks
                             for p in range(a, b))
                mine = [p for a, b in node.blocks for p in range(a, b)]
                if pos != mine:
                    raise TreeError(f"node {idx}: blocks {node.blocks} differ "
                                    f"from children's yield")
        return True

    def to_nested(self, idx=None):
        idx = self.root if idx is None else idx
        n = self.nodes[idx]
        return (n.rule, n.label, n.blocks,
                tuple(self.to_nested(c) for c in n.children))


def blocks_from_positions(positions):
    """Merge a set of integer positions into maximal half-open intervals."""
    out = []
    for p in sorted(positions):
        if out and out[-1][1] == p:
            out[-1][1] = p + 1
        else:
            out.append([p, p + 1])
    return tuple((a, b) for a, b in out)


_KIND_OF_RULE = {"start": "S", "1a": "N1", "2a": "N1", "1b": "N2", "2b": "N2",
                 "2c": "N2", "2d": "N2", "2e": "N2", "emit": "P"}


def tree_from_nested(nested, words=()):
    """Build a DiscoTree from ``(rule, label, blocks, children)`` tuples.

    For ``emit`` leaves the children tuple is empty.
    """
    nodes = []

    def build(item):
        rule, label, blocks, children = item
        kids = tuple(build(c) for c in children)
        nodes.append(Node(label=label, kind=_KIND_OF_RULE.get(rule, "X"),
                          blocks=tuple(tuple(b) for b in blocks),
                          children=kids, rule=rule))
        return len(nodes) - 1

    root = build(nested)
    return DiscoTree(nodes=tuple(nodes), root=root, words=tuple(words))
