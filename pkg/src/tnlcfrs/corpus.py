"""Treebank and text I/O, vocabularies, and unlabeled span evaluation.

Discbracket lines look like ``(S (VP 0=a 2=c) (NP 1=b))``: labels are bare
tokens and every terminal carries its sentence position, so a node's yield
may be discontinuous.  Written trees list children by their first position.
"""
from __future__ import annotations

import os
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .tree import DiscoTree, Node, blocks_from_positions

UNK = "<unk>"
MAX_EVAL_LEN = 40
_TOKEN = re.compile(r"\(|\)|[^\s()]+")


class DiscbracketError(ValueError):
    pass


# ---------------------------------------------------------------------------
# discbracket


def parse_discbracket(line, lineno=1):
    """Parse one tree; returns (words, DiscoTree)."""
    tokens = _TOKEN.findall(line)
    pos = 0
    nodes, words = [], {}

    def fail(msg):
        raise DiscbracketError(f"line {lineno}: {msg}")

    def node():
        nonlocal pos
        if pos >= len(tokens) or tokens[pos] != "(":
            fail("expected '('")
        pos += 1
        if pos >= len(tokens) or tokens[pos] in "()":
            fail("missing label")
        label = tokens[pos]
        pos += 1
        kids, positions = [], set()
        while pos < len(tokens) and tokens[pos] != ")":
            tok = tokens[pos]
            if tok == "(":
                k = node()
            else:
                idx, eq, word = tok.partition("=")
                if not eq or not idx.isdigit():
                    fail(f"bad terminal {tok!r}")
                i = int(idx)
                if i in words:
                    fail(f"duplicate index {i}")
                words[i] = word
                nodes.append(Node(label=word, kind="T", blocks=((i, i + 1),), word=word))
                k = len(nodes) - 1
                pos += 1
            kids.append(k)
            positions.update(p for a, b in nodes[k].blocks for p in range(a, b))
        if pos >= len(tokens):
            fail("unbalanced brackets")
        pos += 1
        if not kids:
            fail(f"node {label!r} has no children")
        nodes.append(Node(label=label, kind="phrase",
                          blocks=blocks_from_positions(positions), children=tuple(kids)))
        return len(nodes) - 1

    root = node()
    if pos != len(tokens):
        fail("trailing material after tree")
    n = len(words)
    if sorted(words) != list(range(n)):
        missing = sorted(set(range(max(words) + 1)) - set(words))
        fail(f"missing index {missing[0]}")
    sentence = tuple(words[i] for i in range(n))
    return sentence, DiscoTree(nodes=tuple(nodes), root=root, words=sentence)


def read_discbracket(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                out.append(parse_discbracket(line, lineno))
    return out


def _first(tree, idx):
    return tree.nodes[idx].blocks[0][0]


def format_discbracket(tree, words=None):
    """Canonical one-line rendering.

    Terminal leaves print as ``i=word``.  Trees without terminal leaves
    (decoder output) print their preterminal nodes as terminals, taking
    words from ``words``.
    """
    words = tuple(words if words is not None else tree.words)

    def term(i):
        return f"{i}={words[i] if i < len(words) else i}"

    def render(idx):
        n = tree.nodes[idx]
        if n.kind == "T":
            return term(n.blocks[0][0])
        if not n.children:
            return term(n.blocks[0][0])
        kids = sorted(n.children, key=lambda c: _first(tree, c))
        return "(" + " ".join([str(n.label)] + [render(c) for c in kids]) + ")"

    return render(tree.root)


def write_discbracket(path, trees, words=None, atomic=True):
    lines = []
    for k, tree in enumerate(trees):
        w = words[k] if words is not None else None
        lines.append(format_discbracket(tree, w) + "\n")
    payload = "".join(lines).encode("utf-8")
    if not atomic:
        with open(path, "wb") as f:
            f.write(payload)
        return
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def read_text(path):
    """One whitespace-tokenized sentence per line (blank lines kept as empty)."""
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f.read().splitlines()]


def strip_tokens(tree, drop_labels):
    """Remove terminals whose parent carries a label in ``drop_labels``.

    Positions are renumbered; nodes left without terminals disappear.
    """
    drop_labels = set(drop_labels)
    parent = {}
    for idx, n in enumerate(tree.nodes):
        for c in n.children:
            parent[c] = idx
    gone = {tree.nodes[i].blocks[0][0] for i, n in enumerate(tree.nodes)
            if n.kind == "T" and i in parent and tree.nodes[parent[i]].label in drop_labels}
    keep = [p for p in range(len(tree.words)) if p not in gone]
    remap = {p: k for k, p in enumerate(keep)}
    nodes = []

    def build(idx):
        n = tree.nodes[idx]
        if n.kind == "T":
            p = n.blocks[0][0]
            if p in gone:
                return None
            nodes.append(Node(label=n.label, kind="T", blocks=((remap[p], remap[p] + 1),),
                              word=n.word))
            return len(nodes) - 1
        kids = [k for k in (build(c) for c in n.children) if k is not None]
        if not kids:
            return None
        pos = {q for k in kids for a, b in nodes[k].blocks for q in range(a, b)}
        nodes.append(Node(label=n.label, kind=n.kind, blocks=blocks_from_positions(pos),
                          children=tuple(kids), rule=n.rule))
        return len(nodes) - 1

    root = build(tree.root)
    if root is None:
        return None
    words = tuple(tree.words[p] for p in keep)
    return DiscoTree(nodes=tuple(nodes), root=root, words=words)


# ---------------------------------------------------------------------------
# synthetic gold trees


def gold_from_sample(sample):
    """Labeled treebank tree for a sampled derivation.

    Labels: ``S``, ``NT1_k``, ``NT2_k``, ``PT_k``; words are ``w<id>``.
    """
    tree = sample.tree
    words = tuple(f"w{w}" for w in sample.sentence)
    prefix = {"S": "S", "N1": "NT1_", "N2": "NT2_", "P": "PT_"}
    nodes = []

    def build(idx):
        n = tree.nodes[idx]
        if n.kind == "P":
            i = n.blocks[0][0]
            nodes.append(Node(label=words[i], kind="T", blocks=n.blocks, word=words[i]))
            kids = (len(nodes) - 1,)
        else:
            kids = tuple(build(c) for c in n.children)
        label = "S" if n.kind == "S" else f"{prefix[n.kind]}{n.label}"
        nodes.append(Node(label=label, kind="phrase", blocks=n.blocks, children=kids))
        return len(nodes) - 1

    root = build(tree.root)
    return DiscoTree(nodes=tuple(nodes), root=root, words=words)


# ---------------------------------------------------------------------------
# vocabulary


@dataclass(frozen=True)
class Vocab:
    words: tuple                        # id -> word; id 0 is UNK

    def __post_init__(self):
        if not self.words or self.words[0] != UNK:
            raise ValueError("vocabulary must start with the UNK entry")
        object.__setattr__(self, "index", {w: i for i, w in enumerate(self.words)})

    def __len__(self):
        return len(self.words)

    @property
    def unk(self):
        return 0

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("".join(w + "\n" for w in self.words))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls(tuple(f.read().splitlines()))


def build_vocab(corpus, k=10000):
    """Top-``k`` words by frequency; ties go to the lexicographically smaller word."""
    counts = Counter(w for sent in corpus for w in sent)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts.pop(UNK, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return Vocab((UNK,) + tuple(w for w, _ in ranked))


def encode(vocab, tokens):
    return [vocab.index.get(t, vocab.unk) for t in tokens]


def decode(vocab, ids):
    return [vocab.words[i] for i in ids]


# ---------------------------------------------------------------------------
# spans and metrics


@dataclass(frozen=True)
class SpanSet:
    cont: frozenset                     # (i, j)
    disc: frozenset                     # (i, j, m, n)
    labeled: tuple = ()                 # (label, span) pairs
    dropped: int = 0                    # nodes of fan-out > 2

    def __len__(self):
        return len(self.cont) + len(self.disc)

    def all(self):
        return self.cont | self.disc


def spans_from_tree(tree, length=None):
    """Nontrivial spans of every non-terminal node.

    Single-word spans and the whole sentence are skipped, as are nodes with
    more than two blocks (counted in ``dropped``).
    """
    n = length if length is not None else tree.length
    cont, disc, labeled = set(), set(), []
    dropped = 0
    for node in tree.nodes:
        if node.kind == "T":
            continue
        b = node.blocks
        if len(b) == 1:
            (i, j), = b
            if j - i < 2 or (i == 0 and j == n):
                continue
            span = (i, j)
            cont.add(span)
        elif len(b) == 2:
            span = b[0] + b[1]
            disc.add(span)
        else:
            dropped += 1
            continue
        labeled.append((node.label, span))
    return SpanSet(frozenset(cont), frozenset(disc), tuple(labeled), dropped)


def _f1(match, gold, pred):
    if gold == 0 and pred == 0:
        return 100.0
    if match == 0:
        return 0.0
    p, r = match / pred, match / gold
    return 100.0 * 2 * p * r / (p + r)


def corpus_f1(golds, preds):
    """Micro-averaged unlabeled (F1, DF1); DF1 is None without gold discontinuous spans."""
    if len(golds) != len(preds):
        raise ValueError(f"{len(golds)} gold vs {len(preds)} predicted trees")
    m = g = p = dm = dg = dp = 0
    for gs, ps in zip(golds, preds):
        ga, pa = gs.all(), ps.all()
        m += len(ga & pa)
        g += len(ga)
        p += len(pa)
        dm += len(gs.disc & ps.disc)
        dg += len(gs.disc)
        dp += len(ps.disc)
    return _f1(m, g, p), (_f1(dm, dg, dp) if dg else None)


def recall_by_label(golds, preds):
    """Percentage of each label's gold spans found in the (unlabeled) predictions."""
    hit, total = Counter(), Counter()
    for gs, ps in zip(golds, preds):
        found = ps.all()
        for label, span in gs.labeled:
            total[label] += 1
            hit[label] += span in found
    return {lab: 100.0 * hit[lab] / total[lab] for lab in total}


def _binary_tree(n, split):
    """Unlabeled continuous binary tree; ``split(i, j)`` picks the split point."""
    nodes = []

    def build(i, j):
        if j - i == 1:
            nodes.append(Node(label="X", kind="P", blocks=((i, j),), rule="emit"))
            return len(nodes) - 1
        k = split(i, j)
        kids = (build(i, k), build(k, j))
        nodes.append(Node(label="X", kind="X", blocks=((i, j),), children=kids, rule="1a"))
        return len(nodes) - 1

    root = build(0, n)
    return DiscoTree(nodes=tuple(nodes), root=root)


def baseline_trees(sentences, kind, seed=0):
    """Left-branching, right-branching or uniformly random binary trees."""
    rng = np.random.default_rng(seed)
    splitters = {"left": lambda i, j: j - 1, "right": lambda i, j: i + 1,
                 "random": lambda i, j: int(rng.integers(i + 1, j))}
    if kind not in splitters:
        raise ValueError(f"unknown baseline {kind!r}")
    return [_binary_tree(len(s), splitters[kind]) if len(s) else None for s in sentences]


@dataclass
class EvalReport:
    f1: float
    df1: float | None
    sentences: int
    excluded: int
    dropped_spans: int
    recall: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=dict)

    def df1_text(self):
        return "n/a" if self.df1 is None else f"{self.df1:.2f}"


def evaluate(gold_trees, pred_trees, max_len=MAX_EVAL_LEN, baselines=(), seed=0):
    """Corpus F1/DF1 over sentences of at most ``max_len`` words.

    ``pred_trees`` entries that are falsy (parse failures) count as empty
    predictions.
    """
    if len(gold_trees) != len(pred_trees):
        raise ValueError(f"{len(gold_trees)} gold vs {len(pred_trees)} predicted trees")
    golds, preds, kept = [], [], []
    excluded = dropped = 0
    for gold, pred in zip(gold_trees, pred_trees):
        n = gold.length
        if n > max_len:
            excluded += 1
            continue
        gs = spans_from_tree(gold, n)
        dropped += gs.dropped
        golds.append(gs)
        preds.append(spans_from_tree(pred, n) if pred else SpanSet(frozenset(), frozenset()))
        kept.append(gold)
    f1, df1 = corpus_f1(golds, preds)
    report = EvalReport(f1, df1, len(golds), excluded, dropped, recall_by_label(golds, preds))
    for kind in baselines:
        trees = baseline_trees([range(g.length) for g in kept], kind, seed)
        base = [spans_from_tree(t, g.length) for t, g in zip(trees, kept)]
        report.baselines[kind] = corpus_f1(golds, base)
    return report

