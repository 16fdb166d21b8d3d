"""Reading, cleaning and writing Penn Treebank style bracketed trees, plus
closed vocabularies over words, tags and labels."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, TextIO

log = logging.getLogger(__name__)

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
MARKERS = (BOS, EOS, UNK)

NONE_LABEL = "-NONE-"
_TOKEN = re.compile(r"\(|\)|[^()\s]+")


class TreebankError(ValueError):
    """Malformed bracketed input."""


@dataclass
class Tree:
    label: str
    children: list[Tree] = field(default_factory=list)
    word: str | None = None
    # filled in by head percolation
    head: int | None = None
    headword: str | None = None
    headtag: str | None = None

    @property
    def is_leaf(self) -> bool:
        return self.word is not None

    def leaves(self) -> list[Tree]:
        if self.is_leaf:
            return [self]
        out = []
        for c in self.children:
            out.extend(c.leaves())
        return out

    def words(self) -> list[str]:
        return [leaf.word for leaf in self.leaves()]

    def tags(self) -> list[str]:
        return [leaf.label for leaf in self.leaves()]

    def internal_labels(self) -> Iterator[str]:
        if not self.is_leaf:
            yield self.label
            for c in self.children:
                yield from c.internal_labels()

    def __str__(self) -> str:
        if self.is_leaf:
            return f"({self.label} {self.word})"
        return "(%s %s)" % (self.label, " ".join(str(c) for c in self.children))


def _tokens(stream: Iterable[str]) -> Iterator[tuple[str, int]]:
    for lineno, line in enumerate(stream, 1):
        for m in _TOKEN.finditer(line):
            yield m.group(), lineno


def parse_brackets(stream: TextIO | str) -> Iterator[Tree]:
    """Yield raw trees, one per top-level s-expression.

    The empty-label wrapper used by the .mrg files, "( (S ...) )", is
    removed.
    """
    if isinstance(stream, str):
        stream = stream.splitlines()
    stack: list[list] = []  # frames: [label, children, word, open_line]
    expect_label = False
    for tok, lineno in _tokens(stream):
        if tok == "(":
            if stack and stack[-1][2] is not None:
                raise TreebankError(f"line {lineno}: bracket after terminal word")
            if expect_label:
                # "( (" : empty label
                stack[-1][0] = ""
            stack.append([None, [], None, lineno])
            expect_label = True
        elif tok == ")":
            if not stack:
                raise TreebankError(f"line {lineno}: unexpected ')'")
            if expect_label:
                raise TreebankError(f"line {lineno}: empty bracket '()'")
            label, children, word, _ = stack.pop()
            if word is not None:
                node = Tree(label, word=word)
            elif children:
                node = Tree(label, children)
            else:
                raise TreebankError(f"line {lineno}: node {label!r} has no children")
            if stack:
                stack[-1][1].append(node)
            else:
                if node.label == "" and len(node.children) == 1:
                    node = node.children[0]
                yield node
        else:
            if not stack:
                raise TreebankError(f"line {lineno}: token {tok!r} outside brackets")
            frame = stack[-1]
            if expect_label:
                frame[0] = tok
                expect_label = False
            elif frame[1] or frame[2] is not None:
                raise TreebankError(f"line {lineno}: unexpected token {tok!r}")
            else:
                frame[2] = tok
    if stack:
        raise TreebankError(f"line {stack[-1][3]}: unbalanced '(' (never closed)")


def strip_function_tags(label: str) -> str:
    """'NP-SBJ-1' -> 'NP', 'S=2' -> 'S'; '-NONE-', '-LRB-' are kept."""
    if label.startswith("-"):
        return label
    return re.split(r"[-=]", label, maxsplit=1)[0] or label


def clean_tree(tree: Tree, lowercase: bool = True) -> Tree | None:
    """Drop empty elements and function tags; None if nothing is left."""
    if tree.is_leaf:
        if tree.label == NONE_LABEL:
            return None
        word = tree.word.lower() if lowercase else tree.word
        return Tree(tree.label, word=word)
    children = [c for c in (clean_tree(c, lowercase) for c in tree.children) if c is not None]
    if not children:
        return None
    return Tree(strip_function_tags(tree.label), children)


def read_treebank(stream: TextIO | str, lowercase: bool = True, stats: dict | None = None) -> list[Tree]:
    """Parse and clean every tree in `stream`.

    Trees that are empty after cleaning are skipped; the count goes into
    ``stats['skipped']`` when a dict is given.
    """
    trees = []
    skipped = 0
    for raw in parse_brackets(stream):
        t = clean_tree(raw, lowercase)
        if t is None:
            skipped += 1
            log.warning("skipping tree that is empty after cleaning: %s", raw)
            continue
        trees.append(t)
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped
        stats["trees"] = stats.get("trees", 0) + len(trees)
    return trees


def read_treebank_files(paths: Iterable, lowercase: bool = True, stats: dict | None = None) -> list[Tree]:
    trees = []
    for p in paths:
        with open(p, encoding="utf-8") as f:
            try:
                trees.extend(read_treebank(f, lowercase, stats))
            except TreebankError as e:
                raise TreebankError(f"{p}: {e}") from None
    return trees


def write_treebank(trees: Iterable[Tree], out: TextIO) -> None:
    for t in trees:
        out.write(str(t))
        out.write("\n")


class Vocabulary:
    """Closed symbol table; unknown symbols map to the <unk> id when the
    vocabulary has one."""

    def __init__(self, symbols: Iterable[str] = (), counts: dict[str, int] | None = None,
                 specials: tuple[str, ...] = MARKERS):
        self.specials = tuple(specials)
        self.symbols: list[str] = []
        self.index: dict[str, int] = {}
        self.counts = dict(counts or {})
        for s in list(self.specials) + list(symbols):
            self.add(s)

    def add(self, symbol: str) -> int:
        if symbol not in self.index:
            self.index[symbol] = len(self.symbols)
            self.symbols.append(symbol)
        return self.index[symbol]

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.index

    def __iter__(self):
        return iter(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    @property
    def unk_id(self) -> int | None:
        return self.index.get(UNK)

    def id(self, symbol: str) -> int:
        i = self.index.get(symbol)
        if i is None:
            if self.unk_id is None:
                raise KeyError(symbol)
            return self.unk_id
        return i

    def ids(self, symbols: Iterable[str]) -> list[int]:
        return [self.id(s) for s in symbols]

    def symbol(self, i: int) -> str:
        return self.symbols[i]

    def write(self, out: TextIO) -> None:
        for i, s in enumerate(self.symbols):
            out.write(f"{s}\t{i}\t{self.counts.get(s, 0)}\n")

    @classmethod
    def read(cls, stream: TextIO) -> Vocabulary:
        rows = []
        for line in stream:
            line = line.rstrip("\n")
            if not line:
                continue
            sym, i, c = line.split("\t")
            rows.append((int(i), sym, int(c)))
        rows.sort()
        if [i for i, _, _ in rows] != list(range(len(rows))):
            raise ValueError("vocabulary ids are not contiguous from 0")
        v = cls(specials=())
        for _, sym, c in rows:
            v.add(sym)
            if c:
                v.counts[sym] = c
        v.specials = tuple(s for s in MARKERS if s in v)
        return v


def build_vocab(trees: Iterable[Tree], cap: int = 10_000) -> Vocabulary:
    """Keep the `cap` most frequent words, ties broken lexicographically."""
    if cap < 1:
        raise ValueError(f"vocabulary cap must be >= 1, got {cap}")
    counts = Counter()
    for t in trees:
        counts.update(t.words())
    for m in MARKERS:
        counts.pop(m, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    kept = [w for w, _ in ranked]
    return Vocabulary(kept, counts={w: c for w, c in ranked})


def build_label_vocab(labels: Iterable[str]) -> Vocabulary:
    """Sorted closed set of tags or NT labels (no markers)."""
    return Vocabulary(sorted(set(labels)), specials=())
