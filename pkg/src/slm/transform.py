"""Headword percolation, binarization, label enrichment and the mapping
between binary trees and left-to-right constructor derivations.

A binarized constituent Z with children Y_1..Y_n and head Y_h becomes a
spine of binary nodes labeled Z' with the original label Z on top::

    (NP (DT the) (NNP dutch) (VBG publishing) (NN group))

    (NP_GROUP (DT the) (NP'_GROUP (NNP dutch)
                                  (NP'_GROUP (VBG publishing) (NN group))))

Enrichment then appends the label of the head child (``same``), of its
sibling (``opposite``) or of both to every internal label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, NamedTuple

from .treebank import Tree

SCHEMES = ("baseline", "same", "opposite", "both")
HEAD_LEFT_FIRST = "head-left-first"
HEAD_RIGHT_FIRST = "head-right-first"
PRIME = "'"

ADJOIN_LEFT = "L"
ADJOIN_RIGHT = "R"
NULL = "N"


class DerivationError(ValueError):
    pass


class HeadRules:
    """Per-parent head-finding passes, each a (direction, labels) pair."""

    DIRECTIONS = ("left", "right", "leftdis", "rightdis")

    def __init__(self, rules: dict[str, list[tuple[str, list[str]]]],
                 default: list[tuple[str, list[str]]] | None = None):
        self.rules = rules
        self.default = default or [("left", [])]

    @classmethod
    def parse(cls, lines: Iterable[str]) -> HeadRules:
        rules: dict[str, list] = {}
        for n, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2 or parts[1] not in cls.DIRECTIONS:
                raise ValueError(f"head rules line {n}: expected 'PARENT direction LABEL...'")
            rules.setdefault(parts[0], []).append((parts[1], parts[2:]))
        default = rules.pop("*", None)
        return cls(rules, default)

    @classmethod
    def load(cls, path=None) -> HeadRules:
        if path is None:
            text = resources.files("slm.data").joinpath("headrules.txt").read_text()
            return cls.parse(text.splitlines())
        with open(path, encoding="utf-8") as f:
            return cls.parse(f)

    def find(self, parent: str, children: list[str]) -> int:
        return find_head(parent, children, self)


def _match(pattern: str, label: str) -> bool:
    if pattern.endswith("*") and len(pattern) > 1:
        return label.startswith(pattern[:-1])
    return pattern == label


def find_head(parent: str, children: list[str], rules: HeadRules) -> int:
    """Index of the head child of ``parent -> children``."""
    if not children:
        raise ValueError("find_head needs at least one child")
    n = len(children)
    passes = rules.rules.get(parent, rules.default)
    for direction, priority in passes:
        order = range(n) if direction.startswith("left") else range(n - 1, -1, -1)
        if direction.endswith("dis"):
            for i in order:
                if any(_match(p, children[i]) for p in priority):
                    return i
        else:
            for p in priority:
                for i in order:
                    if _match(p, children[i]):
                        return i
    return 0 if passes[0][0].startswith("left") else n - 1


class BinarizationRules:
    def __init__(self, schemes: dict[str, str], default: str = HEAD_RIGHT_FIRST):
        for s in list(schemes.values()) + [default]:
            if s not in (HEAD_LEFT_FIRST, HEAD_RIGHT_FIRST):
                raise ValueError(f"unknown binarization scheme {s!r}")
        self.schemes = schemes
        self.default = default

    @classmethod
    def parse(cls, lines: Iterable[str]) -> BinarizationRules:
        schemes = {}
        for n, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"binarization rules line {n}: expected 'LABEL scheme'")
            schemes[parts[0]] = parts[1]
        default = schemes.pop("*", HEAD_RIGHT_FIRST)
        return cls(schemes, default)

    @classmethod
    def load(cls, path=None) -> BinarizationRules:
        if path is None:
            text = resources.files("slm.data").joinpath("binrules.txt").read_text()
            return cls.parse(text.splitlines())
        with open(path, encoding="utf-8") as f:
            return cls.parse(f)

    def scheme(self, label: str) -> str:
        return self.schemes.get(label, self.default)


def percolate(tree: Tree, rules: HeadRules) -> Tree:
    """Copy of `tree` with head, headword and headtag set on every node."""
    if tree.is_leaf:
        return Tree(tree.label, word=tree.word, headword=tree.word, headtag=tree.label)
    children = [percolate(c, rules) for c in tree.children]
    h = rules.find(tree.label, [c.label for c in children])
    return Tree(tree.label, children, head=h,
                headword=children[h].headword, headtag=children[h].headtag)


@dataclass
class BinNode:
    """Node of a binarized tree. Leaves have no children and their label is
    the POS tag; internal nodes have one or two children and `head` is the
    index of the child the headword comes from."""

    label: str
    headword: str
    headtag: str
    children: tuple = ()
    head: int = 0

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def word(self) -> str:
        return self.headword

    def leaves(self) -> list[BinNode]:
        if self.is_leaf:
            return [self]
        out = []
        for c in self.children:
            out.extend(c.leaves())
        return out

    def internal_nodes(self):
        if not self.is_leaf:
            yield self
            for c in self.children:
                yield from c.internal_nodes()

    def __str__(self) -> str:
        return display(self)


def leaf(word: str, tag: str) -> BinNode:
    return BinNode(tag, word, tag)


def join(label: str, left: BinNode, right: BinNode, head: int) -> BinNode:
    h = (left, right)[head]
    return BinNode(label, h.headword, h.headtag, (left, right), head)


def binarize(tree: Tree, rules: BinarizationRules) -> BinNode:
    """Binarize a head-annotated tree (see :func:`percolate`)."""
    if tree.is_leaf:
        return leaf(tree.word, tree.label)
    if tree.head is None:
        raise ValueError("binarize needs a head-annotated tree; run percolate first")
    kids = [binarize(c, rules) for c in tree.children]
    z, h = tree.label, tree.head
    if len(kids) == 1:
        return BinNode(z, kids[0].headword, kids[0].headtag, (kids[0],), 0)
    if len(kids) == 2:
        return join(z, kids[0], kids[1], h)

    cur = kids[h]
    left = [(kids[j], "left") for j in range(h - 1, -1, -1)]
    right = [(kids[j], "right") for j in range(h + 1, len(kids))]
    order = right + left if rules.scheme(z) == HEAD_RIGHT_FIRST else left + right
    for i, (sib, side) in enumerate(order):
        label = z if i == len(order) - 1 else z + PRIME
        if side == "left":
            cur = join(label, sib, cur, 1)
        else:
            cur = join(label, cur, sib, 0)
    return cur


def enrich(node: BinNode, scheme: str) -> BinNode:
    """Rewrite internal labels under `scheme`.

    New labels are computed from the children's labels as they were before
    enrichment; unary nodes use their only child for every scheme.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown enrichment scheme {scheme!r}")
    if scheme == "baseline" or node.is_leaf:
        return node
    kids = tuple(enrich(c, scheme) for c in node.children)
    if len(node.children) == 1:
        label = f"{node.label}+{node.children[0].label}"
    else:
        head = node.children[node.head].label
        sib = node.children[1 - node.head].label
        label = {
            "same": f"{node.label}+{head}",
            "opposite": f"{node.label}+{sib}",
            "both": f"{node.label}+{head}+{sib}",
        }[scheme]
    return BinNode(label, node.headword, node.headtag, kids, node.head)


def collapse_unary(node: BinNode) -> BinNode:
    """Remove unary nodes. A unary chain over an internal node keeps the
    topmost label; a unary chain over a leaf collapses onto the leaf."""
    if node.is_leaf:
        return node
    if len(node.children) == 1:
        child = collapse_unary(node.children[0])
        if child.is_leaf:
            return child
        return BinNode(node.label, child.headword, child.headtag, child.children, child.head)
    kids = tuple(collapse_unary(c) for c in node.children)
    return BinNode(node.label, node.headword, node.headtag, kids, node.head)


def base_label(label: str) -> str:
    return label.split("+", 1)[0]


def display(node: BinNode) -> str:
    """One-line bracketed form with internal labels as LABEL_HEADWORD."""
    if node.is_leaf:
        return f"({node.label} {node.headword})"
    inner = " ".join(display(c) for c in node.children)
    return f"({node.label}_{node.headword.upper()} {inner})"


def transform_tree(tree: Tree, head_rules: HeadRules, bin_rules: BinarizationRules,
                   scheme: str = "baseline") -> BinNode:
    """Full preprocessing chain: percolate, binarize, enrich, collapse unaries."""
    return collapse_unary(enrich(binarize(percolate(tree, head_rules), bin_rules), scheme))


def nt_labels(trees: Iterable[BinNode]) -> set[str]:
    out = set()
    for t in trees:
        out.update(n.label for n in t.internal_nodes())
    return out


class ConstructorOp(NamedTuple):
    kind: str
    label: str = ""

    def __str__(self) -> str:
        return NULL if self.kind == NULL else f"{self.kind}:{self.label}"

    @classmethod
    def parse(cls, text: str) -> ConstructorOp:
        if text == NULL:
            return NULL_OP
        kind, label = text.split(":", 1)
        if kind not in (ADJOIN_LEFT, ADJOIN_RIGHT) or not label:
            raise ValueError(f"bad constructor op {text!r}")
        return cls(kind, label)

    @property
    def is_null(self) -> bool:
        return self.kind == NULL


NULL_OP = ConstructorOp(NULL)


def adjoin_left(label: str) -> ConstructorOp:
    return ConstructorOp(ADJOIN_LEFT, label)


def adjoin_right(label: str) -> ConstructorOp:
    return ConstructorOp(ADJOIN_RIGHT, label)


def op_vocabulary(labels: Iterable[str]) -> list[ConstructorOp]:
    """Null, then adjoin-left and adjoin-right over the sorted labels. This
    order is also the decoder's tie-break among equal scores."""
    labs = sorted(set(labels))
    return [NULL_OP] + [adjoin_left(x) for x in labs] + [adjoin_right(x) for x in labs]


@dataclass
class Step:
    word: str
    tag: str
    ops: list = field(default_factory=list)


@dataclass
class Derivation:
    """Per-word (word, tag, ops) steps. `final` holds adjoins applied after
    the sentence-end marker; it is empty for derivations read off gold
    trees, which are already complete at the last word."""

    steps: list
    final: list = field(default_factory=list)

    @property
    def words(self) -> list[str]:
        return [s.word for s in self.steps]

    @property
    def tags(self) -> list[str]:
        return [s.tag for s in self.steps]

    def all_ops(self) -> list[ConstructorOp]:
        return [op for s in self.steps for op in s.ops] + list(self.final)


def tree_to_derivation(root: BinNode) -> Derivation:
    steps: list[Step] = []

    def visit(node):
        if node.is_leaf:
            steps.append(Step(node.headword, node.label))
            return
        if len(node.children) != 2:
            raise DerivationError(
                f"node {node.label!r} has {len(node.children)} children; "
                "derivations need a binary tree with unaries collapsed")
        visit(node.children[0])
        visit(node.children[1])
        kind = ADJOIN_LEFT if node.head == 0 else ADJOIN_RIGHT
        steps[-1].ops.append(ConstructorOp(kind, node.label))

    visit(root)
    for s in steps:
        s.ops.append(NULL_OP)
    return Derivation(steps)


def _apply(stack: list, op: ConstructorOp) -> None:
    if len(stack) < 2:
        raise DerivationError(f"{op} needs two exposed heads, have {len(stack)}")
    right = stack.pop()
    left = stack.pop()
    stack.append(join(op.label, left, right, 0 if op.kind == ADJOIN_LEFT else 1))


def derivation_to_tree(d: Derivation) -> BinNode:
    stack: list[BinNode] = []
    for k, step in enumerate(d.steps):
        stack.append(leaf(step.word, step.tag))
        if not step.ops or not step.ops[-1].is_null:
            raise DerivationError(f"position {k + 1}: op list must end with null")
        for op in step.ops[:-1]:
            if op.is_null:
                raise DerivationError(f"position {k + 1}: null before the end of the op list")
            _apply(stack, op)
    for op in d.final:
        if op.is_null:
            raise DerivationError("null op after the sentence end")
        _apply(stack, op)
    if len(stack) != 1:
        raise DerivationError(f"derivation leaves {len(stack)} exposed heads, expected 1")
    return stack[0]
