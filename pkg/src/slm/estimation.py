"""Deleted-interpolation estimation for the three SLM components and the
trigram baseline.

Every component is a :class:`DIModel`: a chain of progressively coarser
contexts, each a projection of one full context tuple, recursively mixed

    p_l(o | c) = lam_l(b) * f_l(o | c_l) + (1 - lam_l(b)) * p_{l+1}(o | c)

down to a uniform distribution over the outcome space. ``f_l`` is the
relative frequency at level ``l`` and ``b = floor(log2(count(c_l) + 1))``.
Levels whose context was never seen get no weight at all.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, TextIO

import numpy as np

from .transform import ADJOIN_LEFT, ConstructorOp, Derivation, DerivationError, op_vocabulary
from .treebank import BOS, EOS, Vocabulary

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_WEIGHT = 0.5
MAX_WEIGHT = 1.0 - 1e-6
EM_TOL = 1e-6
EM_MAX_ITER = 100

BOS_TAG = "SB"
EOS_TAG = "SE"
PAD_WORD = -1
PAD_LABEL = "<pad>"
PAD = (PAD_WORD, PAD_LABEL)

HEAD_FEATURES = ("h0.word", "h0.label", "h1.word", "h1.label")
TAGGER_FEATURES = ("w", "h0.label", "h1.label")
TRIGRAM_FEATURES = ("w1", "w2")

# back-off chains, most specific first; indices into the full context
HEAD_CHAIN = ((0, 1, 2, 3), (0, 1, 3), (0, 1), (1,), ())
TAGGER_CHAIN = ((0, 1, 2), (0, 1), (0,), ())
TRIGRAM_CHAIN = ((0, 1), (0,), ())
# predictor chain under which the SLM reduces to a trigram model
HEADWORD_TRIGRAM_CHAIN = ((0, 2), (0,), ())

_WORD_FEATURES = {"h0.word", "h1.word", "w", "w1", "w2"}


def bucket(count: float) -> int:
    return int(math.floor(math.log2(count + 1.0)))


class DIModel:
    """Deleted-interpolation conditional model over a fixed outcome space."""

    def __init__(self, name: str, features: tuple[str, ...], levels, n_outcomes: int,
                 outcome_type: str = "word"):
        self.name = name
        self.features = tuple(features)
        self.levels = tuple(tuple(lv) for lv in levels)
        self.n_outcomes = n_outcomes
        self.outcome_type = outcome_type
        self.counts: list[dict] = [{} for _ in self.levels]
        self.totals: list[dict] = [{} for _ in self.levels]
        self.weights: list[dict] = [{} for _ in self.levels]

    def empty_copy(self) -> DIModel:
        return DIModel(self.name, self.features, self.levels, self.n_outcomes, self.outcome_type)

    def project(self, ctx: tuple, level: int) -> tuple:
        return tuple(ctx[i] for i in self.levels[level])

    def add(self, ctx: tuple, outcome, count: float = 1.0) -> None:
        for lv in range(len(self.levels)):
            c = self.project(ctx, lv)
            table = self.counts[lv].get(c)
            if table is None:
                table = self.counts[lv][c] = {}
            table[outcome] = table.get(outcome, 0.0) + count
            self.totals[lv][c] = self.totals[lv].get(c, 0.0) + count

    def merge(self, other: DIModel) -> None:
        """Add the counts of `other` (same layout) into this model."""
        for lv in range(len(self.levels)):
            for c, table in other.counts[lv].items():
                mine = self.counts[lv].setdefault(c, {})
                for o, n in table.items():
                    mine[o] = mine.get(o, 0.0) + n
                self.totals[lv][c] = self.totals[lv].get(c, 0.0) + other.totals[lv][c]

    def weight(self, level: int, total: float) -> float:
        if not total:
            return 0.0
        return self.weights[level].get(bucket(total), DEFAULT_WEIGHT)

    def _chain(self, ctx: tuple):
        """(lambda, table, total) per level; lambda is 0 for unseen contexts."""
        out = []
        for lv in range(len(self.levels)):
            c = tuple(ctx[i] for i in self.levels[lv])
            tot = self.totals[lv].get(c)
            if tot:
                out.append((self.weight(lv, tot), self.counts[lv][c], tot))
            else:
                out.append((0.0, None, 0.0))
        return out

    def prob(self, ctx: tuple, outcome) -> float:
        p = 1.0 / self.n_outcomes
        for lam, table, tot in reversed(self._chain(ctx)):
            if lam:
                p = lam * table.get(outcome, 0.0) / tot + (1.0 - lam) * p
        return p

    def distribution(self, ctx: tuple) -> tuple[dict, float]:
        """Probabilities of every outcome seen at some level of `ctx`, and the
        probability shared by all other outcomes."""
        seen: dict = {}
        reach = 1.0
        for lam, table, tot in self._chain(ctx):
            if not lam:
                continue
            w = reach * lam / tot
            for o, n in table.items():
                seen[o] = seen.get(o, 0.0) + w * n
            reach *= 1.0 - lam
        floor = reach / self.n_outcomes
        for o in seen:
            seen[o] += floor
        return seen, floor

    def set_fixed_weights(self, value: float = DEFAULT_WEIGHT) -> None:
        self.weights = [{} for _ in self.levels]
        for lv in range(len(self.levels)):
            for tot in self.totals[lv].values():
                self.weights[lv][bucket(tot)] = value

    def fit_weights(self, events: Iterable[tuple], tol: float = EM_TOL,
                    max_iter: int = EM_MAX_ITER) -> list[float]:
        """EM for the bucketed weights on held-out ``(ctx, outcome[, weight])``
        events. Returns the held-out log-likelihood before each update and
        after the last one. Buckets absent from the held-out data keep
        ``DEFAULT_WEIGHT``."""
        L = len(self.levels)
        F, B, W = [], [], []
        for ev in events:
            ctx, o = ev[0], ev[1]
            wt = ev[2] if len(ev) > 2 else 1.0
            frow, brow = [], []
            for lv in range(L):
                c = self.project(ctx, lv)
                tot = self.totals[lv].get(c)
                if tot:
                    frow.append(self.counts[lv][c].get(o, 0.0) / tot)
                    brow.append(bucket(tot))
                else:
                    frow.append(0.0)
                    brow.append(-1)
            F.append(frow)
            B.append(brow)
            W.append(wt)
        self.weights = [{} for _ in self.levels]
        if not F or L == 0:
            return []
        F = np.asarray(F, dtype=float)
        B = np.asarray(B, dtype=int)
        W = np.asarray(W, dtype=float)
        nb = int(B.max()) + 1 if B.max() >= 0 else 1
        lam = np.full((L, nb), DEFAULT_WEIGHT)
        seen = B >= 0
        u = 1.0 / self.n_outcomes
        trace = []
        prev = None
        for it in range(max_iter + 1):
            lam_ev = np.where(seen, lam[np.arange(L)[None, :], np.maximum(B, 0)], 0.0)
            reach = np.ones(len(F))
            comp = np.empty_like(F)
            for lv in range(L):
                comp[:, lv] = reach * lam_ev[:, lv] * F[:, lv]
                reach = reach * (1.0 - lam_ev[:, lv])
            floor = reach * u
            P = comp.sum(axis=1) + floor
            ll = float(np.dot(W, np.log(P)))
            trace.append(ll)
            if prev is not None and abs(ll - prev) <= tol * abs(prev):
                break
            if it == max_iter:
                break
            prev = ll
            post = comp / P[:, None]
            # P(component index >= l): mass at or below level l
            tail = np.cumsum(post[:, ::-1], axis=1)[:, ::-1] + (floor / P)[:, None]
            new = lam.copy()
            for lv in range(L):
                m = seen[:, lv]
                if not m.any():
                    continue
                num = np.bincount(B[m, lv], weights=W[m] * post[m, lv], minlength=nb)
                den = np.bincount(B[m, lv], weights=W[m] * tail[m, lv], minlength=nb)
                ok = den > 0
                new[lv, ok] = np.clip(num[ok] / den[ok], 0.0, MAX_WEIGHT)
            lam = new
        for lv in range(L):
            for b in np.unique(B[seen[:, lv], lv]):
                self.weights[lv][int(b)] = float(lam[lv, b])
        return trace

    # serialization

    def _feature_codec(self, i: int):
        return int if self.features[i] in _WORD_FEATURES else str

    def _outcome_str(self, o) -> str:
        return str(o)

    def _outcome_parse(self, s: str):
        if self.outcome_type == "word":
            return int(s)
        if self.outcome_type == "op":
            return ConstructorOp.parse(s)
        return s

    def dump(self, out: TextIO) -> None:
        out.write(f"component {self.name}\n")
        out.write("features " + " ".join(self.features) + "\n")
        out.write("levels " + " | ".join(",".join(map(str, lv)) for lv in self.levels) + "\n")
        out.write(f"outcomes {self.outcome_type} {self.n_outcomes}\n")
        for lv in range(len(self.levels)):
            for b in sorted(self.weights[lv]):
                out.write(f"weight {lv} {b} {self.weights[lv][b]!r}\n")
        for lv in range(len(self.levels)):
            recs = []
            for c, table in self.counts[lv].items():
                for o, n in table.items():
                    recs.append((c, self._outcome_str(o), n))
            recs.sort(key=lambda r: (tuple((type(x) is str, x) for x in r[0]), r[1]))
            for c, os_, n in recs:
                out.write("\t".join([f"count {lv}", *map(str, c), os_, repr(n)]) + "\n")
        out.write("end\n")

    @classmethod
    def load(cls, lines: Iterator[str]) -> DIModel:
        def expect(prefix):
            line = next(lines).rstrip("\n")
            if not line.startswith(prefix + " "):
                raise ValueError(f"model file: expected {prefix!r}, got {line[:40]!r}")
            return line[len(prefix) + 1:]

        name = expect("component")
        features = tuple(expect("features").split())
        lv_text = expect("levels")
        levels = tuple(tuple(int(x) for x in part.strip().split(",") if x)
                       for part in lv_text.split("|"))
        otype, n = expect("outcomes").split()
        m = cls(name, features, levels, int(n), otype)
        for line in lines:
            line = line.rstrip("\n")
            if line == "end":
                return m
            if line.startswith("weight "):
                _, lv, b, v = line.split()
                m.weights[int(lv)][int(b)] = float(v)
            elif line.startswith("count "):
                parts = line[len("count "):].split("\t")
                lv = int(parts[0])
                proj = m.levels[lv]
                c = tuple(m._feature_codec(proj[j])(x) for j, x in enumerate(parts[1:1 + len(proj)]))
                o = m._outcome_parse(parts[1 + len(proj)])
                cnt = float(parts[2 + len(proj)])
                m.counts[lv].setdefault(c, {})[o] = cnt
                m.totals[lv][c] = m.totals[lv].get(c, 0.0) + cnt
            else:
                raise ValueError(f"model file: unexpected line {line[:40]!r}")
        raise ValueError("model file: missing 'end'")


@dataclass
class Event:
    component: str  # "word" | "tag" | "op"
    ctx: tuple
    outcome: object


def head_context(h0: tuple, h1: tuple) -> tuple:
    return (h0[0], h0[1], h1[0], h1[1])


def top_two(stack: list) -> tuple:
    return stack[-1], (stack[-2] if len(stack) > 1 else PAD)


def reduce_heads(stack: list, op: ConstructorOp) -> None:
    right = stack.pop()
    left = stack.pop()
    word = left[0] if op.kind == ADJOIN_LEFT else right[0]
    stack.append((word, op.label))


def derivation_events(d: Derivation, words: Vocabulary) -> Iterator[Event]:
    """Replay a derivation on the exposed-head stack and yield one event per
    model decision. Null ops forced by the stack discipline (fewer than two
    heads above <s>) carry no choice and are not emitted."""
    stack = [(words.id(BOS), BOS_TAG)]
    for k, step in enumerate(d.steps):
        w = words.id(step.word)
        h0, h1 = top_two(stack)
        yield Event("word", head_context(h0, h1), w)
        yield Event("tag", (w, h0[1], h1[1]), step.tag)
        stack.append((w, step.tag))
        if not step.ops or not step.ops[-1].is_null:
            raise DerivationError(f"position {k + 1}: op list must end with null")
        for op in step.ops:
            if len(stack) - 1 >= 2:
                h0, h1 = top_two(stack)
                yield Event("op", head_context(h0, h1), op)
            elif not op.is_null:
                raise DerivationError(f"position {k + 1}: {op} with fewer than two heads")
            if op.is_null:
                break
            reduce_heads(stack, op)
    h0, h1 = top_two(stack)
    yield Event("word", head_context(h0, h1), words.id(EOS))
    for op in d.final:
        if op.is_null or len(stack) - 1 < 2:
            raise DerivationError(f"illegal completion op {op}")
        h0, h1 = top_two(stack)
        yield Event("op", head_context(h0, h1), op)
        reduce_heads(stack, op)


class SLM:
    """WORD-PREDICTOR, TAGGER and CONSTRUCTOR over shared vocabularies.

    Exposed heads are ``(word_id, label)`` pairs; the stack bottom is
    ``(<s>, SB)`` and a missing ``h_{-1}`` is the pad head.
    """

    def __init__(self, words: Vocabulary, tags: Iterable[str], nts: Iterable[str],
                 predictor_chain=HEAD_CHAIN, tagger_chain=TAGGER_CHAIN,
                 constructor_chain=HEAD_CHAIN):
        self.words = words
        self.tags = sorted(set(tags))
        self.nts = sorted(set(nts))
        self.ops = op_vocabulary(self.nts)
        self.bos = words.id(BOS)
        self.eos = words.id(EOS)
        self.predictor = DIModel("predictor", HEAD_FEATURES, predictor_chain, len(words) - 1, "word")
        self.tagger = DIModel("tagger", TAGGER_FEATURES, tagger_chain, max(len(self.tags), 1), "label")
        self.constructor = DIModel("constructor", HEAD_FEATURES, constructor_chain, len(self.ops), "op")
        self.meta: dict[str, str] = {}  # free-form provenance (scheme, EM iteration)

    @property
    def components(self) -> dict[str, DIModel]:
        return {"word": self.predictor, "tag": self.tagger, "op": self.constructor}

    @property
    def bos_head(self) -> tuple:
        return (self.bos, BOS_TAG)

    def empty_copy(self) -> SLM:
        m = SLM.__new__(SLM)
        m.__dict__.update(self.__dict__)
        m.meta = dict(self.meta)
        m.predictor = self.predictor.empty_copy()
        m.tagger = self.tagger.empty_copy()
        m.constructor = self.constructor.empty_copy()
        return m

    def word_ids(self) -> range:
        """Predictable word ids: everything except <s>."""
        return range(1, len(self.words))

    def p_word(self, h0: tuple, h1: tuple, w: int) -> float:
        return self.predictor.prob(head_context(h0, h1), w)

    def p_tag(self, w: int, h0: tuple, h1: tuple, t: str) -> float:
        return self.tagger.prob((w, h0[1], h1[1]), t)

    def p_op(self, h0: tuple, h1: tuple, op: ConstructorOp) -> float:
        return self.constructor.prob(head_context(h0, h1), op)

    def accumulate(self, derivations: Iterable[Derivation], weight: float = 1.0) -> None:
        comps = self.components
        for i, d in enumerate(derivations):
            try:
                events = list(derivation_events(d, self.words))
            except DerivationError as e:
                raise DerivationError(f"sentence {i}: {e}") from None
            for ev in events:
                comps[ev.component].add(ev.ctx, ev.outcome, weight)

    def merge(self, other: SLM) -> None:
        for key, comp in self.components.items():
            comp.merge(other.components[key])

    def estimate_weights(self, heldout: Iterable[Derivation] | None,
                         weighted: Iterable[tuple[Derivation, float]] | None = None) -> bool:
        """Fit interpolation weights on held-out derivations (optionally with
        per-derivation weights). Falls back to fixed weights, returning
        False, when there is no held-out data."""
        events = {k: [] for k in self.components}
        pairs = [(d, 1.0) for d in heldout or ()]
        pairs.extend(weighted or ())
        for d, wt in pairs:
            for ev in derivation_events(d, self.words):
                events[ev.component].append((ev.ctx, ev.outcome, wt))
        if not any(events.values()):
            log.warning("no held-out data; using fixed interpolation weights %.2f", DEFAULT_WEIGHT)
            for comp in self.components.values():
                comp.set_fixed_weights()
            return False
        for key, comp in self.components.items():
            comp.fit_weights(events[key])
        return True

    def dumps(self) -> str:
        out = io.StringIO()
        self.dump(out)
        return out.getvalue()

    def dump(self, out: TextIO) -> None:
        out.write(f"slm-model {FORMAT_VERSION}\n")
        out.write("meta" + "".join(f" {k}={v}" for k, v in sorted(self.meta.items())) + "\n")
        out.write("words " + " ".join(self.words.symbols) + "\n")
        out.write("tags " + " ".join(self.tags) + "\n")
        out.write("nts " + " ".join(self.nts) + "\n")
        for comp in self.components.values():
            comp.dump(out)

    @classmethod
    def load(cls, stream: TextIO) -> SLM:
        lines = iter(stream)
        head = next(lines).split()
        if head[:1] != ["slm-model"] or int(head[1]) != FORMAT_VERSION:
            raise ValueError("not an slm-model file of a supported version")
        meta = dict(kv.split("=", 1) for kv in next(lines).split()[1:])
        words = Vocabulary(next(lines).split()[1:], specials=())
        tags = next(lines).split()[1:]
        nts = next(lines).split()[1:]
        m = cls(words, tags, nts)
        m.meta = meta
        m.predictor = DIModel.load(lines)
        m.tagger = DIModel.load(lines)
        m.constructor = DIModel.load(lines)
        return m


def trigram_events(words: list[int], bos: int, eos: int) -> Iterator[tuple]:
    w1, w2 = bos, PAD_WORD
    for w in list(words) + [eos]:
        yield (w1, w2), w
        w1, w2 = w, w1


class Trigram:
    """Deleted-interpolation trigram: (w-1, w-2) -> (w-1) -> () -> uniform."""

    def __init__(self, words: Vocabulary, chain=TRIGRAM_CHAIN):
        self.words = words
        self.bos = words.id(BOS)
        self.eos = words.id(EOS)
        self.model = DIModel("trigram", TRIGRAM_FEATURES, chain, len(words) - 1, "word")

    def add(self, sentence: list[int], weight: float = 1.0) -> None:
        for ctx, w in trigram_events(sentence, self.bos, self.eos):
            self.model.add(ctx, w, weight)

    def prob(self, w2: int, w1: int, w: int) -> float:
        return self.model.prob((w1, w2), w)

    def sentence_probs(self, sentence: list[int]) -> list[float]:
        return [self.model.prob(ctx, w) for ctx, w in trigram_events(sentence, self.bos, self.eos)]

    def dumps(self) -> str:
        out = io.StringIO()
        self.dump(out)
        return out.getvalue()

    def dump(self, out: TextIO) -> None:
        out.write(f"trigram-model {FORMAT_VERSION}\n")
        out.write("words " + " ".join(self.words.symbols) + "\n")
        self.model.dump(out)

    @classmethod
    def load(cls, stream: TextIO) -> Trigram:
        lines = iter(stream)
        head = next(lines).split()
        if head[:1] != ["trigram-model"] or int(head[1]) != FORMAT_VERSION:
            raise ValueError("not a trigram-model file of a supported version")
        words = Vocabulary(next(lines).split()[1:], specials=())
        t = cls(words)
        t.model = DIModel.load(lines)
        return t


def train_trigram(sentences: Iterable[list[int]], words: Vocabulary,
                  heldout: Iterable[list[int]] | None = None) -> Trigram:
    t = Trigram(words)
    for s in sentences:
        t.add(s)
    events = [ev for s in heldout or () for ev in trigram_events(s, t.bos, t.eos)]
    if events:
        t.model.fit_weights(events)
    else:
        log.warning("no held-out data for the trigram; using fixed weights")
        t.model.set_fixed_weights()
    return t


def p_trigram(model: Trigram, w2: int, w1: int, w: int) -> float:
    return model.prob(w2, w1, w)


def split_heldout(items: list, every: int = 10) -> tuple[list, list]:
    """Every `every`-th item goes to held-out (1-based: items 10, 20, ...)."""
    if every <= 0:
        return list(items), []
    train = [x for i, x in enumerate(items, 1) if i % every]
    held = [x for i, x in enumerate(items, 1) if not i % every]
    return train, held
