"""Synchronous multi-stack search over word-parse prefixes.

Each stack S_k holds hypotheses for the first k words. A hypothesis is the
list of exposed heads plus ln P(W_k T_k). Moving to position k+1 multiplies
in the word, tag and constructor probabilities; the language-model
probability of the next word is the prefix-weighted mixture

    P(w | W_k) = sum_T P(w | W_k T) * P(W_k T) / sum_T P(W_k T)

over the hypotheses in S_k.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .estimation import SLM, Trigram, head_context, top_two
from .transform import (ADJOIN_LEFT, ADJOIN_RIGHT, NULL_OP, BinNode, ConstructorOp,
                        Derivation, Step, derivation_to_tree)

INF = math.inf


class ConfigError(ValueError):
    pass


class SearchError(RuntimeError):
    pass


@dataclass
class DecoderConfig:
    beam: float = 128           # max hypotheses per stack; math.inf for no limit
    delta: float = math.log(1000.0)   # log-prob window; math.inf for no limit
    recombine: bool = True      # merge hypotheses with identical exposed heads
    right_branching: bool = False     # never adjoin before </s>; complete right-branching

    @classmethod
    def unbounded(cls, recombine: bool = True) -> DecoderConfig:
        return cls(beam=INF, delta=INF, recombine=recombine)


class Hypothesis:
    """Exposed-head stack with forward (`logp`) and best-derivation (`vit`)
    log-probabilities. `parent`/`action` point at the best derivation."""

    __slots__ = ("stack", "logp", "vit", "parent", "action")

    def __init__(self, stack, logp, vit, parent, action):
        self.stack = stack
        self.logp = logp
        self.vit = vit
        self.parent = parent
        self.action = action

    @property
    def depth(self) -> int:
        """Heads above the sentence-begin marker."""
        return len(self.stack) - 1

    def actions(self) -> list:
        out = []
        h = self
        while h is not None and h.action is not None:
            out.append(h.action)
            h = h.parent
        out.reverse()
        return out

    def __repr__(self) -> str:
        return f"Hypothesis({self.stack!r}, logp={self.logp:.4f})"


def _logaddexp(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    if b == -INF:
        return a
    return a + math.log1p(math.exp(b - a))


def logsumexp(xs: Iterable[float]) -> float:
    xs = list(xs)
    if not xs:
        return -INF
    m = max(xs)
    if m == -INF:
        return m
    return m + math.log(sum(math.exp(x - m) for x in xs))


@dataclass
class SentenceResult:
    word_probs: list[float]           # P_SLM for w_1..w_n and </s>
    final: list[Hypothesis]           # stack after </s> (completed if requested)
    failed_at: int | None = None      # position of search failure, if any

    @property
    def logprob(self) -> float:
        return sum(math.log(p) for p in self.word_probs)


class Decoder:
    def __init__(self, model: SLM, config: DecoderConfig | None = None):
        self.model = model
        self.config = config or DecoderConfig()
        self.forced_label = model.nts[0] if model.nts else "X"

    # stacks

    def initial(self) -> list[Hypothesis]:
        return [Hypothesis((self.model.bos_head,), 0.0, 0.0, None, None)]

    def _collect(self, candidates: list) -> list[Hypothesis]:
        """Merge candidates ``(score, parent, action, stack)``, then prune to
        the log-prob window and the beam width."""
        if not candidates:
            return []
        delta = self.config.delta
        if delta < INF:
            thr = max(c[0] for c in candidates) - delta
            candidates = [c for c in candidates if c[0] >= thr]
        if self.config.recombine:
            merged: dict = {}
            for score, vit, parent, action, stack in candidates:
                h = merged.get(stack)
                if h is None:
                    merged[stack] = Hypothesis(stack, score, vit, parent, action)
                else:
                    h.logp = _logaddexp(h.logp, score)
                    if vit > h.vit:
                        h.vit, h.parent, h.action = vit, parent, action
            hyps = list(merged.values())
        else:
            hyps = [Hypothesis(stack, score, vit, parent, action)
                    for score, vit, parent, action, stack in candidates]
        # stable sort: ties keep generation order
        hyps.sort(key=lambda h: -h.logp)
        best = hyps[0].logp
        out = []
        for h in hyps:
            if len(out) >= self.config.beam or h.logp < best - delta:
                break
            out.append(h)
        return out

    def _op_candidates(self, h: Hypothesis, allow_null: bool, out_null: list, out_adjoin: list) -> None:
        """Extend `h` by one constructor decision."""
        m = self.model
        if self.config.right_branching:
            if allow_null:
                out_null.append((h.logp, h.vit, h, ("op", NULL_OP), h.stack))
            else:
                op = ConstructorOp(ADJOIN_RIGHT, self.forced_label)
                st = _reduce(h.stack, op)
                out_adjoin.append((h.logp, h.vit, h, ("op", op), st))
            return
        if h.depth < 2:
            if allow_null:
                out_null.append((h.logp, h.vit, h, ("op", NULL_OP), h.stack))
            return
        h0, h1 = top_two(h.stack)
        seen, floor = m.constructor.distribution(head_context(h0, h1))
        p_null = seen.get(NULL_OP, floor)
        if allow_null:
            lp = math.log(p_null)
            out_null.append((h.logp + lp, h.vit + lp, h, ("op", NULL_OP), h.stack))
            norm = 0.0
        else:
            # adjoin mass summed directly; 1 - p_null can round to 0
            n_unseen = len(m.ops) - 1 - sum(1 for op in seen if not op.is_null)
            norm = math.log(sum(p for op, p in seen.items() if not op.is_null) + floor * n_unseen)
        thr = -INF
        if self.config.delta < INF:
            # the round's best score is at least this hypothesis' best, so
            # anything further below it than delta is dropped by _collect
            best_adj = max((p for op, p in seen.items() if not op.is_null), default=floor)
            best = math.log(max(best_adj, floor)) - norm
            if allow_null:
                best = max(best, math.log(p_null))
            thr = h.logp + best - self.config.delta
        for op in m.ops:
            if op.kind == "N":
                continue
            p = seen.get(op, floor)
            lp = math.log(p) - norm
            if h.logp + lp < thr:
                continue
            out_adjoin.append((h.logp + lp, h.vit + lp, h, ("op", op), _reduce(h.stack, op)))

    def _construct(self, hyps: list[Hypothesis]) -> list[Hypothesis]:
        """Run constructor rounds until every hypothesis took the null op."""
        finals: list = []
        current = hyps
        while current:
            nxt: list = []
            for h in current:
                self._op_candidates(h, True, finals, nxt)
            current = self._collect(nxt)
        return self._collect(finals)

    def complete(self, hyps: list[Hypothesis]) -> list[Hypothesis]:
        """Adjoin down to a single head after </s>. Null is masked and the
        constructor distribution renormalized over the adjoin ops."""
        done: list = []
        current = hyps
        while current:
            nxt: list = []
            for h in current:
                if h.depth < 2:
                    done.append((h.logp, h.vit, h.parent, h.action, h.stack))
                else:
                    self._op_candidates(h, False, [], nxt)
            for i, c in enumerate(nxt):
                score, vit, parent, (kind, op), stack = c
                nxt[i] = (score, vit, parent, ("final", op), stack)
            current = self._collect(nxt)
        return self._collect(done)

    def word_prob(self, hyps: list[Hypothesis], w: int) -> float:
        """P_SLM(w | W_k) over the stack `hyps`."""
        z = logsumexp(h.logp for h in hyps)
        p = 0.0
        for h in hyps:
            h0, h1 = top_two(h.stack)
            p += math.exp(h.logp - z) * self.model.p_word(h0, h1, w)
        return p

    def next_word_prob(self, hyps: list[Hypothesis]) -> np.ndarray:
        """Full predictive distribution, indexed by word id (<s> gets 0)."""
        if not hyps:
            raise SearchError("empty stack")
        m = self.model
        n = len(m.words)
        z = logsumexp(h.logp for h in hyps)
        dist = np.zeros(n)
        for h in hyps:
            rho = math.exp(h.logp - z)
            h0, h1 = top_two(h.stack)
            seen, floor = m.predictor.distribution(head_context(h0, h1))
            row = np.full(n, floor)
            row[m.bos] = 0.0
            for w, p in seen.items():
                row[w] = p
            dist += rho * row
        return dist

    def advance(self, hyps: list[Hypothesis], w: int) -> tuple[list[Hypothesis], float]:
        """Predict `w`, tag it and parse; returns S_{k+1} and P_SLM(w | W_k)."""
        if not hyps:
            raise SearchError("empty stack")
        m = self.model
        p_slm = self.word_prob(hyps, w)
        cands = []
        for h in hyps:
            h0, h1 = top_two(h.stack)
            lpw = math.log(m.p_word(h0, h1, w))
            seen, floor = m.tagger.distribution((w, h0[1], h1[1]))
            for t in m.tags:
                lp = lpw + math.log(seen.get(t, floor))
                cands.append((h.logp + lp, h.vit + lp, h, ("word", w, t), h.stack + ((w, t),)))
        return self._construct(self._collect(cands)), p_slm

    def end(self, hyps: list[Hypothesis], complete: bool = False) -> tuple[list[Hypothesis], float]:
        """Predict </s>; optionally complete every parse to a single root."""
        m = self.model
        p_slm = self.word_prob(hyps, m.eos)
        cands = []
        for h in hyps:
            h0, h1 = top_two(h.stack)
            lp = math.log(m.p_word(h0, h1, m.eos))
            cands.append((h.logp + lp, h.vit + lp, h, ("eos",), h.stack))
        out = self._collect(cands)
        if complete:
            out = self.complete(out)
        return out, p_slm

    def sentence(self, words: list[int], complete: bool = False) -> SentenceResult:
        hyps = self.initial()
        probs = []
        for k, w in enumerate(words):
            hyps, p = self.advance(hyps, w)
            probs.append(p)
            if not hyps:
                return SentenceResult(probs, [], failed_at=k)
        hyps, p = self.end(hyps, complete)
        probs.append(p)
        return SentenceResult(probs, hyps)

    # parse readout

    def derivation(self, h: Hypothesis) -> Derivation:
        syms = self.model.words.symbols
        steps: list[Step] = []
        final = []
        for act in h.actions():
            if act[0] == "word":
                steps.append(Step(syms[act[1]], act[2], []))
            elif act[0] == "op":
                steps[-1].ops.append(act[1])
            elif act[0] == "final":
                final.append(act[1])
        return Derivation(steps, final)

    def best_parse(self, words: list[int]) -> BinNode:
        res = self.sentence(words, complete=True)
        if not res.final:
            raise SearchError("no complete parse survived the search")
        best = max(res.final, key=lambda h: h.vit)  # first wins ties
        return derivation_to_tree(self.derivation(best))

    def nbest(self, words: list[int], n: float = INF) -> list[tuple[float, Derivation]]:
        """Up to `n` complete parses with their ln P(W, T). Requires a
        non-recombining decoder so each hypothesis is one derivation."""
        if self.config.recombine:
            raise ConfigError("nbest needs recombine=False")
        res = self.sentence(words, complete=True)
        hyps = sorted(res.final, key=lambda h: -h.logp)
        if n < INF:
            hyps = hyps[:int(n)]
        return [(h.logp, self.derivation(h)) for h in hyps]


def _reduce(stack: tuple, op: ConstructorOp) -> tuple:
    left, right = stack[-2], stack[-1]
    word = left[0] if op.kind == ADJOIN_LEFT else right[0]
    return stack[:-2] + ((word, op.label),)


def advance(hyps: list[Hypothesis], w: int, model: SLM, config: DecoderConfig | None = None):
    return Decoder(model, config).advance(hyps, w)


def next_word_prob(hyps: list[Hypothesis], model: SLM) -> np.ndarray:
    return Decoder(model).next_word_prob(hyps)


def best_parse(words: list[int], model: SLM, config: DecoderConfig | None = None) -> BinNode:
    return Decoder(model, config).best_parse(words)


@dataclass
class SentenceScore:
    index: int
    tokens: int
    slm: list[float] | None
    trigram: list[float] | None
    failed_at: int | None = None


@dataclass
class PPLRow:
    lam: float
    tokens: int
    logprob: float

    @property
    def ppl(self) -> float:
        return math.exp(-self.logprob / self.tokens) if self.tokens else float("nan")


@dataclass
class PPLReport:
    rows: list[PPLRow]
    sentences: list[SentenceScore] = field(default_factory=list)

    @property
    def failures(self) -> list[int]:
        return [s.index for s in self.sentences if s.failed_at is not None]

    def row(self, lam: float) -> PPLRow:
        for r in self.rows:
            if r.lam == lam:
                return r
        raise KeyError(lam)


def _score(i: int, words: list[int], decoder: Decoder | None, trigram: Trigram | None) -> SentenceScore:
    tri = trigram.sentence_probs(words) if trigram is not None else None
    sl = None
    failed = None
    if decoder is not None:
        res = decoder.sentence(words)
        sl = list(res.word_probs)
        if res.failed_at is not None:
            if tri is None:
                raise SearchError(f"sentence {i}: search failed and no trigram to fall back on")
            failed = res.failed_at
            sl = sl[:failed + 1] + tri[failed + 1:]
    return SentenceScore(i, len(words) + 1, sl, tri, failed)


_worker: dict = {}


def _init_worker(slm, trigram, config):
    _worker["decoder"] = Decoder(slm, config) if slm is not None else None
    _worker["trigram"] = trigram


def _score_chunk(chunk: list[tuple[int, list[int]]]) -> list[SentenceScore]:
    return [_score(i, w, _worker["decoder"], _worker["trigram"]) for i, w in chunk]


def chunks(items: list, n: int) -> list[list]:
    """Split into `n` contiguous, nearly equal parts (order preserved)."""
    size, extra = divmod(len(items), n)
    out, start = [], 0
    for k in range(n):
        end = start + size + (k < extra)
        out.append(items[start:end])
        start = end
    return [c for c in out if c]


def perplexity(corpus: list[list[int]], slm: SLM | None, trigram: Trigram | None,
               lambdas: Iterable[float] = (0.0,), config: DecoderConfig | None = None,
               workers: int = 1) -> PPLReport:
    """Perplexity of lam * P_3gram + (1 - lam) * P_SLM for every lam.

    Every word and the sentence end count as tokens. The SLM is not run
    when all lambdas are 1. Sentences
    whose search fails are finished with trigram probabilities and listed
    in ``report.failures``. With ``workers > 1`` sentences are decoded in
    separate processes; totals are still summed in corpus order.
    """
    lambdas = [float(x) for x in lambdas]
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"interpolation weight {lam} outside [0, 1]")
    need_slm = any(lam < 1.0 for lam in lambdas)
    need_tri = any(lam > 0.0 for lam in lambdas)
    if need_slm and slm is None:
        raise ConfigError("SLM model required for lambda < 1")
    if trigram is None and need_tri:
        raise ConfigError("trigram model required for lambda > 0")
    if slm is not None and trigram is not None and slm.words != trigram.words:
        raise ConfigError("SLM and trigram use different word vocabularies")
    slm = slm if need_slm else None

    if workers > 1 and len(corpus) > 1:
        parts = chunks(list(enumerate(corpus)), workers)
        with ProcessPoolExecutor(len(parts), initializer=_init_worker,
                                 initargs=(slm, trigram, config)) as ex:
            scores = [s for part in ex.map(_score_chunk, parts) for s in part]
    else:
        decoder = Decoder(slm, config) if slm is not None else None
        scores = [_score(i, words, decoder, trigram) for i, words in enumerate(corpus)]

    rows = []
    for lam in lambdas:
        total = 0.0
        tokens = 0
        for s in scores:
            tokens += s.tokens
            for j in range(s.tokens):
                pt = s.trigram[j] if lam > 0.0 else 0.0
                ps = s.slm[j] if lam < 1.0 else 0.0
                total += math.log(lam * pt + (1.0 - lam) * ps)
        rows.append(PPLRow(lam, tokens, total))
    return PPLReport(rows, scores)
