"""Brute-force reference computations, independent of the decoder and of
the event extraction in the estimation module."""

import math
from collections import defaultdict

from slm.transform import ConstructorOp

SB = "SB"
PAD = (-1, "<pad>")


# --- deleted interpolation ----------------------------------------------------

def di_prob(events, levels, weights, n_outcomes, ctx, outcome):
    """Recursive deleted-interpolation estimate straight from a raw event
    list ``[(ctx, outcome, count)]``.

    P_L = uniform; P_l = lam_l f_l + (1 - lam_l) P_{l+1}, where f_l is the
    relative frequency under the level-l projection and lam_l is looked up
    by floor(log2(context count + 1)) in ``weights[l]`` (0 when unseen).
    """
    def proj(c, lv):
        return tuple(c[i] for i in levels[lv])

    p = 1.0 / n_outcomes
    for lv in reversed(range(len(levels))):
        key = proj(ctx, lv)
        tot = sum(n for c, o, n in events if proj(c, lv) == key)
        if tot == 0:
            continue
        hit = sum(n for c, o, n in events if proj(c, lv) == key and o == outcome)
        lam = weights[lv][int(math.floor(math.log2(tot + 1)))]
        p = lam * hit / tot + (1 - lam) * p
    return p


# --- exhaustive prefix / parse enumeration -------------------------------------

def _heads(stack):
    h0 = stack[-1]
    h1 = stack[-2] if len(stack) > 1 else PAD
    return h0, h1


def _reduce(stack, op):
    left, right = stack[-2], stack[-1]
    head = left[0] if op.kind == "L" else right[0]
    return stack[:-2] + ((head, op.label),)


def _ops(model):
    return [ConstructorOp("N")] + [ConstructorOp(k, x) for x in model.nts for k in "LR"]


def _constructor(model, stack, logp, events, allow_null=True):
    """All op sequences from `stack`: returns [(stack, logp, events)]."""
    out = []
    if len(stack) - 1 < 2:
        # forced null (no event), or completion reached a single head
        out.append((stack, logp, events))
        return out
    h0, h1 = _heads(stack)
    ctx = (h0[0], h0[1], h1[0], h1[1])
    ops = _ops(model)
    probs = {op: model.constructor.prob(ctx, op) for op in ops}
    if not allow_null:
        z = sum(p for op, p in probs.items() if op.kind != "N")
        probs = {op: p / z for op, p in probs.items() if op.kind != "N"}
    for op, p in probs.items():
        ev = events + [("op", ctx, op)]
        if op.kind == "N":
            out.append((stack, logp + math.log(p), ev))
        else:
            out.extend(_constructor(model, _reduce(stack, op), logp + math.log(p), ev, allow_null))
    return out


def prefixes(model, words):
    """Every word-parse k-prefix for k = 0..n as lists of
    ``(stack, ln P(W_k T_k), events)``."""
    bos = (model.words.id("<s>"), SB)
    level = [((bos,), 0.0, [])]
    out = [level]
    for w in words:
        nxt = []
        for stack, lp, ev in level:
            h0, h1 = _heads(stack)
            wctx = (h0[0], h0[1], h1[0], h1[1])
            lpw = math.log(model.predictor.prob(wctx, w))
            for t in model.tags:
                tctx = (w, h0[1], h1[1])
                lpt = math.log(model.tagger.prob(tctx, t))
                e = ev + [("word", wctx, w), ("tag", tctx, t)]
                nxt.extend(_constructor(model, stack + ((w, t),), lp + lpw + lpt, e))
        level = nxt
        out.append(level)
    return out


def word_probs(model, words):
    """P(w_{k+1} | W_k) for k = 0..n (the last entry is </s>)."""
    levels = prefixes(model, words)
    eos = model.words.id("</s>")
    out = []
    for k, level in enumerate(levels):
        nxt = words[k] if k < len(words) else eos
        z = sum(math.exp(lp) for _, lp, _ in level)
        num = 0.0
        for stack, lp, _ in level:
            h0, h1 = _heads(stack)
            num += math.exp(lp) * model.predictor.prob((h0[0], h0[1], h1[0], h1[1]), nxt)
        out.append(num / z)
    return out


def predictive(model, level, vocab_ids):
    """Full P(. | W_k) as a dict over `vocab_ids` for one prefix level."""
    z = sum(math.exp(lp) for _, lp, _ in level)
    dist = defaultdict(float)
    for stack, lp, _ in level:
        h0, h1 = _heads(stack)
        ctx = (h0[0], h0[1], h1[0], h1[1])
        for w in vocab_ids:
            dist[w] += math.exp(lp) / z * model.predictor.prob(ctx, w)
    return dist


def complete_parses(model, words):
    """Every complete (W, T): ``[(ln P(W, T), events)]``, with </s> predicted
    and the parse reduced to one head by renormalized adjoins."""
    eos = model.words.id("</s>")
    out = []
    for stack, lp, ev in prefixes(model, words)[-1]:
        h0, h1 = _heads(stack)
        ctx = (h0[0], h0[1], h1[0], h1[1])
        lp2 = lp + math.log(model.predictor.prob(ctx, eos))
        e2 = ev + [("word", ctx, eos)]
        for st, lp3, e3 in _constructor(model, stack, lp2, e2, allow_null=False):
            out.append((lp3, e3))
    return out


def full_em_counts(model, sentences):
    """Expected event counts under the exact posterior over all parses:
    ``{(component, ctx, outcome): count}`` and the total log-likelihood."""
    counts = defaultdict(float)
    ll = 0.0
    for words in sentences:
        parses = complete_parses(model, words)
        m = max(lp for lp, _ in parses)
        z = m + math.log(sum(math.exp(lp - m) for lp, _ in parses))
        ll += z
        for lp, events in parses:
            rho = math.exp(lp - z)
            for comp, ctx, o in events:
                counts[(comp, ctx, o)] += rho
    return dict(counts), ll


class PrefixOracle:
    """Exhaustive prefix enumeration shared across sentences: the parses of
    W_k are computed once and extended for every continuation. Works in
    linear probability space and keeps no events."""

    def __init__(self, model):
        self.model = model
        self.ops = _ops(model)
        self.bos = (model.words.id("<s>"), SB)
        self.levels = {(): [((self.bos,), 1.0)]}
        self._pw, self._pt, self._po = {}, {}, {}

    def p_word(self, stack, w):
        h0, h1 = _heads(stack)
        key = (h0, h1, w)
        if key not in self._pw:
            self._pw[key] = self.model.predictor.prob((h0[0], h0[1], h1[0], h1[1]), w)
        return self._pw[key]

    def _tag(self, w, stack, t):
        h0, h1 = _heads(stack)
        key = (w, h0[1], h1[1], t)
        if key not in self._pt:
            self._pt[key] = self.model.tagger.prob(key[:3], t)
        return self._pt[key]

    def _op_table(self, stack):
        h0, h1 = _heads(stack)
        key = (h0, h1)
        if key not in self._po:
            ctx = (h0[0], h0[1], h1[0], h1[1])
            self._po[key] = [(op, self.model.constructor.prob(ctx, op)) for op in self.ops]
        return self._po[key]

    def _construct(self, stack, p, out):
        if len(stack) - 1 < 2:
            out.append((stack, p))
            return
        for op, q in self._op_table(stack):
            if op.kind == "N":
                out.append((stack, p * q))
            else:
                self._construct(_reduce(stack, op), p * q, out)

    def level(self, prefix, store=True):
        prefix = tuple(prefix)
        if prefix in self.levels:
            return self.levels[prefix]
        prev = self.level(prefix[:-1])
        w = prefix[-1]
        out = []
        for stack, p in prev:
            pw = self.p_word(stack, w)
            for t in self.model.tags:
                self._construct(stack + ((w, t),), p * pw * self._tag(w, stack, t), out)
        if store:
            self.levels[prefix] = out
        return out

    def next_prob(self, prefix, w, store=True):
        lv = self.level(prefix, store)
        z = sum(p for _, p in lv)
        return sum(p * self.p_word(s, w) for s, p in lv) / z


def derivation_logprob(model, d):
    """ln P(W, T) of a derivation by direct replay; completion ops after
    </s> are renormalized over adjoins."""
    w_id = model.words.id
    stack = ((w_id("<s>"), SB),)
    lp = 0.0

    def op_prob(stack, op, allow_null):
        h0, h1 = _heads(stack)
        ctx = (h0[0], h0[1], h1[0], h1[1])
        p = model.constructor.prob(ctx, op)
        if not allow_null:
            p /= sum(model.constructor.prob(ctx, o) for o in _ops(model) if o.kind != "N")
        return p

    for step in d.steps:
        w = w_id(step.word)
        h0, h1 = _heads(stack)
        lp += math.log(model.predictor.prob((h0[0], h0[1], h1[0], h1[1]), w))
        lp += math.log(model.tagger.prob((w, h0[1], h1[1]), step.tag))
        stack = stack + ((w, step.tag),)
        for op in step.ops:
            if len(stack) - 1 >= 2:
                lp += math.log(op_prob(stack, op, True))
            if op.kind == "N":
                break
            stack = _reduce(stack, op)
    h0, h1 = _heads(stack)
    lp += math.log(model.predictor.prob((h0[0], h0[1], h1[0], h1[1]), w_id("</s>")))
    for op in d.final:
        lp += math.log(op_prob(stack, op, False))
        stack = _reduce(stack, op)
    return lp
