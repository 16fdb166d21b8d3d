import itertools
import logging
import math

import pytest

from slm.decoder import Decoder, DecoderConfig, SearchError
from slm.em import EMConfig, em_iteration, expected_counts, train_em
from slm.estimation import SLM
from slm.transform import NULL_OP, Derivation, Step
from slm.treebank import Vocabulary

from oracle import full_em_counts
from toy import tiny_model

FULL = EMConfig(iterations=1, nbest=math.inf, decoder=DecoderConfig.unbounded(recombine=False))


def ids(m, text):
    return m.words.ids(list(text))


def level_counts(model):
    """{(component, level, ctx, outcome): count} for every level."""
    out = {}
    for name, comp in model.components.items():
        for lv, table in enumerate(comp.counts):
            for c, row in table.items():
                for o, n in row.items():
                    out[(name, lv, c, o)] = n
    return out


def project_oracle(model, counts):
    out = {}
    for (name, ctx, o), n in counts.items():
        comp = model.components[name]
        for lv in range(len(comp.levels)):
            key = (name, lv, comp.project(ctx, lv), o)
            out[key] = out.get(key, 0.0) + n
    return out


def test_config_validation():
    with pytest.raises(ValueError):
        EMConfig(iterations=-1)
    with pytest.raises(ValueError):
        EMConfig(nbest=0)
    with pytest.raises(ValueError):
        EMConfig(workers=0)
    assert EMConfig().n == 128
    assert EMConfig(nbest=5).n == 5


def test_full_estep_matches_brute_force():
    m = tiny_model(nts=("X", "Y"), seed=4)
    sents = [ids(m, s) for s in ["a", "ab", "bca", "eed", "abcd"]]
    res = expected_counts(sents, m, FULL)
    want, ll = full_em_counts(m, sents)
    assert res.loglik == pytest.approx(ll, rel=1e-12)
    got = level_counts(res.counts)
    exp = project_oracle(m, want)
    assert set(got) == set(exp)
    for k, v in exp.items():
        assert got[k] == pytest.approx(v, abs=1e-9)


def test_fractional_count_conservation():
    m = tiny_model(nts=("X", "Y"), seed=5)
    sents = [ids(m, s) for s in ["abc", "de", "abcd"]]
    res = expected_counts(sents, m, FULL, keep_derivations=True)
    assert sum(res.counts.predictor.totals[0].values()) == pytest.approx(sum(len(s) + 1 for s in sents))
    i = 0
    for s in sents:
        n = sum(1 for d, _ in res.weighted if len(d.steps) == len(s))
        # sentences here have distinct lengths
        assert sum(r for d, r in res.weighted[i:i + n]) == pytest.approx(1.0, abs=1e-12)
        i += n


def test_zero_iterations_is_identity():
    m = tiny_model(seed=6)
    before = m.dumps()
    out, hist = train_em([ids(m, "abc")], m, EMConfig(iterations=0))
    assert out is m
    assert out.dumps() == before
    assert hist == []


def test_single_parse_corpus_is_fixed_point():
    # one tag and one-word sentences: every sentence has exactly one parse
    words = Vocabulary(list("abc"))
    derivs = [Derivation([Step(w, "T", [NULL_OP])]) for w in "aabcab"]
    m = SLM(words, ["T"], ["X"])
    m.accumulate(derivs)
    m.estimate_weights(derivs[:2])
    sents = [words.ids([d.steps[0].word]) for d in derivs]
    cfg = EMConfig(iterations=2, nbest=1)
    new, stats = em_iteration(sents, m, cfg)
    assert level_counts(new) == level_counts(m)
    _, hist = train_em(sents, m, cfg)
    assert hist[0].loglik == pytest.approx(hist[-1].loglik, abs=1e-12)


def test_likelihood_monotone_unpruned():
    m = tiny_model(nts=("X", "Y"), seed=7)
    sents = [ids(m, "".join(s)) for s in itertools.product("abc", repeat=3)][:12]
    cfg = EMConfig(iterations=3, nbest=math.inf, decoder=DecoderConfig.unbounded(recombine=False))
    _, hist = train_em(sents, m, cfg)
    lls = [h.loglik for h in hist]
    assert len(lls) == 4
    assert all(b >= a for a, b in zip(lls, lls[1:]))


def test_history_and_callback():
    m = tiny_model(seed=8)
    sents = [ids(m, s) for s in ["abc", "cba", "dd"]]
    seen = []
    out, hist = train_em(sents, m, EMConfig(iterations=2), on_iteration=lambda k, mod, st: seen.append(k))
    assert seen == [1, 2]
    assert len(hist) == 3
    assert all(h.tokens == 3 + 3 + 2 + 3 for h in hist)
    # weights carried over from the initial model
    for key in m.components:
        assert out.components[key].weights == m.components[key].weights


def test_refit_weights_option():
    m = tiny_model(seed=9)
    sents = [ids(m, s) for s in ["abc", "cba", "dd", "eab"]]
    cfg = EMConfig(iterations=1, refit_weights=True)
    new, _ = em_iteration(sents, m, cfg, heldout=[ids(m, "abd")])
    assert any(new.components[k].weights != m.components[k].weights for k in m.components)
    for comp in new.components.values():
        assert all(0 <= v < 1 for lv in comp.weights for v in lv.values())


def test_failed_sentence_skipped(monkeypatch, caplog):
    m = tiny_model(seed=10)
    sents = [ids(m, s) for s in ["abc", "cba", "dd"]]
    real = Decoder.nbest

    def flaky(self, words, n=math.inf):
        if len(words) == 2:
            raise SearchError("boom")
        return real(self, words, n)

    monkeypatch.setattr(Decoder, "nbest", flaky)
    with caplog.at_level(logging.WARNING):
        res = expected_counts(sents, m, EMConfig())
    assert res.skipped == [2]
    assert res.tokens == 8
    assert "skipped" in caplog.text


def test_parallel_estep_identical():
    m = tiny_model(seed=11)
    sents = [ids(m, "".join(s)) for s in itertools.product("abcde", repeat=2)]
    a = expected_counts(sents, m, EMConfig())
    b = expected_counts(sents, m, EMConfig(workers=3))
    assert a.loglik == b.loglik
    assert a.counts.dumps() == b.counts.dumps()
