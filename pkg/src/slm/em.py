"""N-best EM reestimation of the SLM components."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

from .decoder import Decoder, DecoderConfig, SearchError, chunks, logsumexp
from .estimation import SLM

log = logging.getLogger(__name__)


@dataclass
class EMConfig:
    iterations: int = 3
    nbest: float | None = None  # parses kept per sentence; None means the beam width
    # re-fit interpolation weights on held-out posteriors every iteration;
    # otherwise the weights of the initial model are carried over
    refit_weights: bool = False
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    workers: int = 1            # E-step processes; shards are merged in corpus order

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.nbest is not None and self.nbest < 1:
            raise ValueError("nbest must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def n(self) -> float:
        return self.decoder.beam if self.nbest is None else self.nbest


@dataclass
class EStepResult:
    counts: SLM                 # fractional counts, no weights
    loglik: float               # sum over sentences of ln sum_{T in N-best} P(W, T)
    tokens: int
    skipped: list[int] = field(default_factory=list)
    weighted: list = field(default_factory=list)   # (Derivation, posterior) pairs

    @property
    def ppl(self) -> float:
        return math.exp(-self.loglik / self.tokens) if self.tokens else float("nan")


def expected_counts(sentences: list[list[int]], model: SLM, config: EMConfig,
                    keep_derivations: bool = False) -> EStepResult:
    """E-step: decode every sentence, keep the N best complete parses and add
    their events weighted by the posterior renormalized over the list.

    With ``config.workers > 1`` decoding runs in separate processes but
    counts are still accumulated here in corpus order, so results do not
    depend on the number of workers.
    """
    if config.workers > 1 and len(sentences) > 1:
        parts = chunks(sentences, config.workers)
        with ProcessPoolExecutor(len(parts)) as ex:
            lists = [nb for part in ex.map(_nbest_task, [(p, model, config) for p in parts])
                     for nb in part]
    else:
        lists = _nbest_lists(sentences, model, config)
    counts = model.empty_copy()
    res = EStepResult(counts, 0.0, 0)
    for i, (words, nb) in enumerate(zip(sentences, lists)):
        if not nb:
            log.warning("EM: no parse for sentence %d; skipped", i)
            res.skipped.append(i)
            continue
        z = logsumexp(lp for lp, _ in nb)
        res.loglik += z
        res.tokens += len(words) + 1
        for lp, d in nb:
            rho = math.exp(lp - z)
            counts.accumulate([d], weight=rho)
            if keep_derivations:
                res.weighted.append((d, rho))
    return res


def _nbest_lists(sentences, model, config) -> list[list]:
    decoder = Decoder(model, replace(config.decoder, recombine=False))
    out = []
    for words in sentences:
        try:
            out.append(decoder.nbest(words, config.n))
        except SearchError:
            out.append([])
    return out


def _nbest_task(args) -> list[list]:
    return _nbest_lists(*args)


def em_iteration(sentences: list[list[int]], model: SLM, config: EMConfig,
                 heldout: list[list[int]] | None = None) -> tuple[SLM, EStepResult]:
    """One N-best EM step. Returns the reestimated model and the E-step
    statistics (whose log-likelihood is that of the input model)."""
    estep = expected_counts(sentences, model, config)
    new = estep.counts
    if config.refit_weights:
        held = expected_counts(heldout, model, config, keep_derivations=True).weighted if heldout else []
        new.estimate_weights(None, weighted=held)
    else:
        for key, comp in new.components.items():
            comp.weights = [dict(w) for w in model.components[key].weights]
    return new, estep


def train_em(sentences: list[list[int]], model: SLM, config: EMConfig,
             heldout: list[list[int]] | None = None, on_iteration=None) -> tuple[SLM, list[EStepResult]]:
    """Run `config.iterations` EM steps.

    Returns the final model and the training statistics of every model
    visited: entry k belongs to the model after k iterations.
    `on_iteration(k, model, stats)` is called after each step.
    """
    history = []
    for k in range(1, config.iterations + 1):
        model, stats = em_iteration(sentences, model, config, heldout)
        history.append(stats)
        log.info("EM iteration %d: ln L = %.6f over %d tokens (train ppl %.3f)",
                 k - 1, stats.loglik, stats.tokens, stats.ppl)
        if on_iteration is not None:
            on_iteration(k, model, stats)
    if config.iterations:
        history.append(expected_counts(sentences, model, config))
    return model, history
