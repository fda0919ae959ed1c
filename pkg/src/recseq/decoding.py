"""Decoding strategies for token-emitting models.

All strategies run the model step by step through the incremental
interface in :mod:`recseq.models` and share the same conventions: emitted
sequences include the terminating EOS token when one was produced, the
cumulative log probability is the sum of per-step log probabilities of the
emitted tokens, and all tie-breaks prefer the lowest token index so runs
are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ModelSpec, make_stepper
from .tensor_ops import softmax

__all__ = ["Hypothesis", "greedy_decode", "beam_search", "sample_decode"]


@dataclass(frozen=True, eq=False)
class Hypothesis:
    """A (possibly finished) decoded sequence.

    tokens holds emitted token ids in order, including the final EOS when
    finished is True. logp is the cumulative log probability of exactly
    those tokens under the model.
    """

    tokens: tuple
    logp: float
    finished: bool
    state: object = field(repr=False, default=None)


def _rank_key(h: Hypothesis):
    # Higher probability first; equal scores fall back to the lexically
    # smallest token sequence so orderings are deterministic.
    return (-h.logp, h.tokens)


def greedy_decode(m: ModelSpec, features, max_len: int) -> Hypothesis:
    """Follow the argmax token at every step until EOS or max_len."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    state, step = make_stepper(m, features)
    tokens = []
    logp = 0.0
    prev = m.vocab.bos
    for t in range(max_len):
        lp, state = step(state, prev, t)
        k = int(np.argmax(lp))
        tokens.append(k)
        logp += float(lp[k])
        if k == m.vocab.eos:
            return Hypothesis(tuple(tokens), logp, True, state)
        prev = k
    return Hypothesis(tuple(tokens), logp, False, state)


def beam_search(m: ModelSpec, features, width: int, max_len: int) -> list:
    """Breadth-limited search over token sequences.

    Every live hypothesis is expanded over the whole vocabulary; the best
    ``width`` extensions by cumulative log probability survive. Extensions
    ending in EOS move to the finished pool and stop competing. The search
    ends once ``width`` hypotheses have finished or every live hypothesis
    has reached max_len. Returns at most ``width`` finished hypotheses,
    best first.
    """
    if width < 1:
        raise ValueError("beam width must be at least 1")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    state, step = make_stepper(m, features)
    vocab_size = m.vocab.size
    eos = m.vocab.eos
    live = [Hypothesis((), 0.0, False, state)]
    done = []
    for t in range(max_len):
        if not live or len(done) >= width:
            break
        candidates = []
        for hyp in live:
            prev = hyp.tokens[-1] if hyp.tokens else m.vocab.bos
            lp, new_state = step(hyp.state, prev, t)
            for k in range(vocab_size):
                candidates.append(
                    Hypothesis(hyp.tokens + (k,), hyp.logp + float(lp[k]), k == eos, new_state)
                )
        candidates.sort(key=_rank_key)
        live = []
        for h in candidates[:width]:
            if h.finished:
                done.append(h)
            else:
                live.append(h)
    done.sort(key=_rank_key)
    return done[:width]


def sample_decode(m: ModelSpec, features, n_samples: int, temperature: float, max_len: int, seed: int = 0) -> list:
    """Draw n_samples sequences token by token from tempered softmaxes.

    Each step samples from softmax(temperature * log-probabilities), which
    equals softmax(temperature * logits) up to the shared normalizer. The
    returned list is ranked by the untempered cumulative log probability,
    best first; a very large temperature makes every draw follow the
    argmax, reproducing greedy decoding.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    rng = np.random.default_rng(seed)
    state0, step = make_stepper(m, features)
    pool = []
    for _ in range(n_samples):
        state = state0
        tokens = []
        logp = 0.0
        prev = m.vocab.bos
        finished = False
        for t in range(max_len):
            lp, state = step(state, prev, t)
            probs = softmax(temperature * lp)
            # Inverse-CDF draw; cumulative sums keep the pick reproducible.
            r = rng.random()
            k = int(np.searchsorted(np.cumsum(probs), r, side="right"))
            k = min(k, probs.size - 1)
            tokens.append(k)
            logp += float(lp[k])
            if k == m.vocab.eos:
                finished = True
                break
            prev = k
        pool.append(Hypothesis(tuple(tokens), logp, finished, state))
    return sorted(pool, key=_rank_key)
