"""Evaluation metrics: perplexity, distinct-n, accuracy, JGA, slot error rate, BLEU, entity F1."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .vocab import tokenize

BLEU_SMOOTHING = 0.1


@dataclass
class MetricReport:
    name: str
    value: float
    support: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "support": self.support, "config": dict(self.config)}


def _aligned(a: Sequence, b: Sequence) -> None:
    if len(a) != len(b):
        raise DimensionError(f"lists are not aligned: {len(a)} vs {len(b)}")


def _tokens(x) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


# -- perplexity ---------------------------------------------------------------
def perplexity_from_logprobs(logprobs: Iterable) -> float:
    """exp(-mean log p) over every token; summed in extended precision."""
    lp = np.concatenate([np.asarray(x, dtype=np.longdouble).reshape(-1) for x in logprobs]) \
        if not isinstance(logprobs, np.ndarray) else logprobs.astype(np.longdouble).reshape(-1)
    if lp.size == 0:
        raise ContractError("perplexity needs at least one token")
    return float(np.exp(-lp.sum() / lp.size))


def perplexity(model, corpus: Sequence[Sequence[int]], adapter=None) -> float:
    """Token-level perplexity of ``corpus`` (sequences of ids, first token is context only)."""
    from .model import token_logprobs

    if not corpus:
        raise ContractError("perplexity needs a non-empty corpus")
    return perplexity_from_logprobs(token_logprobs(model, corpus, adapter))


def sequence_perplexity(model, ids: Sequence[int], adapter=None) -> float:
    return perplexity(model, [ids], adapter)


# -- diversity ----------------------------------------------------------------
def ngrams(tokens: Sequence[str], n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def distinct_n(responses: Sequence, n: int) -> float:
    if n < 1:
        raise ContractError("distinct-n needs n >= 1")
    grams = [g for r in responses for g in ngrams(_tokens(r), n)]
    if not grams:
        return 0.0
    return len(set(grams)) / len(grams)


# -- task-oriented metrics ----------------------------------------------------
def intent_accuracy(pred: Sequence[str], gold: Sequence[str]) -> float:
    _aligned(pred, gold)
    if not gold:
        raise ContractError("intent accuracy over an empty list")
    return sum(p.strip() == g.strip() for p, g in zip(pred, gold)) / len(gold)


def _state_set(state) -> frozenset:
    if isinstance(state, dict):
        return frozenset((str(k), str(v)) for k, v in state.items())
    if isinstance(state, str):
        from .synth import parse_api

        try:
            intent, slots = parse_api(state)
        except ValueError:
            return frozenset({("__unparsable__", state.strip())})
        return frozenset({("__intent__", intent), *slots})
    return frozenset(tuple(x) for x in state)


def joint_goal_accuracy(pred: Sequence, gold: Sequence) -> float:
    """Fraction of turns whose whole slot-value set matches (order-insensitive).

    States may be dicts, iterables of (slot, value) pairs or API strings
    ``intent(s=v, ...)`` (the intent then has to match too).
    """
    _aligned(pred, gold)
    if not gold:
        raise ContractError("JGA over an empty list")
    return sum(_state_set(p) == _state_set(g) for p, g in zip(pred, gold)) / len(gold)


BINARY_VALUES = frozenset({"yes", "no", "true", "false", "none", "dontcare"})


def slot_error_rate(responses: Sequence, gold_slots: Sequence) -> float:
    """Share of gold slot values missing from the response tokens.

    Slots with binary values carry no surface form and are not counted.
    """
    _aligned(responses, gold_slots)
    missing = total = 0
    for resp, slots in zip(responses, gold_slots):
        toks = set(_tokens(resp))
        if isinstance(slots, dict):
            values = list(slots.values())
        else:
            values = [s[1] if isinstance(s, tuple) else s for s in slots]
        for v in values:
            if str(v).lower() in BINARY_VALUES:
                continue
            total += 1
            if not set(_tokens(str(v))) <= toks:
                missing += 1
    return missing / total if total else 0.0


# -- BLEU ---------------------------------------------------------------------
def bleu(candidates: Sequence, references: Sequence, max_n: int = 4, epsilon: float = BLEU_SMOOTHING) -> float:
    """Corpus BLEU with brevity penalty; zero n-gram matches count as ``epsilon``."""
    _aligned(candidates, references)
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        c, r = _tokens(cand), _tokens(ref)
        cand_len += len(c)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            cg, rg = Counter(ngrams(c, n)), Counter(ngrams(r, n))
            matches[n - 1] += sum(min(k, rg[g]) for g, k in cg.items())
            totals[n - 1] += max(len(c) - n + 1, 0)
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        if t == 0:
            return 0.0
        log_p += math.log((m if m > 0 else epsilon) / t)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p / max_n)


# -- entity F1 ------------------------------------------------------------------
def entity_f1(responses: Sequence, gold_entities: Sequence, entity_vocab: Iterable[str] | None = None) -> float:
    """Micro-averaged F1 of entity tokens.

    Predicted entities are response tokens found in ``entity_vocab`` (the
    union of all gold sets when not given).  No gold and no predicted
    entities anywhere scores 1.0.
    """
    _aligned(responses, gold_entities)
    vocab = set(entity_vocab) if entity_vocab is not None else {e for g in gold_entities for e in g}
    tp = fp = fn = 0
    for resp, gold in zip(responses, gold_entities):
        pred = {t for t in _tokens(resp) if t in vocab}
        gold = set(gold)
        tp += len(pred & gold)
        fp += len(pred - gold)
        fn += len(gold - pred)
    if tp + fp + fn == 0:
        return 1.0
    if tp == 0:
        return 0.0
    p, r = tp / (tp + fp), tp / (tp + fn)
    return 2 * p * r / (p + r)
