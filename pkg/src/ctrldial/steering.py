"""Plug-and-play steering of a frozen decoder and distillation into adapters.

At every decoding step the cached keys/values are nudged along the gradient
of an attribute classifier's log-likelihood (plus a KL term that keeps the
next-token distribution near the unsteered one).  The next token is sampled
from a geometric blend of the steered and unsteered distributions.  Several
hypotheses are sampled and re-ranked by attribute loss; the winners can be
used as training data for a residual adapter, which then reproduces the
style without any per-token optimisation.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import spawn_adapter, train_adapter
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DegenerateDataError, NumericError
from .model import DecoderLM, DecoderState, TrainConfig, _pick_top_k, frozen, prefill
from .vocab import EOS_ID

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------
def fit_softmax_regression(features: np.ndarray, labels: np.ndarray, n_classes: int, epochs: int = 200,
                           lr: float = 0.05, l2: float = 1e-4, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch Adam on the mean cross-entropy of a linear classifier."""
    from .model import Adam

    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(0.0, 0.01, (features.shape[1], n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    opt = Adam([w, b], lr)
    x = Tensor(features)
    for _ in range(epochs):
        opt.zero_grad()
        loss = ad.cross_entropy(x @ w + b, labels) + (w * w).sum() * l2
        ad.backward(loss)
        opt.step()
    return w.data, b.data


def macro_f1(pred: np.ndarray, gold: np.ndarray, n_classes: int) -> float:
    scores = []
    for c in range(n_classes):
        tp = np.sum((pred == c) & (gold == c))
        fp = np.sum((pred == c) & (gold != c))
        fn = np.sum((pred != c) & (gold == c))
        scores.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


@dataclass
class AttributeModel:
    """Linear classifier over the mean of final hidden states."""

    weight: Tensor
    bias: Tensor
    labels: list
    metrics: dict = field(default_factory=dict)

    def logits(self, pooled: Tensor) -> Tensor:
        return pooled @ self.weight + self.bias

    def log_proba(self, pooled) -> np.ndarray:
        return ad.log_softmax(Tensor(np.atleast_2d(pooled)) @ self.weight + self.bias).data

    def index(self, label) -> int:
        return label if isinstance(label, (int, np.integer)) else self.labels.index(label)

    def save(self, path) -> None:
        from .checkpoint import save_arrays

        save_arrays(path, "attribute_model", {"labels": list(self.labels), "metrics": self.metrics},
                    {"weight": self.weight.data, "bias": self.bias.data})

    @classmethod
    def load(cls, path) -> "AttributeModel":
        from .checkpoint import load_arrays

        kind, config, arrays = load_arrays(path)
        if kind != "attribute_model":
            raise ValueError(f"{path}: expected an attribute_model checkpoint, found {kind!r}")
        return cls(Tensor(arrays["weight"]), Tensor(arrays["bias"]), config["labels"], config.get("metrics", {}))


def response_features(model: DecoderLM, prefix: Sequence[int], response: Sequence[int], adapter=None) -> np.ndarray:
    """Mean final hidden state over the positions holding the response tokens."""
    return batch_response_features(model, [(prefix, response)], adapter)[0]


def batch_response_features(model: DecoderLM, pairs, adapter=None) -> np.ndarray:
    out = np.zeros((len(pairs), model.cfg.d_model))
    groups: dict[tuple, list[int]] = {}
    for i, (p, r) in enumerate(pairs):
        if len(r) == 0:
            raise ContractError(f"sample {i}: empty response")
        groups.setdefault((len(p), len(r)), []).append(i)
    with ad.no_grad():
        for (lp, _), idx in groups.items():
            ids = np.array([list(pairs[i][0]) + list(pairs[i][1]) for i in idx], dtype=np.int64)
            _, hidden, _ = model.forward(ids, None, adapter)
            out[idx] = hidden.data[:, lp:].mean(axis=1)
    return out


def train_attribute_model(model: DecoderLM, corpus, labels: Sequence, epochs: int = 300, lr: float = 0.05,
                          valid_fraction: float = 0.2, seed: int = 0) -> AttributeModel:
    """Fit the classifier on frozen-model features of (prefix ids, response ids, label) triples.

    Held-out accuracy and macro F1 are stored in ``metrics``.
    """
    if not corpus:
        raise ContractError("attribute corpus is empty")
    y = np.array([c[2] for c in corpus], dtype=np.int64)
    if y.min() < 0 or y.max() >= len(labels):
        raise IndexError("attribute label out of range")
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("attribute corpus holds a single class")
    feats = batch_response_features(model, [(c[0], c[1]) for c in corpus])
    order = np.random.default_rng(seed).permutation(len(corpus))
    n_valid = int(round(valid_fraction * len(corpus)))
    va, tr = order[:n_valid], order[n_valid:]
    w, b = fit_softmax_regression(feats[tr], y[tr], len(labels), epochs, lr, seed=seed)
    metrics = {}
    if n_valid:
        pred = (feats[va] @ w + b).argmax(axis=1)
        metrics = {"accuracy": float(np.mean(pred == y[va])), "f1": macro_f1(pred, y[va], len(labels)),
                   "n_train": int(len(tr)), "n_valid": int(n_valid)}
    return AttributeModel(Tensor(w), Tensor(b), list(labels), metrics)


class BagOfWordsClassifier:
    """Token-count logistic regression; an external scorer independent of the decoder."""

    def __init__(self, vocab_size: int, n_classes: int):
        self.vocab_size = vocab_size
        self.n_classes = n_classes
        self.weight = np.zeros((vocab_size, n_classes))
        self.bias = np.zeros(n_classes)

    def features(self, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        x = np.zeros((len(seqs), self.vocab_size))
        for i, s in enumerate(seqs):
            for t in s:
                x[i, t] += 1.0
            x[i] /= max(len(s), 1)
        return x

    def fit(self, seqs, labels, epochs: int = 300, lr: float = 0.1, seed: int = 0) -> "BagOfWordsClassifier":
        labels = np.asarray(labels)
        if len(np.unique(labels)) < 2:
            raise DegenerateDataError("classifier corpus holds a single class")
        self.weight, self.bias = fit_softmax_regression(self.features(seqs), labels, self.n_classes, epochs, lr,
                                                        seed=seed)
        return self

    def log_proba(self, seqs) -> np.ndarray:
        z = self.features(seqs) @ self.weight + self.bias
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def predict(self, seqs) -> np.ndarray:
        return self.log_proba(seqs).argmax(axis=1)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
@dataclass
class SteeringConfig:
    step_size: float = 0.02
    gamma: float = 1.0
    iterations: int = 75
    kl_weight: float = 0.01
    fusion: float = 0.8
    top_k: int = 10
    n_hypotheses: int = 10
    bow_weight: float = 0.0
    kl_mode: str = "joint"  # or "alternating": separate KL step after each attribute step
    reset_per_token: bool = True
    horizon: bool = True

    def __post_init__(self):
        if self.step_size < 0 or self.iterations < 0:
            raise ConfigError("step size and iterations must be non-negative")
        if not 0.0 <= self.fusion <= 1.0:
            raise ConfigError("fusion exponent must lie in [0, 1]")
        if self.kl_mode not in ("joint", "alternating"):
            raise ConfigError(f"unknown kl_mode {self.kl_mode!r}")

    @property
    def active(self) -> bool:
        return self.iterations > 0 and self.step_size > 0


_PPLM_BASE = dict(step_size=0.02, gamma=1.0, kl_weight=0.01)
PRESETS = {
    "negative": SteeringConfig(iterations=75, **_PPLM_BASE),
    "question": SteeringConfig(iterations=75, **_PPLM_BASE),
    "business": SteeringConfig(iterations=75, **_PPLM_BASE),
    "sports": SteeringConfig(iterations=75, **_PPLM_BASE),
    "scitech": SteeringConfig(iterations=75, **_PPLM_BASE),
    "positive": SteeringConfig(iterations=25, **_PPLM_BASE),
    "off": SteeringConfig(iterations=0, step_size=0.0, fusion=0.0, n_hypotheses=1, bow_weight=0.0),
}
# adapter recipe used with the presets
ADAPTER_RECIPE = TrainConfig(lr=6.25e-4, batch_size=32, epochs=5)


def preset(name: str, **overrides) -> SteeringConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# distributions
# ---------------------------------------------------------------------------
def fuse_distributions(p_pert, p_orig, gamma_gm: float) -> np.ndarray:
    """p ∝ p_pert^gamma_gm * p_orig^(1 - gamma_gm), renormalised over the last axis."""
    p_pert, p_orig = np.asarray(p_pert, dtype=np.float64), np.asarray(p_orig, dtype=np.float64)
    if p_pert.shape != p_orig.shape:
        raise ValueError("distributions must share a support")
    if gamma_gm == 0.0:
        return p_orig.copy()
    if gamma_gm == 1.0:
        return p_pert.copy()
    with np.errstate(divide="ignore"):
        log_mix = gamma_gm * np.log(p_pert) + (1.0 - gamma_gm) * np.log(p_orig)
    top = log_mix.max(axis=-1, keepdims=True)
    if not np.isfinite(top).all():
        raise NumericError("fused distribution has a zero normaliser")
    mix = np.exp(log_mix - top)
    return mix / mix.sum(axis=-1, keepdims=True)


def fuse_logits(logits_pert: np.ndarray, logits_orig: np.ndarray, gamma_gm: float) -> np.ndarray:
    """Log-space fusion up to a per-row constant; the end points return the inputs unchanged."""
    if gamma_gm == 0.0:
        return logits_orig
    if gamma_gm == 1.0:
        return logits_pert
    return gamma_gm * _log_softmax(logits_pert) + (1.0 - gamma_gm) * _log_softmax(logits_orig)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def weighted_decode(logits, bag: Sequence[int], weight: float) -> np.ndarray:
    """Add ``weight`` to the logits of every token in ``bag``."""
    if len(bag) == 0:
        raise ContractError("weighted decoding needs a non-empty bag of words")
    if weight == 0.0:
        return logits
    out = np.array(logits, dtype=np.float64, copy=True)
    out[..., np.asarray(sorted(set(bag)), dtype=np.int64)] += weight
    return out


def bag_of_words(seqs: Sequence[Sequence[int]], labels: Sequence[int], target: int, top_n: int = 50,
                 exclude: Sequence[int] = ()) -> list[int]:
    """Tokens with the highest add-one smoothed log-odds of appearing in ``target`` texts."""
    pos, neg = Counter(), Counter()
    for s, y in zip(seqs, labels):
        (pos if y == target else neg).update(s)
    n_pos, n_neg = sum(pos.values()) or 1, sum(neg.values()) or 1
    skip = set(exclude)
    scores = {t: math.log((pos[t] + 1) / n_pos) - math.log((neg[t] + 1) / n_neg) for t in pos if t not in skip}
    return [t for t, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]]


# ---------------------------------------------------------------------------
# cache perturbation
# ---------------------------------------------------------------------------
@dataclass
class SteeringDelta:
    keys: list
    values: list

    @classmethod
    def zeros_like(cls, state: DecoderState) -> "SteeringDelta":
        return cls([np.zeros_like(k.data) for k in state.keys], [np.zeros_like(v.data) for v in state.values])

    def arrays(self) -> list[np.ndarray]:
        return self.keys + self.values

    def apply(self, state: DecoderState) -> DecoderState:
        return DecoderState([Tensor(k.data + dk) for k, dk in zip(state.keys, self.keys)],
                            [Tensor(v.data + dv) for v, dv in zip(state.values, self.values)], state.length)


@dataclass
class _Objective:
    attr: AttributeModel
    target: int
    past_sum: np.ndarray  # (B, d) sum of hidden states of earlier response positions
    past_count: int
    include_current: bool  # the fed token is itself a response token


def _attribute_terms(model: DecoderLM, state: DecoderState, tokens: np.ndarray, obj: _Objective,
                     cfg: SteeringConfig, delta_t: list[Tensor]):
    """Forward through the shifted cache; returns (attribute log-lik per row, probs, logits)."""
    n = len(state.keys)
    shifted = DecoderState([k + d for k, d in zip(state.keys, delta_t[:n])],
                           [v + d for v, d in zip(state.values, delta_t[n:])], state.length)
    logits, hidden, after = model.forward(tokens[:, None], shifted)
    last = logits[:, -1, :]
    probs = ad.softmax(last)
    parts = obj.past_sum.copy()
    count = obj.past_count
    pooled = Tensor(parts)
    if obj.include_current:
        pooled = pooled + hidden[:, -1, :]
        count += 1
    if cfg.horizon and after.length < model.cfg.max_len:
        soft = probs.reshape(probs.shape[0], 1, probs.shape[1]) @ model.embedding.word
        _, h2, _ = model.forward(None, after, word_vectors=soft)
        pooled = pooled + h2[:, -1, :]
        count += 1
    pooled = pooled * (1.0 / max(count, 1))
    logp = ad.log_softmax(obj.attr.logits(pooled))
    return logp[:, obj.target], probs, last


def _objective_loss(model, state, tokens, obj, cfg, delta_t, p_orig, trace=None) -> Tensor:
    logp_a, probs, _ = _attribute_terms(model, state, tokens, obj, cfg, delta_t)
    if trace is not None:
        trace.append(logp_a.data.copy())
    loss = -logp_a.sum()
    if cfg.kl_weight > 0 and cfg.kl_mode == "joint":
        loss = loss + _kl(probs, p_orig) * cfg.kl_weight
    return loss


def steering_objective(model: DecoderLM, state: DecoderState, tokens, attr: AttributeModel, target,
                       cfg: SteeringConfig, delta: Sequence[Tensor]) -> Tensor:
    """Scalar loss that one perturbation step descends, as a function of ``delta``.

    ``delta`` holds one tensor per cached key and value (keys first).
    """
    tokens = np.atleast_1d(np.asarray(tokens, dtype=np.int64))
    with ad.no_grad():
        logits, _, _ = model.forward(tokens[:, None], state)
    p_orig = np.exp(_log_softmax(logits.data[:, -1]))
    obj = _Objective(attr, attr.index(target), np.zeros((len(tokens), model.cfg.d_model)), 0, False)
    return _objective_loss(model, state, tokens, obj, cfg, list(delta), p_orig)


def _kl(probs: Tensor, p_orig: np.ndarray, eps: float = 1e-10) -> Tensor:
    return (probs * (ad.log(probs + eps) - np.log(p_orig + eps))).sum()


def _row_norms(grads: list[np.ndarray]) -> np.ndarray:
    sq = sum((g.reshape(g.shape[0], -1) ** 2).sum(axis=1) for g in grads)
    return np.sqrt(sq)


def _step(delta: list[np.ndarray], grads: list[np.ndarray], cfg: SteeringConfig) -> None:
    norms = _row_norms(grads) + 1e-15
    scale = cfg.step_size / norms ** cfg.gamma
    for d, g in zip(delta, grads):
        d -= scale.reshape((-1,) + (1,) * (g.ndim - 1)) * g


def perturb_history(model: DecoderLM, state: DecoderState, tokens, attr: AttributeModel, target,
                    cfg: SteeringConfig, p_orig: np.ndarray | None = None, obj: _Objective | None = None,
                    trace: list | None = None) -> DecoderState:
    """Return F + ΔF after ``cfg.iterations`` normalised gradient steps.

    ``tokens`` (B,) are the tokens about to be fed on top of ``state``.
    Each step descends ``-log p(a) + kl_weight * KL(p_pert || p_orig)`` with
    the gradient divided by its per-example norm to the power ``gamma``.
    The attribute log-likelihood before every step is appended to ``trace``.
    Neither the model nor ``state`` is modified.
    """
    return _perturb(model, state, tokens, attr, target, cfg, p_orig, obj, trace)[0]


def _perturb(model, state, tokens, attr, target, cfg, p_orig=None, obj=None, trace=None, init=None):
    if not cfg.active or state.length == 0:
        return state, None
    tokens = np.atleast_1d(np.asarray(tokens, dtype=np.int64))
    target = attr.index(target)
    if obj is None:
        obj = _Objective(attr, target, np.zeros((len(tokens), model.cfg.d_model)), 0, False)
    if p_orig is None:
        with ad.no_grad():
            logits, _, _ = model.forward(tokens[:, None], state)
        p_orig = np.exp(_log_softmax(logits.data[:, -1]))
    delta = [d.copy() for d in init] if init is not None else SteeringDelta.zeros_like(state).arrays()
    params = model.parameters() + [attr.weight, attr.bias]
    for label in model.adapters:
        params += model.adapters[label].parameters()
    with frozen(params):
        for _ in range(cfg.iterations):
            dt = [Tensor(d, requires_grad=True) for d in delta]
            ad.backward(_objective_loss(model, state, tokens, obj, cfg, dt, p_orig, trace))
            grads = [t.grad for t in dt]
            if not all(np.isfinite(g).all() for g in grads):
                raise NumericError("non-finite steering gradient")
            _step(delta, grads, cfg)
            if cfg.kl_weight > 0 and cfg.kl_mode == "alternating":
                dt = [Tensor(d, requires_grad=True) for d in delta]
                _, probs, _ = _attribute_terms(model, state, tokens, obj, cfg, dt)
                ad.backward(_kl(probs, p_orig) * cfg.kl_weight)
                _step(delta, [t.grad for t in dt], cfg)
    n = len(state.keys)
    return SteeringDelta(delta[:n], delta[n:]).apply(state), delta


def _pad_delta(delta: list[np.ndarray], state: DecoderState) -> list[np.ndarray]:
    """Extend last step's offsets with zeros for the newly cached position."""
    out = []
    for d, ref in zip(delta, state.keys + state.values):
        grow = ref.shape[2] - d.shape[2]
        out.append(np.concatenate([d, np.zeros(d.shape[:2] + (grow,) + d.shape[3:])], axis=2) if grow else d)
    return out


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------
@dataclass
class Hypothesis:
    tokens: list
    attr_loss: float


@dataclass
class SteeredResult:
    chosen: list
    hypotheses: list  # Hypothesis objects sorted by attribute loss
    seconds: float = 0.0
    steps: int = 0
    incidents: int = 0


def score_hypotheses(model: DecoderLM, attr: AttributeModel, prefix, responses, target) -> np.ndarray:
    """-log p(target) of each response under the unsteered model; empty responses score +inf."""
    target = attr.index(target)
    out = np.full(len(responses), np.inf)
    live = [i for i, r in enumerate(responses) if len(r)]
    if live:
        feats = batch_response_features(model, [(prefix, responses[i]) for i in live])
        out[live] = -attr.log_proba(feats)[:, target]
    return out


def steered_generate(model: DecoderLM, prefix: Sequence[int], attr: AttributeModel | None, target,
                     cfg: SteeringConfig, max_new: int, rng: np.random.Generator, bag: Sequence[int] = (),
                     trace: list | None = None) -> SteeredResult:
    """Sample ``cfg.n_hypotheses`` steered continuations and rank them by attribute loss."""
    return steered_generate_many(model, [prefix], attr, target, cfg, max_new, rng, bag, trace)[0]


def steered_generate_many(model: DecoderLM, prefixes: Sequence[Sequence[int]], attr: AttributeModel | None,
                          target, cfg: SteeringConfig, max_new: int, rng: np.random.Generator,
                          bag: Sequence[int] = (), trace: list | None = None) -> list[SteeredResult]:
    """Steer several equal-length prefixes in one batch (rows never interact)."""
    if not prefixes:
        raise ContractError("no prefixes given")
    if len({len(p) for p in prefixes}) != 1:
        raise ContractError("batched steering needs equal-length prefixes")
    if cfg.active and attr is None:
        raise ConfigError("steering iterations need an attribute model")
    if cfg.bow_weight and not len(bag):
        raise ConfigError("weighted decoding needs a bag of words")
    start = time.perf_counter()
    n = cfg.n_hypotheses
    rows = len(prefixes) * n
    states, lasts = zip(*(prefill(model, p) for p in prefixes))
    if states[0].length:
        state = DecoderState([Tensor(np.concatenate([np.repeat(s.keys[i].data, n, axis=0) for s in states]))
                              for i in range(len(states[0].keys))],
                             [Tensor(np.concatenate([np.repeat(s.values[i].data, n, axis=0) for s in states]))
                              for i in range(len(states[0].values))], states[0].length)
    else:
        state = states[0]
    tokens = np.repeat(np.array(lasts, dtype=np.int64), n)
    unpert = state  # unsteered cache; ``state`` carries the steered one
    out = [[] for _ in range(rows)]
    done = np.zeros(rows, dtype=bool)
    past_sum = np.zeros((rows, model.cfg.d_model))
    past_count = 0
    incidents = steps = 0
    target_idx = attr.index(target) if attr is not None else 0
    prev_delta = None
    for t in range(max_new):
        if unpert.length >= model.cfg.max_len:
            break
        with ad.no_grad():
            logits_o, hidden_o, unpert_next = model.forward(tokens[:, None], unpert)
        logits_o = logits_o.data[:, -1]
        base = state if cfg.reset_per_token else unpert
        pert_state, delta = base, None
        if cfg.active and base.length:
            obj = _Objective(attr, target_idx, past_sum, past_count, include_current=t > 0)
            init = None if cfg.reset_per_token or prev_delta is None else _pad_delta(prev_delta, base)
            try:
                pert_state, delta = _perturb(model, base, tokens, attr, target_idx, cfg,
                                             np.exp(_log_softmax(logits_o)), obj, trace, init)
            except NumericError as exc:
                logger.warning("steering aborted at step %d: %s", t, exc)
                incidents += 1
                pert_state, delta = base, None
        if pert_state is unpert:
            logits_p, hidden_p, next_state = logits_o, hidden_o, unpert_next
        else:
            with ad.no_grad():
                lp, hidden_p, next_state = model.forward(tokens[:, None], pert_state)
            logits_p = lp.data[:, -1]
        scores = fuse_logits(logits_p, logits_o, cfg.fusion)
        if cfg.bow_weight:
            scores = weighted_decode(scores, bag, cfg.bow_weight)
        tokens = _pick_top_k(scores, cfg.top_k, rng.random(rows))
        if t > 0:
            past_sum = past_sum + hidden_p.data[:, -1]
            past_count += 1
        prev_delta = delta
        state, unpert = next_state, unpert_next
        steps += 1
        for i, tok in enumerate(tokens):
            if done[i]:
                continue
            if tok == EOS_ID:
                done[i] = True
            else:
                out[i].append(int(tok))
        if done.all():
            break
    elapsed = time.perf_counter() - start
    results = []
    for j, prefix in enumerate(prefixes):
        hyps = out[j * n:(j + 1) * n]
        if attr is not None:
            losses = score_hypotheses(model, attr, prefix, hyps, target_idx)
        else:
            losses = np.zeros(n)
        order = np.argsort(losses, kind="stable")
        ranked = [Hypothesis(hyps[i], float(losses[i])) for i in order]
        results.append(SteeredResult(ranked[0].tokens, ranked, elapsed / len(prefixes), steps, incidents))
    return results


def generate_with_adapter(model: DecoderLM, prefixes, label: str, max_new: int, k: int,
                          rng: np.random.Generator) -> tuple[list[list[int]], float, int]:
    """Top-k sampling through adapter ``label``; returns (responses, seconds, decode steps)."""
    from .model import generate

    start = time.perf_counter()
    out, steps = [], 0
    for p in prefixes:
        resp = generate(model, p, max_new, k, 1, rng, adapter=label)[0]
        out.append(resp)
        steps += min(len(resp) + 1, max_new)
    return out, time.perf_counter() - start, steps


# ---------------------------------------------------------------------------
# sweeps and distillation
# ---------------------------------------------------------------------------
@dataclass
class SweepCell:
    p: int
    alpha: float
    attr_loss: float
    ppl: float


def sweep_steering_grid(model: DecoderLM, attr: AttributeModel, prefixes, p_values, alpha_values, target,
                        scorer: BagOfWordsClassifier, cfg: SteeringConfig | None = None, max_new: int = 8,
                        seed: int = 0) -> list[SweepCell]:
    """Mean external-classifier loss and response perplexity for every (p, alpha) cell.

    Every cell decodes with the same seed and one hypothesis per prefix.
    """
    from .metrics import perplexity_from_logprobs
    from .model import token_logprobs

    if not len(p_values) or not len(alpha_values):
        raise ContractError("empty steering grid")
    if not prefixes:
        raise ContractError("no prefixes given")
    cfg = cfg or SteeringConfig()
    target = attr.index(target)
    cells = []
    for p in p_values:
        for a in alpha_values:
            c = replace(cfg, iterations=int(p), step_size=float(a), n_hypotheses=1)
            rng = np.random.default_rng(seed)
            responses = []
            for group in _group_by_length(prefixes):
                res = steered_generate_many(model, [prefixes[i] for i in group], attr, target, c, max_new, rng)
                responses += [(group_i, r.chosen) for group_i, r in zip(group, res)]
            responses.sort(key=lambda x: x[0])
            texts = [r for _, r in responses]
            live = [i for i, r in enumerate(texts) if r]
            attr_loss = float(np.mean(-scorer.log_proba([texts[i] for i in live])[:, target])) if live else math.inf
            seqs = [list(prefixes[i]) + texts[i] for i in live]
            lps = [lp[len(prefixes[i]) - 1:] for i, lp in zip(live, token_logprobs(model, seqs))]
            ppl = perplexity_from_logprobs(lps) if live else math.inf
            cells.append(SweepCell(int(p), float(a), attr_loss, ppl))
    return cells


def _group_by_length(prefixes) -> list[list[int]]:
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prefixes):
        groups.setdefault(len(p), []).append(i)
    return list(groups.values())


def write_sweep_csv(cells: Sequence[SweepCell], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "alpha", "attr_loss", "ppl"])
        for c in cells:
            w.writerow([c.p, repr(c.alpha), repr(c.attr_loss), repr(c.ppl)])


@dataclass
class Distillation:
    label: str
    train_prefixes: list
    heldout_prefixes: list
    dataset: list  # (prefix ids, response ids + EOS)
    train_result: object = None


def split_prefixes(prefixes, fraction: float = 0.8, seed: int = 0) -> tuple[list, list]:
    order = np.random.default_rng(seed).permutation(len(prefixes))
    cut = int(round(fraction * len(prefixes)))
    return [prefixes[i] for i in sorted(order[:cut])], [prefixes[i] for i in sorted(order[cut:])]


def distill_attribute(model: DecoderLM, attr: AttributeModel, target, prefixes, cfg: SteeringConfig,
                      bottleneck: int, train_cfg: TrainConfig | None = None, label: str | None = None,
                      max_new: int = 8, seed: int = 0, fraction: float = 0.8) -> Distillation:
    """Generate steered responses for 80% of the prefixes and fit an adapter on them."""
    if not prefixes:
        raise ContractError("distillation needs at least one prefix")
    train_cfg = train_cfg or ADAPTER_RECIPE
    label = label or f"attr:{attr.labels[attr.index(target)]}"
    train_p, held_p = split_prefixes(list(prefixes), fraction, seed)
    rng = np.random.default_rng(seed)
    dataset = []
    for group in _group_by_length(train_p):
        batch = [train_p[i] for i in group]
        for p, res in zip(batch, steered_generate_many(model, batch, attr, target, cfg, max_new, rng)):
            dataset.append((list(p), list(res.chosen) + [EOS_ID]))
    spawn_adapter(model, label, bottleneck, seed=seed)
    result = train_adapter(model, label, dataset, train_cfg)
    return Distillation(label, train_p, held_p, dataset, result)
