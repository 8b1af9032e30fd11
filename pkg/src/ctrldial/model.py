"""Causal Transformer decoder with an incremental key/value cache.

The decoder is pre-LayerNorm (GPT-2 style): each layer applies masked
multi-head self-attention and a ReLU feed-forward block, each wrapped in a
residual connection, and an optional residual adapter after the layer.  The
final hidden state goes through a LayerNorm and a linear head.

``DecoderLM.forward`` consumes a chunk of tokens together with the cached
keys/values of all earlier positions; whole-sequence and token-by-token
decoding therefore share a single code path.
"""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterParams, AdapterRegistry, adapter_forward
from .autodiff import Tensor
from .errors import CapacityError, ConfigError, ContractError, DimensionError, NumericError, TrainingDiverged
from .vocab import EOS_ID, PAD_ID

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ffn_dim: int = 128
    max_len: int = 128
    hops: int = 1
    dropout: float = 0.0
    use_aux_embeddings: bool = False
    aux_size: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.max_len < 1 or self.hops < 1 or self.n_layers < 1:
            raise ConfigError("max_len, hops and n_layers must be >= 1")
        if self.use_aux_embeddings and self.aux_size < 1:
            raise ConfigError("aux embeddings need aux_size >= 1")


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------
def sinusoidal_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((max_len, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


@dataclass
class TokenSequence:
    ids: list
    type_ids: list | None = None
    segment_ids: list | None = None

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class EmbeddingTable:
    word: Tensor
    positional: np.ndarray
    aux: Tensor | None = None


def embed(seq: TokenSequence, table: EmbeddingTable, offset: int = 0) -> Tensor:
    """Word + sinusoidal position (+ type/segment) embeddings, shape (t, d)."""
    ids = np.asarray(seq.ids, dtype=np.int64).reshape(1, -1)
    types = None if seq.type_ids is None else np.asarray(seq.type_ids).reshape(1, -1)
    segs = None if seq.segment_ids is None else np.asarray(seq.segment_ids).reshape(1, -1)
    x = _embed_ids(table, ids, offset, types, segs)
    return x.reshape(ids.shape[1], table.word.shape[1])


def _embed_ids(table: EmbeddingTable, ids: np.ndarray, offset: int, types=None, segs=None,
               word_vectors: Tensor | None = None) -> Tensor:
    t = ids.shape[1] if word_vectors is None else word_vectors.shape[1]
    if offset + t > table.positional.shape[0]:
        raise CapacityError(f"positions {offset}..{offset + t - 1} exceed max_len {table.positional.shape[0]}")
    if word_vectors is None:
        vocab = table.word.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise IndexError(f"token id out of range [0, {vocab})")
        x = table.word[ids]
    else:
        x = word_vectors
    x = x + table.positional[offset:offset + t]
    for aux_ids in (types, segs):
        if aux_ids is None:
            continue
        if table.aux is None:
            raise ConfigError("type/segment ids given but the model has no aux embeddings")
        if aux_ids.size and (aux_ids.min() < 0 or aux_ids.max() >= table.aux.shape[0]):
            raise IndexError(f"aux id out of range [0, {table.aux.shape[0]})")
        x = x + table.aux[aux_ids]
    return x


# ---------------------------------------------------------------------------
# attention and decoder layer
# ---------------------------------------------------------------------------
def causal_mask(n_query: int, n_key: int) -> np.ndarray:
    """Query i sits at absolute position n_key - n_query + i and sees keys <= that."""
    q = np.arange(n_query)[:, None] + (n_key - n_query)
    return np.arange(n_key)[None, :] <= q


def attention(q: Tensor, k: Tensor, v: Tensor, mask="none") -> Tensor:
    """Softmax(Q K^T / sqrt(d)) V with an optional causal or boolean mask."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes disagree: Q{q.shape} K{k.shape} V{v.shape}")
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if isinstance(mask, str):
        if mask == "causal":
            mask = causal_mask(q.shape[-2], k.shape[-2])
        elif mask == "none":
            mask = None
        else:
            raise ConfigError(f"unknown mask {mask!r}")
    return ad.softmax(scores, mask) @ v


def _vec(p: Tensor) -> Tensor:
    # per-example vectors (B, n) broadcast against (B, T, n)
    return p.reshape(p.shape[0], 1, p.shape[1]) if p.ndim == 2 else p


LAYER_FIELDS = ("ln1_scale", "ln1_shift", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "ln2_scale", "ln2_shift", "w1", "b1", "w2", "b2")


def init_layer_params(d: int, ffn: int, rng: np.random.Generator, n_layers: int = 1) -> dict[str, np.ndarray]:
    def lin(fan_in, fan_out, scale=1.0):
        return rng.normal(0.0, scale / math.sqrt(fan_in), (fan_in, fan_out))

    out_scale = 1.0 / math.sqrt(2 * n_layers)
    return {
        "ln1_scale": np.ones(d), "ln1_shift": np.zeros(d),
        "wq": lin(d, d), "bq": np.zeros(d),
        "wk": lin(d, d), "bk": np.zeros(d),
        "wv": lin(d, d), "bv": np.zeros(d),
        "wo": lin(d, d, out_scale), "bo": np.zeros(d),
        "ln2_scale": np.ones(d), "ln2_shift": np.zeros(d),
        "w1": lin(d, ffn), "b1": np.zeros(ffn),
        "w2": lin(ffn, d, out_scale), "b2": np.zeros(d),
    }


def decoder_layer(x: Tensor, p: dict, n_heads: int, past: tuple | None = None, eps: float = 1e-5,
                  dropout: float = 0.0, rng: np.random.Generator | None = None):
    """One pre-LN decoder layer.

    ``p`` maps LAYER_FIELDS to tensors; weights may carry a leading batch
    axis (one parameter set per example).  Returns the layer output and the
    full (past + new) key/value tensors of shape (B, heads, L, d_head).
    """
    b, t, d = x.shape
    dh = d // n_heads

    def heads(z):
        return z.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)

    a = ad.layer_norm(x, _vec(p["ln1_scale"]), _vec(p["ln1_shift"]), eps)
    q = heads(a @ p["wq"] + _vec(p["bq"]))
    k = heads(a @ p["wk"] + _vec(p["bk"]))
    v = heads(a @ p["wv"] + _vec(p["bv"]))
    if past is not None and past[0].shape[2]:
        k = ad.concat([past[0], k], axis=2)
        v = ad.concat([past[1], v], axis=2)
    y = attention(q, k, v, mask=causal_mask(t, k.shape[2]))
    y = y.transpose(0, 2, 1, 3).reshape(b, t, d) @ p["wo"] + _vec(p["bo"])
    y = _dropout(y, dropout, rng)
    x = x + y
    m = ad.layer_norm(x, _vec(p["ln2_scale"]), _vec(p["ln2_shift"]), eps)
    f = ad.relu(m @ p["w1"] + _vec(p["b1"])) @ p["w2"] + _vec(p["b2"])
    f = _dropout(f, dropout, rng)
    return x + f, (k, v)


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------
@dataclass
class DecoderState:
    """Cached keys/values, one entry per applied layer (n_layers * hops)."""

    keys: list
    values: list
    length: int = 0

    @classmethod
    def empty(cls, n_entries: int) -> "DecoderState":
        return cls([None] * n_entries, [None] * n_entries, 0)

    def __len__(self) -> int:
        return self.length

    @property
    def batch_size(self) -> int:
        return self.keys[0].shape[0] if self.keys and self.keys[0] is not None else 0

    def past(self, i: int):
        if self.keys[i] is None:
            return None
        return self.keys[i], self.values[i]

    def detach(self) -> "DecoderState":
        return DecoderState([Tensor(k.data) for k in self.keys], [Tensor(v.data) for v in self.values], self.length)

    def tile(self, n: int) -> "DecoderState":
        """Repeat a batch-1 state n times along the batch axis."""
        rep = lambda t: Tensor(np.repeat(t.data, n, axis=0))
        return DecoderState([rep(k) for k in self.keys], [rep(v) for v in self.values], self.length)

    def select(self, rows) -> "DecoderState":
        pick = lambda t: Tensor(t.data[rows])
        return DecoderState([pick(k) for k in self.keys], [pick(v) for v in self.values], self.length)

    def shifted(self, delta_keys: Sequence[Tensor], delta_values: Sequence[Tensor]) -> "DecoderState":
        keys = [k + dk for k, dk in zip(self.keys, delta_keys)]
        values = [v + dv for v, dv in zip(self.values, delta_values)]
        return DecoderState(keys, values, self.length)


# ---------------------------------------------------------------------------
# the language model
# ---------------------------------------------------------------------------
class DecoderLM:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.params: dict[str, Tensor] = {}
        self.params["embed.word"] = Tensor(rng.normal(0.0, 1.0, (cfg.vocab_size, d)), requires_grad=True)
        if cfg.use_aux_embeddings:
            self.params["embed.aux"] = Tensor(rng.normal(0.0, 1.0, (cfg.aux_size, d)), requires_grad=True)
        self.layers: list[dict[str, Tensor]] = []
        for i in range(cfg.n_layers):
            arrays = init_layer_params(d, cfg.ffn_dim, rng, cfg.n_layers * cfg.hops)
            layer = {}
            for name in LAYER_FIELDS:
                t = Tensor(arrays[name], requires_grad=True)
                self.params[f"layers.{i}.{name}"] = t
                layer[name] = t
            self.layers.append(layer)
        self.params["final_ln.scale"] = Tensor(np.ones(d), requires_grad=True)
        self.params["final_ln.shift"] = Tensor(np.zeros(d), requires_grad=True)
        self.params["head.weight"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, cfg.vocab_size)), requires_grad=True)
        self.params["head.bias"] = Tensor(np.zeros(cfg.vocab_size), requires_grad=True)
        self.embedding = EmbeddingTable(self.params["embed.word"], sinusoidal_table(cfg.max_len, d),
                                        self.params.get("embed.aux"))
        self.adapters = AdapterRegistry()
        self.dropout_rng: np.random.Generator | None = None

    # -- parameters ------------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def clone(self) -> "DecoderLM":
        other = copy.copy(self)
        other.params = {}
        other.layers = []
        for name, p in self.params.items():
            other.params[name] = Tensor(p.data.copy(), requires_grad=True)
        for i in range(self.cfg.n_layers):
            other.layers.append({f: other.params[f"layers.{i}.{f}"] for f in LAYER_FIELDS})
        other.embedding = EmbeddingTable(other.params["embed.word"], self.embedding.positional,
                                         other.params.get("embed.aux"))
        other.adapters = AdapterRegistry()
        for label in self.adapters:
            src = self.adapters[label]
            other.adapters.add(AdapterParams(src.label, src.d_model, src.bottleneck, copy.deepcopy(src.layers)))
        other.adapters.active = self.adapters.active
        return other

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = arrays[name].astype(np.float64).copy()

    def save(self, path) -> None:
        from .checkpoint import save_arrays

        save_arrays(path, "decoder_lm", asdict(self.cfg), {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "DecoderLM":
        from .checkpoint import load_arrays

        kind, config, arrays = load_arrays(path)
        if kind != "decoder_lm":
            raise ValueError(f"{path}: expected a decoder_lm checkpoint, found {kind!r}")
        model = cls(ModelConfig(**config))
        model.load_arrays(arrays)
        return model

    # -- forward -----------------------------------------------------------------
    def empty_state(self) -> DecoderState:
        return DecoderState.empty(self.cfg.n_layers * self.cfg.hops)

    def _resolve_adapter(self, adapter) -> AdapterParams | None:
        if adapter is None:
            adapter = self.adapters.active
        if adapter is None or isinstance(adapter, AdapterParams):
            return adapter
        return self.adapters[adapter]

    def forward(self, ids, state: DecoderState | None = None, adapter=None, type_ids=None,
                segment_ids=None, word_vectors: Tensor | None = None, train: bool = False):
        """Run a chunk of tokens after the cached ``state``.

        Returns ``(logits (B,T,V), hidden (B,T,d), new_state)`` where
        ``hidden`` is the final-LayerNorm output feeding the head.
        """
        cfg = self.cfg
        if word_vectors is None:
            ids = np.asarray(ids, dtype=np.int64)
            if ids.ndim == 1:
                ids = ids[None, :]
        state = state or self.empty_state()
        offset = state.length
        types = None if type_ids is None else np.asarray(type_ids).reshape(ids.shape)
        segs = None if segment_ids is None else np.asarray(segment_ids).reshape(ids.shape)
        x = _embed_ids(self.embedding, ids, offset, types, segs, word_vectors)
        adapter = self._resolve_adapter(adapter)
        rng = self.dropout_rng if (train and cfg.dropout > 0) else None
        keys, values = [], []
        for hop in range(cfg.hops):
            for li, layer in enumerate(self.layers):
                idx = hop * cfg.n_layers + li
                x, (k, v) = decoder_layer(x, layer, cfg.n_heads, state.past(idx), cfg.ln_eps, cfg.dropout, rng)
                if adapter is not None:
                    x = adapter_forward(x, adapter.layers[li], cfg.ln_eps)
                keys.append(k)
                values.append(v)
        hidden = ad.layer_norm(x, self.params["final_ln.scale"], self.params["final_ln.shift"], cfg.ln_eps)
        logits = hidden @ self.params["head.weight"] + self.params["head.bias"]
        return logits, hidden, DecoderState(keys, values, offset + x.shape[1])

    def step(self, token: int, state: DecoderState, adapter=None):
        """Feed one token; returns (logits (V,), new state)."""
        if state.length >= self.cfg.max_len:
            raise CapacityError(f"decoder state already holds max_len={self.cfg.max_len} positions")
        logits, _, new_state = self.forward([[token]], state, adapter)
        return logits.data[0, -1], new_state


def decoder_lm_step(token: int, state: DecoderState, model: DecoderLM, adapter=None):
    return model.step(token, state, adapter)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------
GRU_FIELDS = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")


def init_gru_params(d_in: int, d_hidden: int, rng: np.random.Generator) -> dict[str, Tensor]:
    p = {}
    for gate in "zrh":
        p[f"w_{gate}"] = Tensor(rng.normal(0.0, d_in ** -0.5, (d_in, d_hidden)), requires_grad=True)
        p[f"u_{gate}"] = Tensor(rng.normal(0.0, d_hidden ** -0.5, (d_hidden, d_hidden)), requires_grad=True)
        p[f"b_{gate}"] = Tensor(np.zeros(d_hidden), requires_grad=True)
    return p


def gru_step(x: Tensor, h: Tensor, p: dict) -> Tensor:
    """h' = (1 - z) * h + z * tanh(x W_h + (r * h) U_h + b_h); x (B, d) or (d,)."""
    if x.shape[-1] != p["w_z"].shape[0] or h.shape[-1] != p["u_z"].shape[0]:
        raise DimensionError(f"gru_step got x{x.shape}, h{h.shape} for params {p['w_z'].shape}")
    vector = x.ndim == 1
    if vector:
        x, h = x.reshape(1, -1), h.reshape(1, -1)
    z = ad.sigmoid(x @ p["w_z"] + h @ p["u_z"] + p["b_z"])
    r = ad.sigmoid(x @ p["w_r"] + h @ p["u_r"] + p["b_r"])
    cand = ad.tanh(x @ p["w_h"] + (r * h) @ p["u_h"] + p["b_h"])
    out = (1.0 - z) * h + z * cand
    return out.reshape(-1) if vector else out


def gru_encode(seq: Tensor, p: dict, h0: Tensor | None = None, lengths=None) -> Tensor:
    """Run the GRU over (B, T, d) and return the final state (B, z).

    With ``lengths`` row b stops updating after its first ``lengths[b]`` steps.
    """
    b, t, _ = seq.shape
    z = p["u_z"].shape[0]
    h = h0 if h0 is not None else Tensor(np.zeros((b, z)))
    if lengths is not None:
        lengths = np.asarray(lengths).reshape(b, 1)
    for i in range(t):
        new = gru_step(seq[:, i, :], h, p)
        if lengths is None:
            h = new
        else:
            keep = (i < lengths).astype(np.float64)
            h = new * keep + h * (1.0 - keep)
    return h


# ---------------------------------------------------------------------------
# sampling and generation
# ---------------------------------------------------------------------------
def sample_top_k(logits, k: int, rng: np.random.Generator):
    """Multinomial sample restricted to the k highest logits.

    ``logits`` is (V,) or (B, V); returns an int or an int array of length B.
    Ties at the cut-off are broken towards the lower token id.
    """
    arr = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    v = arr.shape[-1]
    if not 1 <= k <= v:
        raise ConfigError(f"top-k needs 1 <= k <= {v}, got {k}")
    u = rng.random(arr.shape[0])
    ids = _pick_top_k(arr, k, u)
    return int(ids[0]) if single else ids


def _pick_top_k(arr: np.ndarray, k: int, u: np.ndarray) -> np.ndarray:
    order = np.argsort(-arr, axis=-1, kind="stable")[:, :k]
    top = np.take_along_axis(arr, order, axis=-1)
    probs = np.exp(top - top[:, :1])
    cdf = np.cumsum(probs, axis=-1)
    pick = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=-1)
    return order[np.arange(arr.shape[0]), np.minimum(pick, k - 1)]


def greedy(logits) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(logits.data if isinstance(logits, Tensor) else logits))
    return arr.argmax(axis=-1)


def prefill(model: DecoderLM, prefix: Sequence[int], adapter=None):
    """Cache all prefix tokens but the last; returns (state, last token)."""
    if len(prefix) == 0:
        raise ContractError("prefix must contain at least one token")
    if len(prefix) > model.cfg.max_len:
        raise CapacityError(f"prefix of {len(prefix)} tokens exceeds max_len {model.cfg.max_len}")
    state = model.empty_state()
    if len(prefix) > 1:
        with ad.no_grad():
            _, _, state = model.forward([list(prefix[:-1])], state, adapter)
    return state, int(prefix[-1])


def generate(model: DecoderLM, prefix: Sequence[int], max_new: int, k: int = 10, n_hypotheses: int = 1,
             rng: np.random.Generator | None = None, adapter=None, greedy_decoding: bool = False,
             logits_hook: Callable | None = None) -> list[list[int]]:
    """Sample ``n_hypotheses`` continuations of ``prefix`` in one batch.

    Each continuation stops at EOS (not included) or after ``max_new``
    tokens.  One uniform draw per hypothesis is consumed per step.
    """
    if isinstance(prefix, TokenSequence):
        prefix = prefix.ids
    rng = rng if rng is not None else np.random.default_rng(0)
    state, last = prefill(model, prefix, adapter)
    if state.length:
        state = state.tile(n_hypotheses)
    tokens = np.full(n_hypotheses, last, dtype=np.int64)
    out = [[] for _ in range(n_hypotheses)]
    done = np.zeros(n_hypotheses, dtype=bool)
    with ad.no_grad():
        for _ in range(max_new):
            if state.length >= model.cfg.max_len:
                break
            logits, _, state = model.forward(tokens[:, None], state, adapter)
            step_logits = logits.data[:, -1]
            if logits_hook is not None:
                step_logits = logits_hook(step_logits)
            if greedy_decoding:
                tokens = greedy(step_logits)
            else:
                tokens = _pick_top_k(step_logits, k, rng.random(n_hypotheses))
            for i, tok in enumerate(tokens):
                if done[i]:
                    continue
                if tok == EOS_ID:
                    done[i] = True
                else:
                    out[i].append(int(tok))
            if done.all():
                break
    return out


def greedy_batch(model: DecoderLM, prefixes: Sequence[Sequence[int]], max_new: int, adapter=None) -> list[list[int]]:
    """Greedy continuations for many prefixes, batched by prefix length."""
    results: list = [None] * len(prefixes)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prefixes):
        groups.setdefault(len(p), []).append(i)
    with ad.no_grad():
        for length, idx in groups.items():
            batch = np.array([prefixes[i] for i in idx], dtype=np.int64)
            state = model.empty_state()
            if length > 1:
                _, _, state = model.forward(batch[:, :-1], state, adapter)
            tokens = batch[:, -1]
            outs = [[] for _ in idx]
            done = np.zeros(len(idx), dtype=bool)
            for _ in range(max_new):
                if state.length >= model.cfg.max_len:
                    break
                logits, _, state = model.forward(tokens[:, None], state, adapter)
                tokens = logits.data[:, -1].argmax(axis=-1)
                for j, tok in enumerate(tokens):
                    if done[j]:
                        continue
                    if tok == EOS_ID:
                        done[j] = True
                    else:
                        outs[j].append(int(tok))
                if done.all():
                    break
            for j, i in enumerate(idx):
                results[i] = outs[j]
    return results


# ---------------------------------------------------------------------------
# loss and perplexity
# ---------------------------------------------------------------------------
Pair = tuple  # (input ids, output ids)


def make_batch(pairs: Sequence[Pair], max_len: int, mode: str = "output", ids=None):
    """Right-padded token matrix plus next-token targets and loss weights."""
    if mode not in ("output", "all"):
        raise ConfigError(f"loss mode must be 'output' or 'all', not {mode!r}")
    seqs = []
    for n, (x, y) in enumerate(pairs):
        if len(y) == 0:
            raise ContractError(f"sample {ids[n] if ids else n}: empty output segment")
        seq = list(x) + list(y)
        if len(seq) > max_len + 1:
            raise CapacityError(f"sample {ids[n] if ids else n}: {len(seq)} tokens exceed max_len {max_len}")
        seqs.append((seq, len(x)))
    width = max(len(s) for s, _ in seqs)
    tokens = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    weights = np.zeros((len(seqs), width - 1))
    for i, (seq, n_in) in enumerate(seqs):
        tokens[i, :len(seq)] = seq
        start = max(n_in - 1, 0) if mode == "output" else 0
        weights[i, start:len(seq) - 1] = 1.0
    return tokens[:, :-1], tokens[:, 1:], weights


def lm_loss(model: DecoderLM, pairs: Sequence[Pair], mode: str = "output", adapter=None,
            train: bool = False) -> Tensor:
    """Mean token NLL over the output segment (or the whole sequence)."""
    inputs, targets, weights = make_batch(pairs, model.cfg.max_len, mode)
    logits, _, _ = model.forward(inputs, None, adapter, train=train)
    v = logits.shape[-1]
    return ad.cross_entropy(logits.reshape(-1, v), targets.reshape(-1), "logits", weights.reshape(-1))


def token_logprobs(model: DecoderLM, seqs: Sequence[Sequence[int]], adapter=None) -> list[np.ndarray]:
    """log p(x_i | x_<i) for i >= 1 of every sequence, in extended precision."""
    out = []
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        groups.setdefault(len(s), []).append(i)
    res: list = [None] * len(seqs)
    with ad.no_grad():
        for length, idx in groups.items():
            if length < 2:
                for i in idx:
                    res[i] = np.zeros(0, dtype=np.longdouble)
                continue
            batch = np.array([seqs[i] for i in idx], dtype=np.int64)
            logits, _, _ = model.forward(batch[:, :-1], None, adapter)
            lp = log_softmax_ld(logits.data)
            picked = np.take_along_axis(lp, batch[:, 1:, None], axis=-1)[..., 0]
            for j, i in enumerate(idx):
                res[i] = picked[j]
    out.extend(res)
    return out


def log_softmax_ld(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.longdouble)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------
@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    optimizer: str = "adam"
    warmup_steps: int = 100
    patience: int = 0  # 0 disables early stopping
    restore_best: bool = True
    clip_norm: float | None = 1.0
    loss_mode: str = "output"
    seed: int = 0
    max_steps: int | None = None


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float, warmup_steps: int = 0):
        self.params = list(params)
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.t = 0

    def current_lr(self) -> float:
        if self.warmup_steps > 0:
            return self.lr * min(1.0, self.t / self.warmup_steps)
        return self.lr

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)


class SGD(Optimizer):
    def step(self) -> None:
        self.t += 1
        lr = self.current_lr()
        for p in self.params:
            p.data = p.data - lr * p.grad


class Adam(Optimizer):
    def __init__(self, params, lr, warmup_steps=0, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr, warmup_steps)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        lr = self.current_lr()
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.warmup_steps)
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.warmup_steps)
    raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")


@dataclass
class TrainResult:
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    valid_losses: list = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False

    def curve_rows(self):
        """(step, train_loss, valid_loss) rows; valid_loss set at epoch ends."""
        valid_at = {}
        for step, loss in self.valid_losses:
            valid_at[step] = loss
        return [(s, loss, valid_at.get(s, "")) for s, loss in enumerate(self.step_losses, start=1)]


class frozen:
    """Temporarily stop gradient tracking for ``params``."""

    def __init__(self, params: Sequence[Tensor]):
        self.params = list(params)

    def __enter__(self):
        self.flags = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, f in zip(self.params, self.flags):
            p.requires_grad = f
            if f and p.grad is None:
                p.grad = np.zeros_like(p.data)


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


def fit(model: DecoderLM, data: Sequence[Pair], cfg: TrainConfig, valid: Sequence[Pair] | None = None,
        params: Sequence[Tensor] | None = None, adapter=None, extra_loss: Callable | None = None,
        grad_hook: Callable | None = None, batch_loss: Callable | None = None) -> TrainResult:
    """Mini-batch training loop.

    ``params`` defaults to every base-model parameter; everything else is
    frozen for the duration.  ``extra_loss()`` is added to each batch loss
    (regularisers), ``grad_hook(params)`` may rewrite gradients before the
    update (gradient projection) and ``batch_loss(batch)`` replaces the
    default language-model loss.
    """
    if not data:
        raise ContractError("training data is empty")
    params = list(params) if params is not None else model.parameters()
    trainable = {id(p) for p in params}
    others = [p for p in model.parameters() if id(p) not in trainable]
    for label in model.adapters:
        others.extend(p for p in model.adapters[label].parameters() if id(p) not in trainable)
    opt = make_optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    model.dropout_rng = np.random.default_rng(cfg.seed + 1)
    result = TrainResult()
    best = (math.inf, None)
    rises = 0
    loss_fn = batch_loss or (lambda batch: lm_loss(model, batch, cfg.loss_mode, adapter, train=True))
    with frozen(others):
        for p in params:
            p.requires_grad = True
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(data))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch = [data[i] for i in order[start:start + cfg.batch_size]]
                opt.zero_grad()
                try:
                    loss = loss_fn(batch)
                    if extra_loss is not None:
                        loss = loss + extra_loss()
                except NumericError as exc:
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {result.steps + 1}: {exc}") from exc
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {result.steps + 1}")
                ad.backward(loss)
                if grad_hook is not None:
                    grad_hook(params)
                if cfg.clip_norm:
                    clip_gradients(params, cfg.clip_norm)
                opt.step()
                result.steps += 1
                result.step_losses.append(value)
                total += value * len(batch)
                if cfg.max_steps and result.steps >= cfg.max_steps:
                    break
            result.epoch_losses.append(total / len(data))
            if valid:
                with ad.no_grad():
                    vloss = evaluate_loss(model, valid, cfg.loss_mode, adapter, cfg.batch_size)
                result.valid_losses.append((result.steps, vloss))
                if vloss < best[0]:
                    best = (vloss, [p.data.copy() for p in params])
                    rises = 0
                else:
                    rises += 1
                logger.debug("epoch %d train %.4f valid %.4f", epoch, result.epoch_losses[-1], vloss)
                if cfg.patience and rises >= cfg.patience:
                    result.stopped_early = True
                    break
            if cfg.max_steps and result.steps >= cfg.max_steps:
                break
    if valid and cfg.restore_best and best[1] is not None:
        for p, saved in zip(params, best[1]):
            p.data = saved
    model.dropout_rng = None
    return result


def evaluate_loss(model: DecoderLM, data: Sequence[Pair], mode: str = "output", adapter=None,
                  batch_size: int = 64) -> float:
    """Token-weighted mean NLL over ``data``."""
    total, count = 0.0, 0.0
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            batch = data[start:start + batch_size]
            _, _, w = make_batch(batch, model.cfg.max_len, mode)
            n = w.sum()
            total += lm_loss(model, batch, mode, adapter).item() * n
            count += n
    return total / count


def train(model: DecoderLM, dataset: Sequence[Pair], cfg: TrainConfig, valid=None) -> TrainResult:
    return fit(model, dataset, cfg, valid=valid)


def next_token_accuracy(model: DecoderLM, pairs: Sequence[Pair], mode: str = "output", adapter=None) -> float:
    inputs, targets, weights = make_batch(pairs, model.cfg.max_len, mode)
    with ad.no_grad():
        logits, _, _ = model.forward(inputs, None, adapter)
    pred = logits.data.argmax(axis=-1)
    return float(((pred == targets) * weights).sum() / weights.sum())


def encode_pair(vocab, source: str, target: str) -> Pair:
    """BOS + source tokens -> target tokens + EOS."""
    return vocab.encode(source, bos=True), vocab.encode(target, eos=True)
