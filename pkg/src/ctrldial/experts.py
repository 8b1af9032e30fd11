"""Mixing a bank of expert layers: over parameters (AoP), over representations
(AoR) and as a classic mixture of experts (MoE).

With weights ``alpha`` on the simplex:

* AoP runs one layer whose parameters are ``sum_i alpha_i * theta_i``;
* AoR / MoE run every expert and return ``sum_i alpha_i * f_i(X)``.

For affine experts the two coincide; AoP is cheaper whenever the sequence
has at least two positions and there are at least two experts (see
:func:`flop_count`).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .model import (
    LAYER_FIELDS,
    Adam,
    DecoderLM,
    ModelConfig,
    TrainConfig,
    clip_gradients,
    decoder_layer,
    gru_encode,
    init_gru_params,
    init_layer_params,
    make_batch,
)
from .vocab import EOS_ID


# ---------------------------------------------------------------------------
# the bank
# ---------------------------------------------------------------------------
@dataclass
class ExpertBank:
    """``params[name]`` stacks the r experts along axis 0; ``keys`` is d x r."""

    params: dict
    keys: Tensor
    labels: list
    kind: str = "decoder"  # "decoder" (one Transformer layer) or "affine" (X W)
    n_heads: int = 1

    def __post_init__(self):
        sizes = {p.shape[0] for p in self.params.values()}
        if len(sizes) != 1:
            raise DimensionError(f"experts are not shape-congruent: leading sizes {sorted(sizes)}")
        if self.keys.shape[1] != self.r:
            raise DimensionError(f"key matrix has {self.keys.shape[1]} columns for {self.r} experts")
        if len(self.labels) != self.r:
            raise DimensionError(f"{len(self.labels)} labels for {self.r} experts")

    @property
    def r(self) -> int:
        return next(iter(self.params.values())).shape[0]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values()) + [self.keys]

    def expert(self, i: int) -> dict:
        return {k: Tensor(v.data[i]) for k, v in self.params.items()}

    def layer(self, x: Tensor, p: dict) -> Tensor:
        if self.kind == "affine":
            return x @ p["w"]
        return decoder_layer(x, p, self.n_heads)[0]

    @classmethod
    def decoder(cls, r: int, d: int, ffn: int, n_heads: int, labels: Sequence[str] | None = None,
                seed: int = 0) -> "ExpertBank":
        rng = np.random.default_rng(seed)
        per = [init_layer_params(d, ffn, rng) for _ in range(r)]
        params = {k: Tensor(np.stack([p[k] for p in per]), requires_grad=True) for k in LAYER_FIELDS}
        keys = Tensor(rng.normal(0.0, d ** -0.5, (d, r)), requires_grad=True)
        return cls(params, keys, list(labels or [f"skill{i}" for i in range(r)]), "decoder", n_heads)

    @classmethod
    def affine(cls, r: int, d: int, n: int, seed: int = 0, rng: np.random.Generator | None = None) -> "ExpertBank":
        rng = rng or np.random.default_rng(seed)
        w = Tensor(rng.normal(0.0, 1.0, (r, d, n)))
        keys = Tensor(rng.normal(0.0, 1.0, (d, r)))
        return cls({"w": w}, keys, [f"expert{i}" for i in range(r)], "affine")


def _check_alpha(alpha, r: int) -> Tensor:
    alpha = ad.as_tensor(alpha)
    if alpha.shape[-1] != r or alpha.ndim not in (1, 2):
        raise DimensionError(f"alpha of shape {alpha.shape} does not match {r} experts")
    return alpha


def validate_simplex(alpha, r: int, tol: float = 1e-9) -> np.ndarray:
    """Accept a simplex vector, or renormalise a non-negative (e.g. multi-hot) one."""
    a = np.asarray(alpha, dtype=np.float64)
    if a.shape != (r,):
        raise ContractError(f"override must have length {r}, got shape {a.shape}")
    if (a < 0).any() or not np.isfinite(a).all() or a.sum() <= 0:
        raise ContractError("override must be non-negative with a positive sum")
    return a if abs(a.sum() - 1.0) <= tol else a / a.sum()


# ---------------------------------------------------------------------------
# attention over skills
# ---------------------------------------------------------------------------
@dataclass
class SkillAttention:
    query: Tensor  # (B, d)
    logits: Tensor  # (B, r) = q K
    alpha: Tensor  # (B, r) softmax of logits


def skill_attention(h: Tensor, bank: ExpertBank, gru: dict, lengths=None) -> SkillAttention:
    """Final GRU state over ``h`` (B, T, d) as query; alpha = softmax(q K).

    ``lengths`` limits row b to its first ``lengths[b]`` positions.
    """
    if bank.r < 1:
        raise ContractError("empty expert bank")
    if h.ndim == 2:
        h = h.reshape(1, *h.shape)
    if h.shape[-1] != gru["w_z"].shape[0]:
        raise DimensionError(f"context width {h.shape[-1]} does not match the query encoder")
    q = gru_encode(h, gru, lengths=lengths)
    if q.shape[-1] != bank.keys.shape[0]:
        raise DimensionError(f"query width {q.shape[-1]} does not match key rows {bank.keys.shape[0]}")
    logits = q @ bank.keys
    return SkillAttention(q, logits, ad.softmax(logits))


def skill_loss(logits, skills) -> Tensor:
    """Sum over skills of binary cross-entropy between sigmoid(logits) and the skill vector.

    Probabilities are clamped to [1e-12, 1 - 1e-12].
    """
    logits = ad.as_tensor(logits)
    v = np.asarray(skills, dtype=np.float64)
    if v.shape != logits.shape:
        raise DimensionError(f"skill vector shape {v.shape} != logits shape {logits.shape}")
    z = logits.data
    p = np.clip(ad._sigmoid(z), 1e-12, 1.0 - 1e-12)
    value = -(v * np.log(p) + (1.0 - v) * np.log(1.0 - p)).sum()
    s = ad._sigmoid(z)
    clamped = (s < 1e-12) | (s > 1.0 - 1e-12)

    def bw(g):
        return (np.where(clamped, 0.0, (s - v)) * g,)

    return Tensor._from_op(np.asarray(value), (logits,), bw, "skill_bce")


# ---------------------------------------------------------------------------
# mixing and forward paths
# ---------------------------------------------------------------------------
def mix_parameters(bank: ExpertBank, alpha) -> dict:
    """theta* = sum_i alpha_i theta_i for every container.

    ``alpha`` of shape (r,) gives one parameter set, (B, r) one per example
    (each container then gains a leading batch axis).
    """
    alpha = _check_alpha(alpha, bank.r)
    out = {}
    for name, stacked in bank.params.items():
        flat = stacked.reshape(bank.r, -1)
        if alpha.ndim == 1:
            mixed = (alpha.reshape(1, bank.r) @ flat).reshape(stacked.shape[1:])
        else:
            mixed = (alpha @ flat).reshape(alpha.shape[0], *stacked.shape[1:])
        out[name] = mixed
    return out


def aop_forward(x: Tensor, bank: ExpertBank, alpha) -> Tensor:
    return bank.layer(ad.as_tensor(x), mix_parameters(bank, alpha))


def _representation_mix(x: Tensor, bank: ExpertBank, alpha, experts: Callable[[int], dict]) -> Tensor:
    alpha = _check_alpha(alpha, bank.r)
    x = ad.as_tensor(x)
    total = None
    for i in range(bank.r):
        y = bank.layer(x, experts(i))
        a = alpha[i] if alpha.ndim == 1 else alpha[:, i].reshape(alpha.shape[0], *([1] * (y.ndim - 1)))
        term = y * a
        total = term if total is None else total + term
    return total


def _expert_view(bank: ExpertBank) -> Callable[[int], dict]:
    return lambda i: {k: v[i] for k, v in bank.params.items()}


def aor_forward(x: Tensor, bank: ExpertBank, alpha) -> Tensor:
    """Weighted sum of the expert layers' output representations."""
    return _representation_mix(x, bank, alpha, _expert_view(bank))


def moe_forward(x: Tensor, bank: ExpertBank, alpha) -> Tensor:
    """Mixture of experts: sum_i alpha_i f_i(X) with every expert evaluated."""
    return _representation_mix(x, bank, alpha, _expert_view(bank))


def expert_forward(x: Tensor, bank: ExpertBank, j: int) -> Tensor:
    return bank.layer(ad.as_tensor(x), bank.expert(j))


# ---------------------------------------------------------------------------
# operation counting
# ---------------------------------------------------------------------------
@dataclass
class OpCount:
    mode: str
    r: int
    t: int
    d: int
    n: int
    count: int


def flop_count(mode: str, r: int, t: int, d: int, n: int) -> OpCount:
    """Multiplications of r affine experts (d -> n) applied to t positions.

    MoE: every expert's output (r t d n) plus the weighting (r t n).
    AoP: mixing the weights (r d n) plus one forward (t d n).
    AoR shares the MoE count.
    """
    if min(r, t, d, n) < 1:
        raise ConfigError("flop_count needs positive r, t, d, n")
    mode = mode.upper()
    if mode in ("MOE", "AOR"):
        return OpCount(mode, r, t, d, n, r * t * d * n + r * t * n)
    if mode == "AOP":
        return OpCount(mode, r, t, d, n, (r + t) * d * n)
    raise ConfigError(f"unknown mode {mode!r}")


class CountingScalar:
    """Float wrapper that counts multiplications into a shared tally."""

    __slots__ = ("value", "tally")

    def __init__(self, value: float, tally: list):
        self.value = value
        self.tally = tally

    def _wrap(self, value):
        return CountingScalar(value, self.tally)

    def __mul__(self, other):
        self.tally[0] += 1
        return self._wrap(self.value * _val(other))

    __rmul__ = __mul__

    def __add__(self, other):
        return self._wrap(self.value + _val(other))

    __radd__ = __add__


def _val(x):
    return x.value if isinstance(x, CountingScalar) else x


def _counting(a: np.ndarray, tally: list) -> np.ndarray:
    out = np.empty(a.shape, dtype=object)
    for idx, v in np.ndenumerate(a):
        out[idx] = CountingScalar(float(v), tally)
    return out


def _object_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    out = np.empty((m, n), dtype=object)
    for i in range(m):
        for j in range(n):
            acc = a[i, 0] * b[0, j]
            for q in range(1, k):
                acc = acc + a[i, q] * b[q, j]
            out[i, j] = acc
    return out


def instrumented_count(mode: str, r: int, t: int, d: int, n: int, seed: int = 0) -> tuple[int, np.ndarray]:
    """Execute the affine-expert forward on counting scalars; returns (tally, output values)."""
    rng = np.random.default_rng(seed)
    tally = [0]
    x = _counting(rng.normal(size=(t, d)), tally)
    ws = [_counting(rng.normal(size=(d, n)), tally) for _ in range(r)]
    alpha = rng.dirichlet(np.ones(r))
    a = [CountingScalar(float(v), tally) for v in alpha]
    mode = mode.upper()
    if mode in ("MOE", "AOR"):
        total = None
        for ai, w in zip(a, ws):
            term = _object_matmul(x, w) * ai
            total = term if total is None else total + term
    elif mode == "AOP":
        mixed = None
        for ai, w in zip(a, ws):
            term = w * ai
            mixed = term if mixed is None else mixed + term
        total = _object_matmul(x, mixed)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    values = np.vectorize(_val, otypes=[float])(total)
    return tally[0], values


def write_flop_csv(rows: Sequence[OpCount], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "r", "t", "d", "n", "count"])
        for c in rows:
            w.writerow([c.mode, c.r, c.t, c.d, c.n, c.count])


# ---------------------------------------------------------------------------
# a skill-conditioned language model
# ---------------------------------------------------------------------------
class SkillLM:
    """Shared decoder trunk, a GRU skill query and one mixed expert layer on top.

    ``mode`` selects how the experts are combined: "aop", "aor" or "moe".
    The query reads the trunk's states over the input segment only.
    """

    def __init__(self, cfg: ModelConfig, labels: Sequence[str], mode: str = "aop", seed: int = 0):
        if mode not in ("aop", "aor", "moe"):
            raise ConfigError(f"unknown mixing mode {mode!r}")
        self.mode = mode
        self.trunk = DecoderLM(cfg, seed=seed)
        rng = np.random.default_rng(seed + 1)
        self.bank = ExpertBank.decoder(len(labels), cfg.d_model, cfg.ffn_dim, cfg.n_heads, labels, seed=seed + 2)
        self.gru = init_gru_params(cfg.d_model, cfg.d_model, rng)
        self.cfg = cfg

    @property
    def labels(self) -> list:
        return self.bank.labels

    def parameters(self) -> list[Tensor]:
        return self.trunk.parameters() + self.bank.parameters() + list(self.gru.values())

    def attention(self, ids: np.ndarray, n_input: int | np.ndarray) -> SkillAttention:
        _, h = self._trunk(ids)
        return self._attention_from(h, n_input)

    def _trunk(self, ids):
        t = self.trunk
        x = t.embedding.word[ids] + t.embedding.positional[: ids.shape[1]]
        for layer in t.layers:
            x, _ = decoder_layer(x, layer, t.cfg.n_heads, None, t.cfg.ln_eps)
        return None, x

    def _attention_from(self, h: Tensor, n_input) -> SkillAttention:
        n_input = np.broadcast_to(np.asarray(n_input), (h.shape[0],))
        width = int(n_input.max())
        if int(n_input.min()) == width:
            return skill_attention(h[:, :width], self.bank, self.gru)
        return skill_attention(h[:, :width], self.bank, self.gru, lengths=n_input)

    def forward(self, ids, n_input, alpha=None):
        """Logits (B, T, V) and the skill attention (None when ``alpha`` is given)."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        _, h = self._trunk(ids)
        att = None
        if alpha is None:
            att = self._attention_from(h, n_input)
            alpha = att.alpha
        else:
            alpha = ad.as_tensor(np.broadcast_to(np.asarray(alpha, dtype=np.float64), (ids.shape[0], self.bank.r)))
        mix = {"aop": aop_forward, "aor": aor_forward, "moe": moe_forward}[self.mode]
        y = mix(h, self.bank, alpha)
        t = self.trunk
        y = ad.layer_norm(y, t.params["final_ln.scale"], t.params["final_ln.shift"], t.cfg.ln_eps)
        return y @ t.params["head.weight"] + t.params["head.bias"], att

    def loss(self, batch, skills=None, use_skill_loss: bool = True) -> Tensor:
        """Output-segment NLL plus (optionally) the skill BCE, summed."""
        pairs = [(x, y) for x, y in batch]
        inputs, targets, weights = make_batch(pairs, self.cfg.max_len, "output")
        n_input = np.array([len(x) for x, _ in pairs])
        logits, att = self.forward(inputs, n_input)
        v = logits.shape[-1]
        loss = ad.cross_entropy(logits.reshape(-1, v), targets.reshape(-1), "logits", weights.reshape(-1))
        if use_skill_loss and skills is not None:
            loss = loss + skill_loss(att.logits, np.asarray(skills)) * (1.0 / len(pairs))
        return loss

    def fit(self, data, skills, cfg: TrainConfig, use_skill_loss: bool = True) -> list[float]:
        """``data`` holds (input ids, output ids) pairs, ``skills`` the matching skill vectors."""
        rng = np.random.default_rng(cfg.seed)
        params = self.parameters()
        for p in params:
            p.requires_grad = True
            p.zero_grad()
        opt = Adam(params, cfg.lr, cfg.warmup_steps)
        losses = []
        for _ in range(cfg.epochs):
            order = rng.permutation(len(data))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                opt.zero_grad()
                loss = self.loss([data[i] for i in idx], [skills[i] for i in idx], use_skill_loss)
                ad.backward(loss)
                if cfg.clip_norm:
                    clip_gradients(params, cfg.clip_norm)
                opt.step()
                losses.append(loss.item())
        return losses

    def generate(self, prefix: Sequence[int], max_new: int, alpha=None) -> tuple[list[int], np.ndarray]:
        """Greedy decoding; alpha is computed from ``prefix`` unless given.  Returns (tokens, alpha)."""
        ids = list(prefix)
        with ad.no_grad():
            if alpha is None:
                alpha = self.attention(np.array([ids]), len(ids)).alpha.data[0]
            alpha = np.asarray(alpha, dtype=np.float64)
            out = []
            for _ in range(max_new):
                if len(ids) >= self.cfg.max_len:
                    break
                logits, _ = self.forward(np.array([ids]), len(prefix), alpha)
                tok = int(logits.data[0, -1].argmax())
                if tok == EOS_ID:
                    break
                out.append(tok)
                ids.append(tok)
        return out, alpha


def compose_skills(model: SkillLM, alpha_override, prefix: Sequence[int], max_new: int) -> list[int]:
    """Decode with a fixed skill mixture; multi-hot vectors are renormalised."""
    alpha = validate_simplex(alpha_override, model.bank.r)
    return model.generate(prefix, max_new, alpha)[0]


# ---------------------------------------------------------------------------
# property bench
# ---------------------------------------------------------------------------
DEFAULT_GRID = ((13, 16, 64, 64), (2, 2, 1, 1), (2, 8, 16, 16), (4, 32, 32, 64), (8, 4, 128, 32))


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)  # OpCount per (mode, grid point)
    log: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def check(self, ok: bool, what: str) -> None:
        self.log.append(("PASS " if ok else "FAIL ") + what)
        if not ok:
            self.failures.append(what)


def property_bench(grid: Sequence[tuple] = DEFAULT_GRID, n_linear: int = 100, n_onehot: int = 10,
                   instrument_limit: int = 20_000, seed: int = 0, inject_fault: bool = False) -> BenchReport:
    """Cost formula vs. instrumented tallies, AoP < MoE, linear AoP == MoE and one-hot identities.

    Tallies are only executed for grid points whose MoE count is at most
    ``instrument_limit`` multiplications.  ``inject_fault`` perturbs the
    AoP mixture so the bench must report a failure.
    """
    rep = BenchReport()
    rng = np.random.default_rng(seed)
    for r, t, d, n in grid:
        moe, aop = flop_count("moe", r, t, d, n), flop_count("aop", r, t, d, n)
        rep.rows += [moe, aop]
        if t >= 2 and r >= 2:
            rep.check(aop.count < moe.count, f"AoP < MoE at (r={r}, t={t}, d={d}, n={n}): {aop.count} vs {moe.count}")
        if moe.count <= instrument_limit:
            for c in (moe, aop):
                tally, _ = instrumented_count(c.mode, r, t, d, n, seed)
                rep.check(tally == c.count, f"{c.mode} tally {tally} == formula {c.count} at {(r, t, d, n)}")
    worst = 0.0
    for _ in range(n_linear):
        r, t, d, n = (int(v) for v in rng.integers(1, 9, size=4))
        bank = ExpertBank.affine(r, d, n, rng=rng)
        alpha = rng.dirichlet(np.ones(r))
        # the fault hook feeds AoP a slightly different mixture than MoE
        alpha_aop = alpha + 1e-3 * np.eye(r)[0] if inject_fault else alpha
        x = Tensor(rng.normal(size=(t, d)))
        diff = aop_forward(x, bank, alpha_aop).data - moe_forward(x, bank, alpha).data
        worst = max(worst, float(np.abs(diff).max()))
    rep.check(worst <= 1e-9, f"linear AoP == MoE over {n_linear} instances (max abs diff {worst:.3g})")
    for k in range(n_onehot):
        bank = ExpertBank.decoder(3, 8, 16, 2, seed=seed + k)
        x = Tensor(rng.normal(size=(1, 5, 8)))
        j = k % 3
        one = np.eye(3)[j]
        ref = expert_forward(x, bank, j).data
        same = all(np.array_equal(f(x, bank, one).data, ref) for f in (aop_forward, aor_forward, moe_forward))
        rep.check(same, f"one-hot alpha e_{j} reproduces expert {j} bitwise (trial {k})")
    return rep

