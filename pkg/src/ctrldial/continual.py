"""Continual learning over a curriculum of dialogue domains.

Strategies: VANILLA fine-tuning, L2 and EWC regularisation, A-GEM gradient
projection, REPLAY of an episodic memory, ADAPTERCL (one residual adapter
per task, selected at test time by perplexity) and the MULTI upper bound
(one run on the union of all tasks).  After every task the model is tested
on all tasks without a task id, filling one row of the matrix R.
"""
from __future__ import annotations

import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from .adapters import spawn_adapter, train_adapter
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .metrics import MetricReport, bleu, intent_accuracy, joint_goal_accuracy, perplexity_from_logprobs
from .model import DecoderLM, ModelConfig, TrainConfig, fit, greedy_batch, lm_loss, token_logprobs
from .synth import TaskDataset
from .vocab import Vocab

logger = logging.getLogger(__name__)

STRATEGIES = ("VANILLA", "L2", "EWC", "AGEM", "REPLAY", "ADAPTERCL", "MULTI")
METRICS = {"intent_accuracy": intent_accuracy, "joint_goal_accuracy": joint_goal_accuracy, "bleu": bleu}


def task_seed(name: str, base_seed: int) -> int:
    """Seed that depends on the task itself, not on its position in the curriculum."""
    return (zlib.crc32(name.encode("utf-8")) ^ (base_seed * 0x9E3779B1)) & 0x7FFFFFFF


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------
@dataclass
class EncodedTask:
    name: str
    train: list  # (input ids, output ids) pairs
    test: list
    test_gold: list  # output strings
    valid: list = field(default_factory=list)


@dataclass
class Curriculum:
    tasks: list
    vocab: Vocab
    seed: int = 0

    @classmethod
    def from_datasets(cls, datasets: Sequence[TaskDataset], vocab: Vocab | None = None, seed: int = 0) -> "Curriculum":
        names = [d.name for d in datasets]
        if len(set(names)) != len(names):
            raise ConfigError(f"task ids must be unique, got {names}")
        if vocab is None:
            vocab = Vocab.from_texts(s.input + " " + s.output for d in datasets
                                     for s in d.train + d.valid + d.test)
        enc = lambda ss: [(vocab.encode(s.input, bos=True), vocab.encode(s.output, eos=True)) for s in ss]
        tasks = [EncodedTask(d.name, enc(d.train), enc(d.test), [s.output for s in d.test], enc(d.valid))
                 for d in datasets]
        return cls(tasks, vocab, seed)

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tasks]

    def permuted(self, seed: int) -> "Curriculum":
        order = np.random.default_rng(seed).permutation(len(self.tasks))
        return Curriculum([self.tasks[i] for i in order], self.vocab, seed)


class EpisodicMemory:
    """Per-task store of at most ``capacity`` training pairs (None keeps everything)."""

    def __init__(self, capacity: int | None, seed: int = 0):
        if capacity is not None and capacity < 0:
            raise ConfigError("memory capacity must be >= 0")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self.store: dict[str, list] = {}
        self.ids: dict[str, list[int]] = {}

    def add_task(self, name: str, data: Sequence) -> None:
        ids = reservoir_sample(len(data), self.capacity, self.rng)
        self.ids[name] = ids
        self.store[name] = [data[i] for i in ids]

    def samples(self) -> list:
        return [s for name in self.store for s in self.store[name]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.store.values())


def reservoir_sample(n: int, k: int | None, rng: np.random.Generator) -> list[int]:
    """Indices of a uniform k-subset of range(n), in stream order (Algorithm R)."""
    if k is None or k >= n:
        return list(range(n))
    if k == 0:
        return []
    res = list(range(k))
    for i in range(k, n):
        j = int(rng.integers(0, i + 1))
        if j < k:
            res[j] = i
    return sorted(res)


def replay_merge(task_data: Sequence, memory: EpisodicMemory) -> list:
    return list(task_data) + memory.samples()


# ---------------------------------------------------------------------------
# regularisers and projection
# ---------------------------------------------------------------------------
@dataclass
class RegularizerState:
    kind: str  # "L2" | "EWC"
    weight: float
    snapshot: list | None = None  # frozen copies of the parameters
    omega: list | None = None  # per-parameter importance; ones for L2

    def take_snapshot(self, params: Sequence[Tensor]) -> None:
        snap = [p.data.copy() for p in params]
        for s in snap:
            s.flags.writeable = False
        self.snapshot = snap


def reg_penalty(params: Sequence[Tensor], state: RegularizerState) -> Tensor:
    """weight * sum_i omega_i (theta_i - theta*_i)^2."""
    if state.kind not in ("L2", "EWC"):
        raise ConfigError(f"reg_penalty handles L2 and EWC, not {state.kind!r}")
    if state.snapshot is None:
        raise ContractError("regulariser has no parameter snapshot")
    total = Tensor(0.0)
    for i, (p, ref) in enumerate(zip(params, state.snapshot)):
        diff = p - ref
        sq = diff * diff
        if state.kind == "EWC":
            sq = sq * state.omega[i]
        total = total + sq.sum()
    return total * state.weight


def estimate_fisher(model: DecoderLM, data: Sequence, n_samples: int = 256, mode: str = "all",
                    params: Sequence[Tensor] | None = None, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Diagonal empirical Fisher: mean squared per-sample NLL gradient."""
    if not data:
        raise ContractError("Fisher estimate needs data")
    params = list(params) if params is not None else model.parameters()
    rng = rng or np.random.default_rng(0)
    idx = np.arange(len(data)) if len(data) <= n_samples else np.sort(rng.choice(len(data), n_samples, replace=False))
    fisher = [np.zeros_like(p.data) for p in params]
    saved = [p.grad for p in params]
    for i in idx:
        for p in params:
            p.grad = np.zeros_like(p.data)
        ad.backward(lm_loss(model, [data[i]], mode))
        for f, p in zip(fisher, params):
            f += p.grad * p.grad
    for p, g in zip(params, saved):
        p.grad = g
    return [f / len(idx) for f in fisher]


def combine_fisher(old: list | None, new: list, how: str = "max") -> list:
    if old is None:
        return new
    if how == "max":
        return [np.maximum(a, b) for a, b in zip(old, new)]
    if how == "sum":
        return [a + b for a, b in zip(old, new)]
    raise ConfigError(f"unknown Fisher combination {how!r}")


def agem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Remove the component of g that opposes g_ref (returns g itself when compliant)."""
    g, g_ref = np.asarray(g, dtype=np.float64), np.asarray(g_ref, dtype=np.float64)
    if g.shape != g_ref.shape:
        raise ValueError("gradient vectors differ in length")
    dot = float(g @ g_ref)
    if dot >= 0:
        return g
    return g - (dot / float(g_ref @ g_ref)) * g_ref


# ---------------------------------------------------------------------------
# routing and evaluation
# ---------------------------------------------------------------------------
def adapter_perplexities(model: DecoderLM, inputs: Sequence[Sequence[int]], labels: Sequence[str]) -> np.ndarray:
    """Matrix (n_inputs, n_adapters) of input perplexities under each adapter."""
    out = np.zeros((len(inputs), len(labels)))
    for j, label in enumerate(labels):
        for i, lp in enumerate(token_logprobs(model, inputs, label)):
            out[i, j] = perplexity_from_logprobs([lp])
    return out


def perplexity_select(model: DecoderLM, x: Sequence[int], labels: Sequence[str] | None = None) -> str:
    """Adapter with the lowest perplexity on ``x``; ties go to the earliest label."""
    labels = list(labels) if labels is not None else model.adapters.labels()
    if not labels:
        raise ContractError("no adapters to select from")
    if len(x) < 2:
        raise ContractError("perplexity selection needs an input of at least two tokens")
    return labels[int(np.argmin(adapter_perplexities(model, [x], labels)[0]))]


def _decode(vocab: Vocab, ids) -> str:
    return vocab.decode(ids)


def _metric(name: str):
    try:
        return METRICS[name]
    except KeyError:
        raise ConfigError(f"unknown metric {name!r}; expected one of {sorted(METRICS)}") from None


def evaluate_task(model: DecoderLM, task: EncodedTask, vocab: Vocab, adapter=None, max_new: int = 8,
                  metric: str = "intent_accuracy") -> float:
    preds = greedy_batch(model, [x for x, _ in task.test], max_new, adapter)
    return _metric(metric)([_decode(vocab, p) for p in preds], task.test_gold)


def evaluate_routed(model: DecoderLM, task: EncodedTask, vocab: Vocab, labels: Sequence[str], max_new: int = 8,
                    stats: dict | None = None, metric: str = "intent_accuracy") -> float:
    inputs = [x for x, _ in task.test]
    t0 = time.perf_counter()
    ppl = adapter_perplexities(model, inputs, labels)
    choice = ppl.argmin(axis=1)
    if stats is not None:
        stats.setdefault("selection_seconds", 0.0)
        stats["selection_seconds"] += time.perf_counter() - t0
        stats.setdefault("queries", 0)
        stats["queries"] += len(inputs)
        stats.setdefault("correct", 0)
        if task.name in labels:
            stats["correct"] += int(np.sum(choice == list(labels).index(task.name)))
        srt = np.sort(ppl, axis=1)
        stats.setdefault("ties", 0)
        if ppl.shape[1] > 1:
            stats["ties"] += int(np.sum(srt[:, 0] == srt[:, 1]))
    preds: list = [None] * len(inputs)
    for j, label in enumerate(labels):
        rows = np.flatnonzero(choice == j)
        if rows.size:
            outs = greedy_batch(model, [inputs[i] for i in rows], max_new, label)
            for i, o in zip(rows, outs):
                preds[i] = o
    return _metric(metric)([_decode(vocab, p) for p in preds], task.test_gold)


# ---------------------------------------------------------------------------
# metric matrix
# ---------------------------------------------------------------------------
class MetricMatrix:
    """R[i, j]: score on task j after training task i; each row is written once."""

    def __init__(self, names: Sequence[str], metric: str = "intent_accuracy"):
        self.names = list(names)
        self.metric = metric
        self.R = np.full((len(names), len(names)), np.nan)
        self._written = [False] * len(names)

    def write_row(self, i: int, values: Sequence[float]) -> None:
        if self._written[i]:
            raise ContractError(f"row {i} of R is already written")
        if len(values) != len(self.names):
            raise ContractError("row length must equal the number of tasks")
        self.R[i] = values
        self._written[i] = True

    def populated(self, i: int) -> bool:
        return self._written[i]

    def to_dict(self) -> dict:
        return {"metric": self.metric, "tasks": self.names,
                "R": [[None if np.isnan(v) else float(v) for v in row] for row in self.R]}


def avg_metric(R: MetricMatrix | np.ndarray, t: int) -> float:
    """(1/t) sum_{i<=t} R[t, i] with 1-based t."""
    mat = R.R if isinstance(R, MetricMatrix) else np.asarray(R, dtype=np.float64)
    if not 1 <= t <= mat.shape[0]:
        raise ContractError(f"t={t} outside 1..{mat.shape[0]}")
    row = mat[t - 1, :t]
    if isinstance(R, MetricMatrix) and not R.populated(t - 1) or np.isnan(row).any():
        raise ContractError(f"row {t} of R is not populated")
    return float(row.mean())


# ---------------------------------------------------------------------------
# the runner
# ---------------------------------------------------------------------------
@dataclass
class CLConfig:
    model: ModelConfig
    train: TrainConfig
    reg_weight: float = 0.001
    memory_size: int | None = 50
    fisher_samples: int = 256
    fisher_combine: str = "max"
    adapter_bottleneck: int = 50
    adapter_train: TrainConfig | None = None
    max_new: int = 4
    base_seed: int = 0
    metric: str = "intent_accuracy"


@dataclass
class CLResult:
    strategy: str
    order: list
    matrix: MetricMatrix
    seconds: list
    avg_trace: list
    memory_ids: dict = field(default_factory=dict)
    agem_min_dot: float | None = None
    agem_steps: int = 0
    routing: dict = field(default_factory=dict)
    trajectory: list = field(default_factory=list)  # parameter checksum after each task
    reports: list = field(default_factory=list)  # MetricReport per task after the final task

    @property
    def final_avg(self) -> float:
        return self.avg_trace[-1]

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "order": self.order, "matrix": self.matrix.to_dict(),
                "seconds": self.seconds, "avg_trace": self.avg_trace, "memory_ids": self.memory_ids,
                "agem_min_dot": self.agem_min_dot, "agem_steps": self.agem_steps, "routing": self.routing,
                "trajectory": self.trajectory, "reports": [r.to_dict() for r in self.reports]}


def _final_reports(mat: MetricMatrix, tasks: Sequence[EncodedTask]) -> list[MetricReport]:
    last = len(tasks) - 1
    return [MetricReport(mat.metric, float(mat.R[last, j]), len(t.test), {"task": t.name, "after_task": last + 1})
            for j, t in enumerate(tasks)]


class _AgemHook:
    def __init__(self, model: DecoderLM, memory: EpisodicMemory, batch_size: int, mode: str, seed: int):
        self.model = model
        self.memory = memory
        self.batch_size = batch_size
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self.min_dot = np.inf
        self.steps = 0

    def __call__(self, params: Sequence[Tensor]) -> None:
        mem = self.memory.samples()
        if not mem:
            return
        g = np.concatenate([p.grad.reshape(-1) for p in params])
        pick = self.rng.choice(len(mem), min(self.batch_size, len(mem)), replace=False)
        for p in params:
            p.grad = np.zeros_like(p.data)
        ad.backward(lm_loss(self.model, [mem[i] for i in sorted(pick)], self.mode))
        g_ref = np.concatenate([p.grad.reshape(-1) for p in params])
        proj = agem_project(g, g_ref)
        self.min_dot = min(self.min_dot, float(proj @ g_ref))
        self.steps += 1
        offset = 0
        for p in params:
            p.grad = proj[offset:offset + p.size].reshape(p.shape).copy()
            offset += p.size


def run_curriculum(strategy: str, curriculum: Curriculum, cfg: CLConfig, seed: int = 0) -> CLResult:
    """Train the tasks in curriculum order and test every task after each one."""
    strategy = strategy.upper()
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if not curriculum.tasks:
        raise ContractError("empty curriculum")
    if strategy == "REPLAY" and cfg.memory_size == 0:
        logger.info("REPLAY with an empty memory behaves as VANILLA")
    tasks = curriculum.tasks
    vocab = curriculum.vocab
    model = DecoderLM(cfg.model, seed=cfg.base_seed)
    _metric(cfg.metric)
    mat = MetricMatrix([t.name for t in tasks], cfg.metric)
    result = CLResult(strategy, [t.name for t in tasks], mat, [], [])
    mode = cfg.train.loss_mode
    memory = EpisodicMemory(cfg.memory_size, seed=seed + 7919)
    reg = RegularizerState(strategy, cfg.reg_weight) if strategy in ("L2", "EWC") else None
    fisher_rng = np.random.default_rng(seed + 104729)
    agem = _AgemHook(model, memory, cfg.train.batch_size, mode, seed + 15485863) if strategy == "AGEM" else None
    stats: dict = {}

    if strategy == "MULTI":
        t0 = time.perf_counter()
        union = [pair for t in tasks for pair in t.train]
        fit(model, union, replace(cfg.train, seed=task_seed("MULTI", seed)))
        result.seconds.append(time.perf_counter() - t0)
        for i in range(len(tasks) - 1):
            result.seconds.append(0.0)
        mat.write_row(len(tasks) - 1, [evaluate_task(model, t, vocab, max_new=cfg.max_new, metric=cfg.metric)
                               for t in tasks])
        result.avg_trace.append(avg_metric(mat, len(tasks)))
        result.trajectory.append(model.checksum())
        result.reports = _final_reports(mat, tasks)
        return result

    for i, task in enumerate(tasks):
        t0 = time.perf_counter()
        tcfg = replace(cfg.train, seed=task_seed(task.name, seed))
        if strategy == "ADAPTERCL":
            spawn_adapter(model, task.name, cfg.adapter_bottleneck, seed=task_seed(task.name, seed))
            acfg = replace(cfg.adapter_train or cfg.train, seed=task_seed(task.name, seed))
            train_adapter(model, task.name, task.train, acfg)
        else:
            data = task.train
            extra = hook = None
            if strategy == "REPLAY":
                data = replay_merge(task.train, memory)
            if reg is not None and reg.snapshot is not None:
                params = model.parameters()
                extra = lambda: reg_penalty(params, reg)
            if agem is not None:
                hook = agem
            fit(model, data, tcfg, extra_loss=extra, grad_hook=hook)
            if reg is not None:
                if strategy == "EWC":
                    f = estimate_fisher(model, task.train, cfg.fisher_samples, mode, rng=fisher_rng)
                    reg.omega = combine_fisher(reg.omega, f, cfg.fisher_combine)
                reg.take_snapshot(model.parameters())
            if strategy in ("REPLAY", "AGEM"):
                memory.add_task(task.name, task.train)
                result.memory_ids[task.name] = memory.ids[task.name]
        result.seconds.append(time.perf_counter() - t0)
        if strategy == "ADAPTERCL":
            labels = model.adapters.labels()
            row = [evaluate_routed(model, t, vocab, labels, cfg.max_new, stats if i == len(tasks) - 1 else None,
                                   cfg.metric) for t in tasks]
        else:
            row = [evaluate_task(model, t, vocab, max_new=cfg.max_new, metric=cfg.metric) for t in tasks]
        mat.write_row(i, row)
        result.avg_trace.append(avg_metric(mat, i + 1))
        result.trajectory.append(model.checksum())
    result.reports = _final_reports(mat, tasks)
    if agem is not None:
        result.agem_min_dot = None if agem.steps == 0 else agem.min_dot
        result.agem_steps = agem.steps
    if stats:
        result.routing = {"accuracy": stats["correct"] / stats["queries"], "queries": stats["queries"],
                          "ties": stats["ties"],
                          "seconds_per_query": stats["selection_seconds"] / stats["queries"]}
    return result


def memory_ablation(sizes: Sequence, curriculum: Curriculum, cfg: CLConfig, seed: int = 0) -> list[tuple]:
    """Final Avg. Metric of REPLAY for every memory size ("ALL" or None keeps everything).

    A decreasing trend (negative Spearman correlation) is logged, not raised.
    """
    if not sizes:
        raise ContractError("no memory sizes given")
    rows = []
    for size in sizes:
        cap = None if size in (None, "ALL", "all") else int(size)
        res = run_curriculum("REPLAY", curriculum, replace(cfg, memory_size=cap), seed)
        rows.append(("ALL" if cap is None else cap, res.final_avg))
    rho = memory_trend(rows)
    if rho < 0:
        logger.warning("memory ablation: Avg. Metric falls with memory size (Spearman %.3f)", rho)
    return rows


def memory_trend(rows: Sequence[tuple]) -> float:
    """Spearman correlation between memory size (ALL ranks last) and final Avg. Metric."""
    if len(rows) < 2:
        return 1.0
    sizes = [math.inf if s == "ALL" else s for s, _ in rows]
    scores = [v for _, v in rows]
    if len(set(scores)) == 1:
        return 1.0
    return float(spearmanr(sizes, scores).statistic)


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
