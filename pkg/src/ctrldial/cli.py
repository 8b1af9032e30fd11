"""``ctrldial`` command line: synth, train, steer, cl, aop-bench and report.

Exit codes: 0 success, 1 a property or acceptance check failed, 2 usage,
configuration or input error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import as_list, config_hash, load_config, parse_overrides, resolve, section
from .errors import CapacityError, ConfigError, ContractError, DataError, DegenerateDataError, TrainingDiverged

logger = logging.getLogger("ctrldial")

OUT_ROOT_ENV = "CTRLDIAL_OUT_ROOT"
PRNG = "numpy.random.PCG64 (numpy.random.default_rng)"

_MODEL_KEYS = {"model.d_model": 64, "model.n_layers": 2, "model.n_heads": 2, "model.ffn_dim": 128,
               "model.max_len": 128, "model.hops": 1}
_TRAIN_KEYS = {"train.lr": 1e-3, "train.batch_size": 32, "train.epochs": 10, "train.warmup_steps": 100,
               "train.patience": 0, "train.loss_mode": "output", "train.clip_norm": 1.0}

DEFAULTS = {
    "synth": {
        "synth.kind": "domains",  # "domains" or "style"
        "synth.setting": "E2E", "synth.api_style": "call", "synth.n_domains": 5, "synth.n_dialogues": 100,
        "synth.max_turns": 2, "synth.n_intents": 3, "synth.n_slots": 2, "synth.n_values": 3, "synth.n_words": 8,
        "synth.styles": "positive, negative", "synth.n": 600, "synth.n_markers": 6, "synth.n_neutral": 20,
        "synth.prompt_len": 3, "synth.response_len": 6, "synth.marker_rate": 0.5, "synth.separation": 1.0,
    },
    "train": {"data.train": None, "data.valid": None, **_MODEL_KEYS, **_TRAIN_KEYS},
    "steer": {
        "steer.checkpoint": None, "steer.vocab": None, "steer.attribute": None,
        "data.labeled": None, "data.external": None, "data.prefixes": None,
        "steer.mode": "pplm", "steer.preset": "negative", "steer.target": None, "steer.max_new": 8,
        "steer.step_size": None, "steer.iterations": None, "steer.gamma": None, "steer.kl_weight": None,
        "steer.fusion": None, "steer.top_k": None, "steer.n_hypotheses": None,
        "adapter.bottleneck": 100, "adapter.lr": 6.25e-4, "adapter.batch_size": 32, "adapter.epochs": 5,
        "sweep.p_values": [0, 5, 10], "sweep.alpha_values": [0.0, 0.02, 0.05],
    },
    "cl": {
        "cl.strategies": "VANILLA, REPLAY, ADAPTERCL, MULTI", "cl.permutations": 5,
        "cl.n_domains": 5, "cl.n_dialogues": 100, "cl.setting": "INTENT", "cl.data_seed": 0,
        "cl.memory_size": 50, "cl.memory_sizes": None, "cl.reg_weight": 0.001, "cl.fisher_samples": 256,
        "cl.fisher_combine": "max", "cl.adapter_bottleneck": 100, "cl.max_new": 4,
        "model.d_model": 64, "model.n_layers": 2, "model.n_heads": 2, "model.ffn_dim": 128, "model.max_len": 32,
        "model.hops": 1,
        "train.lr": 3e-3, "train.batch_size": 32, "train.epochs": 20, "train.warmup_steps": 10,
        "train.patience": 0, "train.loss_mode": "all", "train.clip_norm": 1.0,
        "adapter.lr": 3e-3, "adapter.epochs": 60,
    },
    "aop-bench": {"bench.grid": None, "bench.n_linear": 100, "bench.n_onehot": 10,
                  "bench.instrument_limit": 20000, "bench.inject_fault": False},
}

CL_METRIC = {"INTENT": "intent_accuracy", "DST": "joint_goal_accuracy", "NLG": "bleu", "E2E": "bleu"}


class UsageError(Exception):
    """Bad input detected by the command line itself."""


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------
def _versions() -> dict:
    import scipy

    return {"ctrldial": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(out: Path, command: str, cfg: dict, seed: int) -> dict:
    manifest = {"command": command, "config": cfg, "config_hash": config_hash({**cfg, "seed": seed}),
                "seed": seed, "prng": PRNG, "versions": _versions()}
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _out_dir(args, command: str, cfg: dict) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return Path(root) / f"{command}-{config_hash({**cfg, 'seed': args.seed})[:10]}"


def _require(cfg: dict, key: str) -> str:
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"{key} is required (set it in --config or with --set {key}=...)")
    return cfg[key]


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


def _model_config(cfg: dict, vocab_size: int):
    from .model import ModelConfig

    return ModelConfig(vocab_size=vocab_size, **section(cfg, "model"))


def _train_config(cfg: dict, seed: int, prefix: str = "train"):
    from .model import TrainConfig

    return TrainConfig(seed=seed, **section(cfg, prefix))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------
def cmd_synth(cfg: dict, seed: int, out: Path, workers: int) -> int:
    from . import synth

    if cfg["synth.kind"] == "style":
        spec = synth.StyleSpec([s.strip() for s in as_list(cfg["synth.styles"])], cfg["synth.n_markers"],
                               cfg["synth.n_neutral"], cfg["synth.prompt_len"], cfg["synth.response_len"],
                               cfg["synth.marker_rate"], cfg["synth.separation"])
        for name, offset in (("lm", 1), ("labeled", 2), ("external", 3), ("prefixes", 4)):
            items = synth.gen_attribute_corpus(spec, cfg["synth.n"], seed + offset)
            synth.write_jsonl([synth.Sample(t.prefix, t.response, "STYLE", spec.styles[t.label]) for t in items],
                              out / f"{name}.jsonl")
        return 0
    if cfg["synth.kind"] != "domains":
        raise ConfigError(f"synth.kind must be 'domains' or 'style', got {cfg['synth.kind']!r}")
    n = cfg["synth.n_domains"]
    if n > len(synth.DOMAIN_NAMES):
        raise ConfigError(f"at most {len(synth.DOMAIN_NAMES)} synthetic domains")
    specs = [synth.make_domain_spec(name, cfg["synth.n_intents"], cfg["synth.n_slots"], cfg["synth.n_values"],
                                    cfg["synth.n_words"], seed=seed + i) for i, name in enumerate(synth.DOMAIN_NAMES[:n])]
    synth.check_disjoint(specs)
    for i, spec in enumerate(specs):
        name = spec.name
        ds = synth.gen_domain(spec, cfg["synth.n_dialogues"], seed + 1000 * (i + 1), cfg["synth.setting"],
                              cfg["synth.api_style"], cfg["synth.max_turns"])
        for split, samples in ds.splits().items():
            synth.write_jsonl(samples, out / f"{name}.{split}.jsonl")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------
def _read_samples(path):
    from .synth import read_jsonl

    return read_jsonl(_existing(path))


def cmd_train(cfg: dict, seed: int, out: Path, workers: int) -> int:
    from .model import DecoderLM, evaluate_loss, fit
    from .synth import samples_to_pairs
    from .vocab import Vocab

    train = _read_samples(_require(cfg, "data.train"))
    valid = _read_samples(cfg["data.valid"]) if cfg["data.valid"] else []
    if not train:
        raise DataError("training file holds no samples")
    vocab = Vocab.from_texts(s.input + " " + s.output for s in train + valid)
    model = DecoderLM(_model_config(cfg, len(vocab)), seed=seed)
    train_pairs, valid_pairs = samples_to_pairs(train, vocab), samples_to_pairs(valid, vocab)
    result = fit(model, train_pairs, _train_config(cfg, seed), valid=valid_pairs or None)
    vocab.save(out / "vocab.txt")
    model.save(out / "model.ckpt")
    _write_csv(out / "loss_curve.csv", ["step", "train_loss", "valid_loss"],
               [(s, repr(t), "" if v == "" else repr(v)) for s, t, v in result.curve_rows()])
    metrics = {"steps": result.steps, "final_train_loss": result.epoch_losses[-1],
               "stopped_early": result.stopped_early}
    if valid_pairs:
        metrics["valid_loss"] = evaluate_loss(model, valid_pairs, cfg["train.loss_mode"])
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"trained {result.steps} steps; final train loss {metrics['final_train_loss']:.4f}; wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# steer
# ---------------------------------------------------------------------------
def _steer_config(cfg: dict):
    from .steering import preset

    overrides = {k: v for k, v in section(cfg, "steer").items()
                 if k in ("step_size", "iterations", "gamma", "kl_weight", "fusion", "top_k", "n_hypotheses")
                 and v is not None}
    if cfg["steer.mode"] == "off":
        return preset("off", **overrides)
    return preset(cfg["steer.preset"], **overrides)


def cmd_steer(cfg: dict, seed: int, out: Path, workers: int) -> int:
    from .model import DecoderLM, TrainConfig, generate
    from .steering import (AttributeModel, BagOfWordsClassifier, distill_attribute, score_hypotheses,
                           steered_generate_many, sweep_steering_grid, train_attribute_model, write_sweep_csv)
    from .vocab import Vocab

    mode = cfg["steer.mode"]
    if mode not in ("off", "pplm", "distill", "sweep"):
        raise ConfigError(f"steer.mode must be one of off, pplm, distill, sweep; got {mode!r}")
    scfg = _steer_config(cfg)
    ckpt = _existing(_require(cfg, "steer.checkpoint"))
    vocab = Vocab.load(_existing(cfg["steer.vocab"] or ckpt.parent / "vocab.txt"))
    model = DecoderLM.load(ckpt)
    labeled = _read_samples(_require(cfg, "data.labeled"))
    labels = sorted({s.task_id for s in labeled})
    corpus = [(vocab.encode(s.input, bos=True), vocab.encode(s.output), labels.index(s.task_id)) for s in labeled]
    if cfg["steer.attribute"]:
        attr = AttributeModel.load(_existing(cfg["steer.attribute"]))
    else:
        attr = train_attribute_model(model, corpus, labels, seed=seed)
        attr.save(out / "attribute.ckpt")
    external = _read_samples(cfg["data.external"]) if cfg["data.external"] else labeled
    scorer = BagOfWordsClassifier(len(vocab), len(attr.labels)).fit(
        [vocab.encode(s.output) for s in external], [attr.labels.index(s.task_id) for s in external], seed=seed)
    target_name = cfg["steer.target"] or cfg["steer.preset"]
    if target_name not in attr.labels:
        raise ConfigError(f"target {target_name!r} is not an attribute label; labels: {attr.labels}")
    target = attr.index(target_name)
    prefix_samples = _read_samples(cfg["data.prefixes"]) if cfg["data.prefixes"] else labeled
    prefixes = [vocab.encode(s.input, bos=True) for s in prefix_samples]
    max_new = cfg["steer.max_new"]

    if mode == "sweep":
        cells = sweep_steering_grid(model, attr, prefixes, as_list(cfg["sweep.p_values"]),
                                    as_list(cfg["sweep.alpha_values"]), target, scorer, scfg, max_new, seed)
        write_sweep_csv(cells, out / "sweep.csv")
        print(f"wrote {len(cells)} sweep cells to {out / 'sweep.csv'}")
        return 0

    rng = np.random.default_rng(seed)
    if mode == "distill":
        tcfg = TrainConfig(lr=cfg["adapter.lr"], batch_size=cfg["adapter.batch_size"], epochs=cfg["adapter.epochs"],
                           seed=seed)
        dist = distill_attribute(model, attr, target, prefixes, scfg, cfg["adapter.bottleneck"], tcfg,
                                 max_new=max_new, seed=seed)
        model.adapters[dist.label].save(out / "adapter.ckpt")
        used = dist.heldout_prefixes
        responses = [generate(model, p, max_new, scfg.top_k, 1, rng, adapter=dist.label)[0] for p in used]
    else:
        used, responses = [], []
        groups: dict[int, list] = {}
        for p in prefixes:
            groups.setdefault(len(p), []).append(p)
        for group in groups.values():
            for p, res in zip(group, steered_generate_many(model, group, attr, target, scfg, max_new, rng)):
                used.append(p)
                responses.append(res.chosen)
    ext = scorer.log_proba(responses) if responses else np.zeros((0, len(attr.labels)))
    rows = []
    with open(out / "responses.jsonl", "w", encoding="utf-8") as fh:
        for p, r, e in zip(used, responses, ext):
            internal = float(score_hypotheses(model, attr, p, [r], target)[0])
            row = {"prefix": vocab.decode(p), "response": vocab.decode(r), "internal_loss": internal,
                   "external_target_prob": float(np.exp(e[target])), "external_label": attr.labels[int(e.argmax())]}
            rows.append(row)
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    rate = float(np.mean([r["external_label"] == target_name and r["response"] != "" for r in rows])) if rows else 0.0
    _write_csv(out / "scores.csv", ["mode", "target", "n", "external_rate", "mean_internal_loss"],
               [(mode, target_name, len(rows), repr(rate),
                 repr(float(np.mean([r["internal_loss"] for r in rows]))) if rows else "")])
    print(f"{mode}: {len(rows)} responses, external {target_name} rate {rate:.3f}")
    return 0


# ---------------------------------------------------------------------------
# cl
# ---------------------------------------------------------------------------
def _cl_setup(cfg: dict):
    from .continual import CLConfig
    from .recipes import build_cl_suite

    curriculum = build_cl_suite(cfg["cl.n_domains"], cfg["cl.n_dialogues"], cfg["cl.data_seed"], cfg["cl.setting"])
    train = _train_config(cfg, 0)
    adapter = replace(train, lr=cfg["adapter.lr"], epochs=cfg["adapter.epochs"])
    metric = CL_METRIC.get(cfg["cl.setting"])
    if metric is None:
        raise ConfigError(f"cl.setting must be one of {sorted(CL_METRIC)}")
    clcfg = CLConfig(_model_config(cfg, len(curriculum.vocab)), train, cfg["cl.reg_weight"], cfg["cl.memory_size"],
                     cfg["cl.fisher_samples"], cfg["cl.fisher_combine"], cfg["cl.adapter_bottleneck"], adapter,
                     cfg["cl.max_new"], metric=metric)
    return curriculum, clcfg


def _cl_job(job) -> dict:
    from .continual import run_curriculum

    cfg, strategy, perm, seed, memory = job
    curriculum, clcfg = _cl_setup(cfg)
    if memory is not None:
        clcfg = replace(clcfg, memory_size=None if memory == "ALL" else int(memory))
    res = run_curriculum(strategy, curriculum.permuted(seed + perm), clcfg, seed)
    return {"perm": perm, "memory": memory, **res.to_dict()}


def _run_jobs(jobs, workers: int) -> list:
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_cl_job, jobs))
    return [_cl_job(j) for j in jobs]


def cmd_cl(cfg: dict, seed: int, out: Path, workers: int) -> int:
    from .continual import STRATEGIES, memory_trend

    strategies = [str(s).upper() for s in as_list(cfg["cl.strategies"])]
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad or not strategies:
        raise ConfigError(f"unknown strategies {bad}; expected a subset of {STRATEGIES}")
    n_perm = int(cfg["cl.permutations"])
    if n_perm < 1:
        raise ConfigError("cl.permutations must be >= 1")
    _cl_setup(cfg)  # validate before spawning workers
    jobs = [(cfg, s, k, seed, None) for s in strategies for k in range(n_perm)]
    sizes = as_list(cfg["cl.memory_sizes"])
    jobs += [(cfg, "REPLAY", k, seed, str(m).upper() if str(m).upper() == "ALL" else int(m))
             for m in sizes for k in range(n_perm)]
    results = _run_jobs(jobs, workers)
    runs = out / "runs"
    runs.mkdir(exist_ok=True)
    trace_rows, timing, finals = [], {}, {}
    for r in results:
        tag = f"{r['strategy']}-perm{r['perm']}" + ("" if r["memory"] is None else f"-mem{r['memory']}")
        (runs / f"{tag}.json").write_text(json.dumps(r, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if r["memory"] is not None:
            continue
        finals.setdefault(r["strategy"], []).append(r["avg_trace"][-1])
        offset = len(r["order"]) - len(r["avg_trace"])
        for t, v in enumerate(r["avg_trace"], start=1 + offset):
            trace_rows.append((r["strategy"], r["perm"], t, repr(v)))
        for t, sec in enumerate(r["seconds"], start=1):
            timing.setdefault((r["strategy"], t), []).append(sec)
    _write_csv(out / "avg_trace.csv", ["strategy", "permutation", "task_index", "avg_metric"], trace_rows)
    _write_csv(out / "timing.csv", ["strategy", "task_index", "seconds"],
               [(s, t, repr(float(np.mean(v)))) for (s, t), v in timing.items()])
    summary = [(s, repr(float(np.mean(v))), repr(float(np.std(v))), len(v)) for s, v in finals.items()]
    _write_csv(out / "summary.csv", ["strategy", "mean", "std", "n_runs"], summary)
    print(f"{'strategy':<10} {'final Avg.':>18}")
    for s, v in finals.items():
        print(f"{s:<10} {100 * np.mean(v):8.2f} +- {100 * np.std(v):5.2f}")
    if sizes:
        table: dict = {}
        for r in results:
            if r["memory"] is not None:
                table.setdefault(r["memory"], []).append(r["avg_trace"][-1])
        rows = [(m, float(np.mean(v))) for m, v in table.items()]
        _write_csv(out / "memory_ablation.csv", ["memory_size", "mean", "std"],
                   [(m, repr(float(np.mean(v))), repr(float(np.std(v)))) for m, v in table.items()])
        print(f"memory ablation Spearman rho {memory_trend(rows):.3f}")
    return 0


# ---------------------------------------------------------------------------
# aop-bench
# ---------------------------------------------------------------------------
def cmd_aop_bench(cfg: dict, seed: int, out: Path, workers: int) -> int:
    from .experts import DEFAULT_GRID, property_bench, write_flop_csv

    grid = [tuple(int(v) for v in g) for g in cfg["bench.grid"]] if cfg["bench.grid"] else list(DEFAULT_GRID)
    for g in grid:
        if len(g) != 4 or min(g) < 1:
            raise ConfigError(f"grid points are positive (r, t, d, n) tuples, got {g}")
    rep = property_bench(grid, cfg["bench.n_linear"], cfg["bench.n_onehot"], cfg["bench.instrument_limit"], seed,
                         bool(cfg["bench.inject_fault"]))
    write_flop_csv(rep.rows, out / "flop.csv")
    (out / "bench.log").write_text("\n".join(rep.log) + "\n", encoding="utf-8")
    if not rep.ok:
        for f in rep.failures:
            print(f"FAIL {f}", file=sys.stderr)
        return 1
    print(f"all {len(rep.log)} checks passed; wrote {out / 'flop.csv'}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------
def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _pivot(rows: list[dict], value: str) -> list[list]:
    ps = sorted({int(r["p"]) for r in rows})
    alphas = sorted({float(r["alpha"]) for r in rows})
    cell = {(int(r["p"]), float(r["alpha"])): r[value] for r in rows}
    return [["p\\alpha"] + alphas] + [[p] + [cell.get((p, a), "") for a in alphas] for p in ps]


def cmd_report(run_dir: Path) -> int:
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        raise UsageError(f"no manifest.json in {run_dir}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    dest = run_dir / "report"
    dest.mkdir(exist_ok=True)
    lines = [f"command: {manifest['command']}", f"seed: {manifest['seed']}",
             f"config hash: {manifest['config_hash']}", f"prng: {manifest['prng']}"]
    if (run_dir / "sweep.csv").is_file():
        rows = _read_csv(run_dir / "sweep.csv")
        for value in ("attr_loss", "ppl"):
            _write_csv(dest / f"contour_{value}.csv", _pivot(rows, value)[0], _pivot(rows, value)[1:])
        lines.append(f"steering sweep: {len(rows)} cells -> contour_attr_loss.csv, contour_ppl.csv")
    if (run_dir / "scores.csv").is_file():
        for r in _read_csv(run_dir / "scores.csv"):
            lines.append(f"steer {r['mode']}: {r['n']} responses, external {r['target']} rate {float(r['external_rate']):.3f}")
    if (run_dir / "avg_trace.csv").is_file():
        rows = _read_csv(run_dir / "avg_trace.csv")
        acc: dict = {}
        for r in rows:
            acc.setdefault((r["strategy"], int(r["task_index"])), []).append(float(r["avg_metric"]))
        _write_csv(dest / "avg_metric_trace.csv", ["strategy", "task_index", "mean", "std"],
                   [(s, t, repr(float(np.mean(v))), repr(float(np.std(v)))) for (s, t), v in sorted(acc.items())])
        lines.append("continual learning: Avg. Metric trace -> avg_metric_trace.csv")
    if (run_dir / "summary.csv").is_file():
        for r in _read_csv(run_dir / "summary.csv"):
            lines.append(f"  {r['strategy']:<10} {100 * float(r['mean']):6.2f} +- {100 * float(r['std']):5.2f}"
                         f" ({r['n_runs']} runs)")
    if (run_dir / "flop.csv").is_file():
        rows = _read_csv(run_dir / "flop.csv")
        lines.append(f"aop-bench: {len(rows)} cost rows")
        for r in rows:
            lines.append(f"  {r['mode']:<4} r={r['r']} t={r['t']} d={r['d']} n={r['n']}: {int(r['count']):,}")
    if (run_dir / "loss_curve.csv").is_file():
        rows = _read_csv(run_dir / "loss_curve.csv")
        lines.append(f"train: {len(rows)} steps, last loss {float(rows[-1]['train_loss']):.4f}" if rows else "train: empty")
    text = "\n".join(lines) + "\n"
    (dest / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------
COMMANDS = {"synth": cmd_synth, "train": cmd_train, "steer": cmd_steer, "cl": cmd_cl, "aop-bench": cmd_aop_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctrldial", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV} or ./runs, plus a config hash)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--workers", type=int, default=1, help="parallel independent runs")
        if name == "aop-bench":
            p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    rep = sub.add_parser("report")
    rep.add_argument("run_dir")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            return cmd_report(Path(args.run_dir))
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        file_cfg = load_config(args.config) if args.config else {}
        overrides = parse_overrides(args.set)
        if getattr(args, "inject_fault", False):
            overrides["bench.inject_fault"] = True
        cfg = resolve(DEFAULTS[args.command], file_cfg, overrides)
        out = _out_dir(args, args.command, cfg)
        write_manifest(out, args.command, cfg, args.seed)
        return COMMANDS[args.command](cfg, args.seed, out, args.workers)
    except (UsageError, ConfigError, DataError, ContractError, CapacityError, DegenerateDataError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
