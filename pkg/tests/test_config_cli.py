import csv
import json
import subprocess
import sys

import pytest

from ctrldial import __version__
from ctrldial.cli import DEFAULTS, main
from ctrldial.config import as_list, config_hash, dump_config, load_config, parse_lines, resolve, section
from ctrldial.errors import ConfigError

TINY_MODEL = ["model.d_model=16", "model.n_layers=1", "model.n_heads=2", "model.ffn_dim=32", "model.max_len=32"]


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- config files ---------------------------------------------------------------------------
def test_parse_lines():
    cfg = parse_lines(["# comment", "a.b = 3", "c = 1e-3  # trailing", "d = VANILLA, MULTI", 'e = "x y"',
                       "f = [1, 2]", "g = true", "h = null"])
    assert cfg == {"a.b": 3, "c": 1e-3, "d": "VANILLA, MULTI", "e": "x y", "f": [1, 2], "g": True, "h": None}
    assert as_list(cfg["d"]) == ["VANILLA", "MULTI"] and as_list("0, 5, 10") == [0, 5, 10]
    assert as_list(None) == [] and as_list(3) == [3]


@pytest.mark.parametrize("line, what", [("no equals", "expected"), ("a b = 1", "bad key"), (" = 1", "bad key")])
def test_bad_lines_name_the_line(line, what):
    with pytest.raises(ConfigError, match=f"cfg:2: {what}"):
        parse_lines(["ok = 1", line], "cfg")


def test_duplicates_and_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="duplicate"):
        parse_lines(["a = 1", "a = 2"])
    with pytest.raises(ConfigError, match="unknown config key 'b'"):
        resolve({"a": 1}, {"b": 2})
    assert resolve({"a": 1, "b": 2}, {"a": 3}, {"a": 4}) == {"a": 4, "b": 2}
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_dump_round_trip_and_hash(tmp_path):
    cfg = DEFAULTS["cl"]
    (tmp_path / "c.cfg").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.cfg") == cfg
    assert config_hash(cfg) == config_hash(dict(reversed(list(cfg.items()))))
    assert config_hash(cfg) != config_hash({**cfg, "cl.permutations": 6})
    assert section({"model.d": 1, "train.lr": 2, "modelx": 3}, "model") == {"d": 1}


# -- exit code contract -----------------------------------------------------------------------
def test_usage_errors_exit_2(tmp_path, capsys):
    assert run("train", "--out", tmp_path / "a", "--set", "data.train=" + str(tmp_path / "none.jsonl")) == 2
    assert "file not found" in capsys.readouterr().err
    assert (tmp_path / "a" / "manifest.json").is_file()  # manifest comes before any computation
    assert run("train", "--out", tmp_path / "b") == 2
    assert run("cl", "--out", tmp_path / "c", "--set", "cl.nope=1") == 2
    assert run("cl", "--out", tmp_path / "d", "--set", "cl.strategies=VANILLA, GEM") == 2
    assert run("frobnicate") == 2
    assert run("cl", "--config", tmp_path / "missing.cfg") == 2
    assert run("report", tmp_path / "empty") == 2
    (tmp_path / "empty").mkdir()
    assert run("report", tmp_path / "empty") == 2


def test_version_via_module():
    out = subprocess.run([sys.executable, "-m", "ctrldial", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout


def test_default_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("CTRLDIAL_OUT_ROOT", str(tmp_path))
    assert run("aop-bench", "--set", "bench.grid=[[2, 2, 2, 2]]", "--set", "bench.n_linear=2",
               "--set", "bench.n_onehot=1") == 0
    (made,) = tmp_path.iterdir()
    assert made.name.startswith("aop-bench-")
    manifest = json.loads((made / "manifest.json").read_text())
    assert manifest["prng"].startswith("numpy.random.PCG64") and manifest["versions"]["ctrldial"] == __version__
    assert manifest["config_hash"] == config_hash({**manifest["config"], "seed": 0})


# -- aop-bench ----------------------------------------------------------------------------------
def test_aop_bench_default_grid(tmp_path):
    assert run("aop-bench", "--out", tmp_path) == 0
    table = rows(tmp_path / "flop.csv")
    assert {tuple(r) for r in table} >= {("MOE", "13", "16", "64", "64", "865280"),
                                         ("AOP", "13", "16", "64", "64", "118784")}
    assert run("aop-bench", "--out", tmp_path / "bad", "--inject-fault") == 1
    assert run("aop-bench", "--out", tmp_path / "grid", "--set", "bench.grid=[[1, 2, 3]]") == 2


# -- synth -> train -> steer -> report ------------------------------------------------------------
@pytest.fixture(scope="module")
def style_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("style")
    assert run("synth", "--out", root / "data", "--set", "synth.kind=style", "--set", "synth.n=40") == 0
    train = ["--set", f"data.train={root / 'data' / 'lm.jsonl'}", "--set", "train.epochs=2",
             "--set", "train.warmup_steps=0", *[a for kv in TINY_MODEL for a in ("--set", kv)]]
    assert run("train", "--out", root / "base", "--seed", 5, *train) == 0
    assert run("train", "--out", root / "again", "--seed", 5, *train) == 0
    return root


def steer(root, out, *extra):
    data = root / "data"
    return run("steer", "--out", root / out, "--set", f"steer.checkpoint={root / 'base' / 'model.ckpt'}",
               "--set", f"data.labeled={data / 'labeled.jsonl'}", "--set", f"data.external={data / 'external.jsonl'}",
               "--set", f"data.prefixes={data / 'prefixes.jsonl'}", "--set", "steer.max_new=3",
               "--set", "steer.iterations=2", "--set", "steer.n_hypotheses=2", *extra)


def test_synth_writes_every_split(tmp_path):
    assert run("synth", "--out", tmp_path, "--set", "synth.n_domains=2", "--set", "synth.n_dialogues=10") == 0
    names = sorted(p.name for p in tmp_path.glob("*.jsonl"))
    assert names == sorted(f"{d}.{s}.jsonl" for d in ("hotel", "train") for s in ("train", "valid", "test"))
    assert run("synth", "--out", tmp_path / "x", "--set", "synth.kind=poem") == 2


def test_train_is_byte_reproducible(style_run):
    for name in ("model.ckpt", "vocab.txt", "loss_curve.csv", "metrics.json"):
        assert (style_run / "base" / name).read_bytes() == (style_run / "again" / name).read_bytes()
    curve = rows(style_run / "base" / "loss_curve.csv")
    assert curve[0] == ["step", "train_loss", "valid_loss"] and len(curve) > 1


def test_steer_modes(style_run, capsys):
    assert steer(style_run, "off", "--set", "steer.mode=off") == 0
    assert steer(style_run, "pplm") == 0
    responses = [json.loads(line) for line in (style_run / "pplm" / "responses.jsonl").read_text().splitlines()]
    assert len(responses) == 40 and set(responses[0]) == {"prefix", "response", "internal_loss",
                                                          "external_target_prob", "external_label"}
    assert rows(style_run / "pplm" / "scores.csv")[0] == ["mode", "target", "n", "external_rate", "mean_internal_loss"]
    assert steer(style_run, "distill", "--set", "steer.mode=distill", "--set", "adapter.epochs=1",
                 "--set", "adapter.bottleneck=4") == 0
    assert (style_run / "distill" / "adapter.ckpt").is_file()
    capsys.readouterr()
    assert steer(style_run, "bad", "--set", "steer.preset=grumpy") == 2
    assert "available" in capsys.readouterr().err
    assert steer(style_run, "bad2", "--set", "steer.mode=loud") == 2


def test_sweep_and_report(style_run):
    assert steer(style_run, "sweep", "--set", "steer.mode=sweep", "--set", "sweep.p_values=0, 2",
                 "--set", "sweep.alpha_values=0.0, 0.05") == 0
    assert rows(style_run / "sweep" / "sweep.csv")[0] == ["p", "alpha", "attr_loss", "ppl"]
    assert run("report", style_run / "sweep") == 0
    grid = rows(style_run / "sweep" / "report" / "contour_attr_loss.csv")
    assert grid[0] == ["p\\alpha", "0.0", "0.05"] and [r[0] for r in grid[1:]] == ["0", "2"]
    assert run("report", style_run / "base") == 0
    assert "train:" in (style_run / "base" / "report" / "summary.txt").read_text()


# -- cl ---------------------------------------------------------------------------------------------
def test_cl_enumeration_and_report(tmp_path):
    small = ["cl.n_domains=2", "cl.n_dialogues=10", "cl.strategies=VANILLA, MULTI", "cl.permutations=2",
             "train.epochs=1", "adapter.epochs=1", "cl.memory_sizes=1, ALL", *TINY_MODEL]
    assert run("cl", "--out", tmp_path, *[a for kv in small for a in ("--set", kv)]) == 0
    runs = sorted(p.name for p in (tmp_path / "runs").glob("*.json"))
    assert runs == sorted([f"{s}-perm{k}.json" for s in ("VANILLA", "MULTI") for k in (0, 1)]
                          + [f"REPLAY-perm{k}-mem{m}.json" for m in (1, "ALL") for k in (0, 1)])
    blob = json.loads((tmp_path / "runs" / "VANILLA-perm0.json").read_text())
    assert len(blob["matrix"]["R"]) == 2 and len(blob["reports"]) == 2
    assert rows(tmp_path / "timing.csv")[0] == ["strategy", "task_index", "seconds"]
    summary = rows(tmp_path / "summary.csv")
    assert summary[0] == ["strategy", "mean", "std", "n_runs"] and [r[3] for r in summary[1:]] == ["2", "2"]
    assert [r[0] for r in rows(tmp_path / "memory_ablation.csv")[1:]] == ["1", "ALL"]
    assert run("report", tmp_path) == 0
    trace = rows(tmp_path / "report" / "avg_metric_trace.csv")
    assert trace[0] == ["strategy", "task_index", "mean", "std"]
    assert {(r[0], r[1]) for r in trace[1:]} == {("VANILLA", "1"), ("VANILLA", "2"), ("MULTI", "2")}
