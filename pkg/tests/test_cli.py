import csv
import io
import json

import pytest

from aliasim import cli
from aliasim import dataset as D
from aliasim import trainer as Tr
from aliasim.metrics import REPORT_COLUMNS

SMALL = ["--set", "d=8", "--set", "heads=2", "--set", "K=4", "--set", "H=4", "--set", "r=2"]


def run(tmp_path, *args, name="out"):
    return cli.main(["--out", str(tmp_path / name), *args])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["--out", str(d), "--episodes", "6", "gen-data"]) == 0
    return d / "corpus.bin"


def test_resolve_precedence():
    cfg = cli.resolve_config({"seed": "3", "steps": "9"}, {"steps": "11"}, environ={"ALIASIM_SEED": "5"})
    assert (cfg.seed, cfg.steps) == (5, 11)
    assert cli.resolve_config({"seed": "3"}, {"seed": "8"}, environ={"ALIASIM_SEED": "5"}).seed == 8
    assert cli.resolve_config({}, {}, environ={}).to_dict() == {k: v[0] for k, v in cli.KEYS.items()}


@pytest.mark.parametrize("bad", [{"bogus": "1"}, {"episodes": "0"}, {"steps": "many"},
                                 {"r": "8"}, {"variant": "huge"}, {"oracle": "maybe"}])
def test_resolve_rejects(bad):
    with pytest.raises(cli.CliConfigError):
        cli.resolve_config({}, bad, environ={})


def test_config_file_parsing(tmp_path):
    assert cli.parse_config_text("# c\nseed = 4\n\nfamily=bimanual  # inline\n") == {
        "seed": "4", "family": "bimanual"}
    with pytest.raises(cli.CliConfigError):
        cli.parse_config_text("seed 4\n")


def test_exit_codes(tmp_path, capsys):
    assert run(tmp_path, "--episodes", "0", "gen-data") == 2
    assert run(tmp_path, "--set", "nonsense=1", "gen-data") == 2
    assert "unknown config keys" in capsys.readouterr().err
    assert run(tmp_path, "diagnose", str(tmp_path / "missing.bin")) == 3
    (tmp_path / "junk.bin").write_bytes(b"garbage")
    assert run(tmp_path, "train", str(tmp_path / "junk.bin")) == 3
    assert run(tmp_path, "--config", str(tmp_path / "nope.cfg"), "gen-data") == 3


def test_gen_data_counts_and_determinism(tmp_path, capsys):
    assert run(tmp_path, "--episodes", "10", "gen-data", name="a") == 0
    out = capsys.readouterr().out
    assert "intent 0: 5" in out and "intent 1: 5" in out
    assert run(tmp_path, "gen-data", "--episodes", "10", name="b") == 0
    assert (tmp_path / "a/corpus.bin").read_bytes() == (tmp_path / "b/corpus.bin").read_bytes()
    manifest = json.loads((tmp_path / "a/manifest.json").read_text())
    assert manifest["config"]["episodes"] == 10 and manifest["config"]["seed"] == 0


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ALIASIM_SEED", "7")
    assert run(tmp_path, "--episodes", "2", "gen-data", name="env") == 0
    monkeypatch.delenv("ALIASIM_SEED")
    assert run(tmp_path, "--episodes", "2", "--seed", "7", "gen-data", name="flag") == 0
    assert run(tmp_path, "--episodes", "2", "gen-data", name="default") == 0
    env = (tmp_path / "env/corpus.bin").read_bytes()
    assert env == (tmp_path / "flag/corpus.bin").read_bytes()
    assert env != (tmp_path / "default/corpus.bin").read_bytes()


@pytest.mark.parametrize("family,protocol", [("back_and_forth", "intra-episode, gap 20"),
                                             ("crossing_path", "cross-episode")])
def test_diagnose_protocols(tmp_path, family, protocol):
    assert run(tmp_path, "--family", family, "--episodes", "6", "gen-data") == 0
    assert run(tmp_path, "--family", family, "diagnose", str(tmp_path / "out/corpus.bin")) == 0
    rep = json.loads((tmp_path / "out/diagnostic.json").read_text())
    assert rep["meta"]["protocol"] == protocol
    assert 0.0 <= rep["metrics"]["diag_ratio"]["value"] <= 1.0
    assert rep["meta"]["config"]["family"] == family


def test_diagnose_rejects_task_mismatch(tmp_path, corpus):
    assert run(tmp_path, "--family", "bimanual", "diagnose", str(corpus)) == 2


def test_train_outputs(tmp_path, corpus):
    args = [*SMALL, "--steps", "3", "--variant", "frame_only", "train", str(corpus)]
    files = ("loss.csv", "checkpoint.ckpt", "train_config.json")
    assert run(tmp_path, *args, name="a") == 0
    first = {f: (tmp_path / "a" / f).read_bytes() for f in files}
    assert run(tmp_path, *args, name="a") == 0
    assert first == {f: (tmp_path / "a" / f).read_bytes() for f in files}
    assert (tmp_path / "a/loss.csv").read_text().splitlines()[0] == "step,loss,lr"
    ck = Tr.load_checkpoint(tmp_path / "a/checkpoint.ckpt")
    assert ck.policy["variant"] == "frame_only" and ck.step == 3
    assert ck.extra["config"]["steps"] == 3


def test_train_zero_steps_is_initialization(tmp_path, corpus):
    assert run(tmp_path, *SMALL, "--steps", "0", "train", str(corpus)) == 0
    ck = Tr.load_checkpoint(tmp_path / "out/checkpoint.ckpt")
    cfg = cli.resolve_config({}, {"d": "8", "heads": "2", "K": "4", "H": "4", "r": "2"}, environ={})
    from aliasim.model import build_variant
    fresh = build_variant("intent", cfg.task(), seed=0, **cfg.model_kw())
    for n, t in fresh.parameters():
        assert ck.params[n].tobytes() == t.data.tobytes()


def _report_rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_oracle_eval(tmp_path):
    assert run(tmp_path, "--oracle", "true", "--eval_episodes", "4", "eval") == 0
    text = (tmp_path / "out/report.csv").read_text()
    assert text.splitlines()[0] == ",".join(REPORT_COLUMNS) == "task,family,variant,metric,value,count,seed,r"
    vals = {r["metric"]: float(r["value"]) for r in _report_rows(tmp_path / "out/report.csv")}
    assert vals["success_rate"] == 1.0 and vals["icc_l2_mean"] == 0.0
    assert json.loads((tmp_path / "out/report.json").read_text())["meta"]["config"]["oracle"] is True


def test_eval_needs_checkpoint_and_matching_task(tmp_path, corpus):
    assert run(tmp_path, "eval") == 2
    assert run(tmp_path, *SMALL, "--steps", "1", "train", str(corpus), name="m") == 0
    ckpt = str(tmp_path / "m/checkpoint.ckpt")
    assert run(tmp_path, *SMALL, "--family", "bimanual", "eval", ckpt) == 2
    assert run(tmp_path, *SMALL, "--set", "noise=0.01", "eval", ckpt) == 2


def test_eval_reproducible_and_job_independent(tmp_path, corpus):
    assert run(tmp_path, *SMALL, "--steps", "2", "train", str(corpus), name="m") == 0
    ckpt = str(tmp_path / "m/checkpoint.ckpt")
    common = [*SMALL, "--eval_episodes", "4", "--n_draws", "2"]
    assert run(tmp_path, *common, "eval", ckpt, name="e1") == 0
    assert run(tmp_path, *common, "eval", ckpt, name="e2") == 0
    assert run(tmp_path, *common, "eval", ckpt, "--jobs", "2", name="e3") == 0
    a = (tmp_path / "e1/report.csv").read_bytes()
    assert a == (tmp_path / "e2/report.csv").read_bytes() == (tmp_path / "e3/report.csv").read_bytes()
    assert {r["metric"] for r in _report_rows(tmp_path / "e1/report.csv")} >= {
        "success_rate", "icc_l2_mean", "icc_l2_std", "icc_l2_p90"}


def test_oracle_eval_with_mode_switch_probes(tmp_path):
    assert run(tmp_path, "--oracle", "true", "--eval_episodes", "2", "--n_draws", "2", "eval") == 0
    rows = {r["metric"]: r for r in _report_rows(tmp_path / "out/report.csv")}
    assert int(rows["p_switch_mean"]["count"]) > 0
    assert all(r["variant"] == "expert" and r["r"] == "4" and r["seed"] == "0" for r in rows.values())


def _write_report(path, variant, family, value):
    path.write_text(",".join(REPORT_COLUMNS) + "\n" +
                    f"t,{family},{variant},success_rate,{value!r},10,0,4\n")
    return str(path)


def test_compare_self_has_zero_deltas(tmp_path, capsys):
    a = _write_report(tmp_path / "a.csv", "intent", "crossing_path", 0.6)
    assert run(tmp_path, "compare", a, a) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "out/compare.csv").read_text())))
    assert [r["method"] for r in rows] == ["intent#0", "intent#1"]
    assert all(float(r["delta Avg."]) == 0.0 for r in rows)


def test_compare_averages_and_layout(tmp_path):
    paths = [_write_report(tmp_path / "f1.csv", "frame_only", "crossing_path", 0.2),
             _write_report(tmp_path / "f2.csv", "frame_only", "bimanual", 0.4),
             _write_report(tmp_path / "i1.csv", "intent", "crossing_path", 0.7)]
    rows = []
    for p in paths:
        rows += cli.load_reports([p])
    header, table = cli.compare_table(rows)
    assert header == ["method", "Back-and-Forth", "Crossing-Path", "Bimanual", "Multi-Goal", "Avg.", "delta Avg."]
    frame, intent = table
    assert frame[0] == "frame_only" and frame[2] == 0.2 and frame[3] == 0.4
    assert frame[5] == pytest.approx(0.3, abs=1e-15)
    assert intent[5] == 0.7 and intent[6] == pytest.approx(0.4, abs=1e-15)


def test_compare_errors(tmp_path):
    a = _write_report(tmp_path / "a.csv", "intent", "crossing_path", 0.6)
    assert run(tmp_path, "compare", a) == 2
    (tmp_path / "bad.csv").write_text("x,y\n1,2\n")
    assert run(tmp_path, "compare", a, str(tmp_path / "bad.csv")) == 2


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "aliasim", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
