import json

import numpy as np
import pytest

from ibau import cli, formats
from ibau import tensor_core as tc
from ibau.config import default_config
from ibau.evalmetrics import attack_report
from ibau.model import MlpSpec, init_params
from ibau.pipeline import build_plan, run_experiment, sweep
from ibau.poison import load_csv

SMALL = [
    "--set", "data.dim=16", "--set", "data.per_class=100", "--set", "attack.dims=14,15",
    "--set", "train.hidden=16", "--set", "train.epochs=20", "--set", "unlearn.rounds=2",
]


def run(*args):
    return cli.main([*args])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in ("gen-data", "poison", "train", "unlearn"):
        assert run(cmd, "--out", str(out), *SMALL) == 0
    return out


def test_gen_data_sizes_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("gen-data", "--out", str(a)) == 0
    assert run("gen-data", "--out", str(b)) == 0
    sizes = {n: len(load_csv(a / f"{n}.csv", 4)) for n in ("train", "clean", "test")}
    assert sizes == {"train": 1200, "clean": 400, "test": 400}
    for n in ("train", "clean", "test"):
        assert (a / f"{n}.csv").read_bytes() == (b / f"{n}.csv").read_bytes()
    assert (a / "gen-data.resolved.ini").is_file()


def test_gen_data_refuses_overwrite(tmp_path, capsys):
    assert run("gen-data", "--out", str(tmp_path), *SMALL) == 0
    assert run("gen-data", "--out", str(tmp_path), *SMALL) == 2
    assert "--force" in capsys.readouterr().err
    assert run("gen-data", "--out", str(tmp_path), "--force", *SMALL) == 0


def test_bad_fractions_exit_2(tmp_path, capsys):
    assert run("gen-data", "--out", str(tmp_path), "--set", "data.fractions=0.5,0.2,0.2") == 2
    assert "data.fractions" in capsys.readouterr().err
    assert not (tmp_path / "train.csv").exists()


def test_usage_errors_exit_2(tmp_path):
    assert run("bogus") == 2
    assert run("gen-data", "--out", str(tmp_path), "--set", "data.nope=1") == 2
    assert run("train", "--out", str(tmp_path)) == 2
    assert run("sweep", "--out", str(tmp_path), "--axis", "width") == 2


def test_poison_counts(tmp_path):
    args = ["--out", str(tmp_path), "--set", "data.per_class=500", "--set", "data.fractions=0.5,0.25,0.25"]
    assert run("gen-data", *args) == 0
    assert run("poison", *args) == 0
    clean, poisoned = load_csv(tmp_path / "train.csv", 4), load_csv(tmp_path / "poisoned_train.csv", 4)
    changed = np.any(clean.x != poisoned.x, axis=1)
    assert len(clean) == 1000 and changed.sum() == 200
    assert np.all(poisoned.y[changed] == 0)


def test_poison_all_to_all(tmp_path):
    args = ["--out", str(tmp_path), "--set", "attack.mode=all_to_all", *SMALL]
    assert run("gen-data", *args) == 0 and run("poison", *args) == 0
    clean, poisoned = load_csv(tmp_path / "train.csv", 4), load_csv(tmp_path / "poisoned_train.csv", 4)
    changed = np.any(clean.x != poisoned.x, axis=1)
    np.testing.assert_array_equal(poisoned.y[changed], (clean.y[changed] + 1) % 4)
    np.testing.assert_array_equal(poisoned.y[~changed], clean.y[~changed])


def test_train_zero_epochs_is_init(tmp_path):
    args = ["--out", str(tmp_path), *SMALL, "--set", "train.epochs=0", "--set", "train.seed=5"]
    for cmd in ("gen-data", "poison", "train"):
        assert run(cmd, *args) == 0
    expected = init_params(MlpSpec((16, 16, 4)), tc.make_rng(5))
    assert formats.load_checkpoint(tmp_path / "model.ckpt").bitwise_equal(expected)


def test_non_finite_training_exits_1(tmp_path, capsys):
    args = ["--out", str(tmp_path), *SMALL, "--set", "train.optimizer=sgd", "--set", "train.lr=1e300"]
    for cmd in ("gen-data", "poison"):
        assert run(cmd, *args) == 0
    assert run("train", *args) == 1
    assert "non-finite" in capsys.readouterr().err


def test_unlearn_results(workdir):
    doc = formats.read_json(workdir / "results.json")
    assert len(doc["rounds"]) == 2 and doc["summary"]["method"] == "ibau"
    assert all(r["wall_time"] > 0 for r in doc["rounds"])
    header, rows = formats.read_csv(workdir / "results.csv")
    assert header == doc["columns"] == formats.round_columns(1) and len(rows) == 2
    for r, row in zip(doc["rounds"], rows):
        assert float(row[header.index("h_after")]) == r["h_after"]
        assert float(row[header.index("asr")]) == r["eval"]["asr"]


def test_unlearn_naive_dispatch(workdir, tmp_path):
    for name in ("model.ckpt", "trigger.txt", "clean.csv", "test.csv"):
        (tmp_path / name).write_bytes((workdir / name).read_bytes())
    assert run("unlearn", "--out", str(tmp_path), "--method", "naive", *SMALL) == 0
    doc = formats.read_json(tmp_path / "results.json")
    assert doc["summary"]["method"] == "naive"
    assert all(r["indirect_norm"] == 0.0 for r in doc["rounds"])


def test_attack_eval_consistency(workdir):
    assert run("attack-eval", "--out", str(workdir), "--force", *SMALL) == 0
    assert run("attack-eval", "--out", str(workdir), "--force", "--checkpoint", str(workdir / "sanitized.ckpt"),
               *SMALL) == 0
    poisoned = formats.read_json(workdir / "attack_eval_model.json")
    sanitized = formats.read_json(workdir / "attack_eval_sanitized.json")
    assert sanitized["asr"] != poisoned["asr"]
    header, rows = formats.read_csv(workdir / "attack_eval_model.csv")
    assert float(rows[0][header.index("asr")]) == poisoned["asr_per_entry"][0]["asr"]
    assert float(rows[0][header.index("acc")]) == poisoned["acc"]

    # the trigger file re-applies exactly the in-memory plan
    cfg = default_config().with_overrides([s for s in SMALL if s != "--set"])
    params = formats.load_checkpoint(workdir / "model.ckpt")
    rep = attack_report(params, load_csv(workdir / "test.csv", 4), build_plan(cfg, 16))
    assert rep.asr_overall == poisoned["asr"]


def test_attack_eval_missing_trigger(workdir, capsys):
    assert run("attack-eval", "--out", str(workdir), "--trigger", str(workdir / "nope.txt")) == 2
    assert "trigger file" in capsys.readouterr().err


def test_echoed_config_reproduces_bitwise(workdir, tmp_path):
    for name in ("poisoned_train.csv",):
        (tmp_path / name).write_bytes((workdir / name).read_bytes())
    assert run("train", "--out", str(tmp_path), "--config", str(workdir / "train.resolved.ini")) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (workdir / "model.ckpt").read_bytes()
    assert (tmp_path / "train.resolved.ini").read_text() == (workdir / "train.resolved.ini").read_text()


@pytest.mark.parametrize("analytic,threshold", [(False, 1e-4), (True, 1e-8)])
def test_oracle_check(tmp_path, analytic, threshold):
    flags = ["--analytic-hvp"] if analytic else []
    assert run("oracle-check", "--out", str(tmp_path), *flags) == 0
    doc = formats.read_json(tmp_path / "oracle_check.json")
    assert doc["threshold"] == threshold and doc["passed"] and doc["max_relative_error"] <= threshold
    header, rows = formats.read_csv(tmp_path / "error_curve.csv")
    assert header == ["inner_steps", "hypergrad_error"]
    assert [int(r[0]) for r in rows] == [0, 1, 3, 5, 10, 50]


def test_sweep_norm_bound_sorted(tmp_path):
    args = ["--out", str(tmp_path), *SMALL, "--set", "eval.sweep_values=2,0.5,1"]
    assert run("sweep", "--axis", "norm_bound", *args) == 0
    header, rows = formats.read_csv(tmp_path / "sweep_norm_bound.csv")
    assert [float(r[0]) for r in rows] == [0.5, 1.0, 2.0]


def test_sweep_seed_stats(tmp_path):
    args = ["--out", str(tmp_path), *SMALL, "--set", "train.epochs=5", "--set", "unlearn.rounds=1",
            "--set", "data.per_class=40"]
    assert run("sweep", "--axis", "seed", *args) == 0
    doc = json.loads((tmp_path / "sweep_seed.json").read_text())
    assert len(doc["rows"]) == 10
    assert set(doc["stats"]) == set(doc["columns"][1:])
    for s in doc["stats"].values():
        assert s["min"] <= s["mean"] <= s["max"] and s["std"] >= 0


def test_sweep_clean_size_includes_100():
    cfg = default_config().with_overrides([s for s in SMALL if s != "--set"])
    res = sweep(cfg, "clean_size", [0, 100])
    assert [r[0] for r in res.rows] == [100, 0]
    assert all(np.isfinite(v) for r in res.rows for v in r)


def test_run_experiment_is_bitwise_deterministic():
    cfg = default_config().with_overrides([s for s in SMALL if s != "--set"])
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert a.params.bitwise_equal(b.params)
    assert [r.h_after for r in a.records] == [r.h_after for r in b.records]
