import json
import subprocess
import sys
from dataclasses import replace

import pytest
from _runs import overfit_run, prefix_run

from ldmole.cli import main
from ldmole.config import dump_config
from ldmole.training import DatasetSpec, toy_config


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def tiny_config(router="ld-shared", epochs=2):
    base = toy_config(epochs=epochs)
    return replace(base, model=replace(base.model, router=router),
                   data=DatasetSpec(n_train=96, n_val=48))


@pytest.mark.parametrize("argv,expected", [
    (["route", "--u=2,1,0", "--lambda=0"], "p = [1, 0, 0]\ntau = 1\nk = 1\n"),
    (["route", "--u=0,0"], "p = [0.5, 0.5]\ntau = -0.5\nk = 2\n"),
    (["route", "--u=2,1,0", "--lambda=-2"], "p = [0.666667, 0.333333, 0]\ntau = 0\nk = 2\n"),
])
def test_route_examples(capsys, argv, expected):
    code, out, _ = run(capsys, *argv)
    assert code == 0 and out == expected


def test_route_json_and_topk(capsys):
    code, out, _ = run(capsys, "route", "--u=2,1,0", "--topk=1", "--json")
    assert code == 0
    assert json.loads(out) == {"p": [1.0, 0.0, 0.0], "tau": None, "k": 1}


@pytest.mark.parametrize("argv", [
    ["route", "--u=a,b"], ["route", "--u=1,2", "--lambda=1"], ["route", "--u=1,2", "--topk=3"],
    ["oracle-check", "--trials", "0"], ["grad-check", "--e-max", "99"],
    ["eval", "/nonexistent/model.ldml"]])
def test_usage_errors_exit_2(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2 and err.startswith("error:")


def test_argparse_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["route"])
    assert ei.value.code == 2


def test_oracle_check_is_reproducible(capsys, tmp_path):
    code, out1, _ = run(capsys, "oracle-check", "--trials", "2000", "--seed", "7",
                        "--out", str(tmp_path / "r.json"))
    assert code == 0
    code, out2, _ = run(capsys, "oracle-check", "--trials", "2000", "--seed", "7")
    assert out1 == out2
    assert json.loads((tmp_path / "r.json").read_text())["failures"] == []
    code, out, _ = run(capsys, "grad-check", "--trials", "200")
    assert code == 0 and json.loads(out)["counts"]["gradient"] == 200


def test_missing_required_field_is_named(capsys, tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[model]\nrouter = topk\n[train]\nseed = 0\n", encoding="utf-8")
    code, _, err = run(capsys, "train", str(p), "--out", str(tmp_path / "run"))
    assert code == 2 and "train.epochs" in err
    assert not (tmp_path / "run").exists()


def test_train_eval_analyze(capsys, tmp_path):
    cfg_path = tmp_path / "c.ini"
    cfg_path.write_text(dump_config(tiny_config()), encoding="utf-8")
    code, out, _ = run(capsys, "train", str(cfg_path), "--out", str(tmp_path / "run"))
    assert code == 0
    ckpt = tmp_path / "run" / "model.ldml"
    blob = ckpt.read_bytes()
    assert blob[:4] == b"LDML"
    assert (tmp_path / "run" / "metrics.jsonl").read_text().count("\n") >= 2
    code, out, _ = run(capsys, "eval", str(ckpt), "--split", "val")
    assert code == 0 and 0.0 <= json.loads(out)["accuracy"] <= 1.0
    code, out, _ = run(capsys, "analyze", str(ckpt), "--out", str(tmp_path / "an"))
    assert code == 0
    assert json.loads(out)["first_layer_mean_active"] >= 1.0
    assert ckpt.read_bytes() == blob  # analysis never writes to the checkpoint


def test_eval_of_overfit_checkpoint(capsys, tmp_path):
    ckpt = tmp_path / "m.ldml"
    ckpt.write_bytes(overfit_run().checkpoint)
    code, out, _ = run(capsys, "eval", str(ckpt), "--split", "train")
    assert code == 0 and json.loads(out)["accuracy"] >= 0.95


def test_analyze_relu_adversarial(capsys, tmp_path):
    ckpt = tmp_path / "m.ldml"
    ckpt.write_bytes(prefix_run("relu").checkpoint)
    code, out, err = run(capsys, "analyze", str(ckpt), "--split", "adversarial",
                         "--out", str(tmp_path / "an"))
    assert code == 0
    assert json.loads(out)["max_zero_activation"] > 0
    assert "lambda_quantiles omitted" in err


def test_corrupt_checkpoint_exits_2(capsys, tmp_path):
    ckpt = tmp_path / "bad.ldml"
    ckpt.write_bytes(prefix_run("topk").checkpoint[:100])
    code, _, err = run(capsys, "analyze", str(ckpt), "--out", str(tmp_path / "an"))
    assert code == 2 and "checkpoint" in err


def test_compare_routers(capsys, tmp_path):
    cfg_path = tmp_path / "c.ini"
    cfg_path.write_text(dump_config(tiny_config(epochs=2)), encoding="utf-8")
    code, out, _ = run(capsys, "compare-routers", str(cfg_path), "--out", str(tmp_path / "a.json"))
    assert code == 0
    summary = json.loads((tmp_path / "a.json").read_text())
    assert sorted(summary["methods"]) == ["ld", "relu", "topk"]
    for m in summary["methods"].values():
        assert m["final_train_lm_loss"] < m["initial_train_lm_loss"]
    code, _, _ = run(capsys, "compare-routers", str(cfg_path), "--out", str(tmp_path / "b.json"))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "ldmole.cli", "route", "--u=1,1"],
                         capture_output=True, text=True, check=True)
    assert out.stdout.startswith("p = [0.5, 0.5]")
