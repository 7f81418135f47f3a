import json
import subprocess
import sys

import pytest

from adaprune3d.cli import main

TINY = {"dataset": {"n_train": 20, "n_test": 10, "seed": 2}, "step1_epochs": 1, "step2_epochs": 1,
        "step1_batch": 10, "step2_batch": 10}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    return root, cfg


def cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out.strip().splitlines()[-1]) if code == 0 else None), err


def test_full_workflow(run_dir, capsys):
    root, cfg = run_dir
    common = ["--config", str(cfg), "--out", str(root / "w")]
    code, res, _ = cli(capsys, "gen-dataset", *common)
    assert code == 0 and res["command"] == "gen-dataset"
    # eval before step 2 runs on the step-1 checkpoint with the untrained controller
    assert cli(capsys, "train-ava", *common)[0] == 0
    code, res, _ = cli(capsys, "eval", *common)
    assert code == 0 and res["pruning_rate"] > 0
    assert cli(capsys, "train-aap", *common)[0] == 0
    code, res, _ = cli(capsys, "eval", *common)
    assert code == 0
    reports = root / "w" / "reports"
    ev = json.loads((reports / "eval.json").read_text())
    assert ev["checkpoint_step"] == 2 and "accuracy_drop_points" in ev
    for cmd in ("report-flops", "report-complexity"):
        assert cli(capsys, cmd, *common)[0] == 0
    code, res, _ = cli(capsys, "bench", *common, "--repetitions", "1", "--samples", "2")
    assert code == 0 and set(res["speedup"]) == {"1.0", "0.75", "0.5", "0.25"}
    for name in ("train_ava_curves.csv", "theta_trajectory.csv", "eval_layers.csv", "eval_samples.csv",
                 "eval_decomposition.csv", "flops_per_layer.csv", "flops_sample0.json",
                 "complexity_samples.csv", "complexity_regression.json", "bench.json"):
        assert (reports / name).exists(), name


def test_cotrain_and_ablate(run_dir, capsys):
    root, cfg = run_dir
    common = ["--config", str(cfg), "--out", str(root / "a")]
    assert cli(capsys, "gen-dataset", *common)[0] == 0
    assert cli(capsys, "train-ava", *common)[0] == 0
    assert cli(capsys, "train-aap", *common, "--cotrain")[0] == 0
    code, res, _ = cli(capsys, "ablate", *common)
    assert code == 0 and "ordering_holds" in res
    assert (root / "a" / "reports" / "ablation.csv").exists()


def test_missing_prerequisites_exit_2(run_dir, capsys):
    root, cfg = run_dir
    empty = ["--config", str(cfg), "--out", str(root / "empty")]
    code, _, err = cli(capsys, "train-ava", *empty)
    assert code == 2 and "gen-dataset" in err
    assert cli(capsys, "gen-dataset", *empty)[0] == 0
    code, _, err = cli(capsys, "train-aap", *empty)
    assert code == 2 and "train-ava" in err
    assert cli(capsys, "eval", *empty)[0] == 2


def test_bad_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lam": -1}))
    assert cli(capsys, "gen-dataset", "--config", str(bad), "--out", str(tmp_path))[0] == 2
    bad.write_text("[")
    assert cli(capsys, "gen-dataset", "--config", str(bad), "--out", str(tmp_path))[0] == 2
    assert cli(capsys, "gen-dataset", "--threads", "0", "--out", str(tmp_path))[0] == 2


def test_seed_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    for seed in ("5", "6"):
        assert cli(capsys, "gen-dataset", "--config", str(cfg), "--seed", seed, "--out", str(tmp_path / seed))[0] == 0
    m5 = json.loads((tmp_path / "5" / "dataset" / "manifest.json").read_text())
    m6 = json.loads((tmp_path / "6" / "dataset" / "manifest.json").read_text())
    assert m5["spec"]["seed"] == 5 and m5["splits"]["train"]["sha256"] != m6["splits"]["train"]["sha256"]


def test_argparse_errors():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--dimension", "pixel"])
    assert exc.value.code == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "adaprune3d.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-dataset" in out.stdout
