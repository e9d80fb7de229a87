import json

import pytest

from reweightopt.cli import cli_main


def write_config(tmp_path, name="config.json", **overrides):
    config = {
        "dataset": {"generator": "rare_feature_regression", "params": {"seed": 0}},
        "model": {"kind": "linear"},
        "method": {"name": "rgd", "rule": {"divergence": "kl", "tau": 0.25}},
        "train": {"optimizer": "sgd", "lr_base": 4.0, "steps": 30,
                  "batch_size": 255, "seed": 0},
        "metrics": ["mse", "rare_l2", "frequent_l2"],
        "eval_every": 10,
    }
    config.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return path


def test_train_writes_trace(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "trace.csv"
    assert cli_main(["train", str(cfg), "--output", str(out)]) == 0
    assert out.exists()
    lines = out.read_text().splitlines()
    assert lines[0].startswith("step,split,objective")
    assert "final" in capsys.readouterr().out


def test_train_unknown_key_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, banana=1)
    assert cli_main(["train", str(cfg)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_train_malformed_json_exits_2(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{"dataset": \n totally-not-json')
    assert cli_main(["train", str(path)]) == 2
    err = capsys.readouterr().err
    assert ":2:" in err  # line-referenced parse error


def test_train_seed_override_changes_run(tmp_path):
    # minibatches so the batch stream (seeded by train.seed) matters
    cfg = write_config(tmp_path, train={"optimizer": "sgd", "lr_base": 1.0,
                                        "steps": 30, "batch_size": 32, "seed": 0})
    out1, out2, out3 = (tmp_path / f"t{i}.csv" for i in range(3))
    cli_main(["train", str(cfg), "--output", str(out1)])
    cli_main(["train", str(cfg), "--output", str(out2), "--seed", "1"])
    cli_main(["train", str(cfg), "--output", str(out3)])
    assert out1.read_bytes() == out3.read_bytes()
    assert out1.read_bytes() != out2.read_bytes()


def test_oracle_suite_passes(capsys):
    assert cli_main(["oracle", "--n", "6", "--trials", "25", "--grid", "801"]) == 0
    out = capsys.readouterr().out
    assert "max duality gap" in out and "PASS" in out


def test_gradcheck_suite_passes(capsys):
    assert cli_main(["gradcheck", "--trials", "8"]) == 0
    out = capsys.readouterr().out
    assert "gradcheck suite: PASS" in out


def test_report_tabulates_final_metrics(tmp_path, capsys):
    cfg_kl = write_config(tmp_path, "kl.json")
    out_kl = tmp_path / "kl.csv"
    cli_main(["train", str(cfg_kl), "--output", str(out_kl)])

    cfg_erm = write_config(tmp_path, "erm.json",
                           method={"name": "rgd", "rule": {"divergence": "none"}})
    out_erm = tmp_path / "erm.csv"
    cli_main(["train", str(cfg_erm), "--output", str(out_erm)])

    capsys.readouterr()
    assert cli_main(["report", str(out_kl), str(out_erm)]) == 0
    out = capsys.readouterr().out
    header = out.splitlines()[0]
    assert "rare_l2" in header and "frequent_l2" in header
    assert "kl.csv" in out and "erm.csv" in out


def test_sweep_command(tmp_path, capsys):
    base = {
        "dataset": {
            "generator": "gaussian_mixture_classification",
            "params": {"num_classes": 3, "n_per_class": 30, "dim": 4,
                       "separation": 3.0, "seed": 1},
            "split": {"holdout_fraction": 0.25, "seed": 2},
        },
        "model": {"kind": "softmax"},
        "method": {"name": "rgd", "rule": {"divergence": "kl", "tau": 1.0}},
        "train": {"optimizer": "sgd", "lr_base": 0.2, "steps": 40,
                  "batch_size": 16, "seed": 3},
        "metrics": ["accuracy"],
        "eval_every": 20,
    }
    spec_path = tmp_path / "sweep.json"
    spec_path.write_text(json.dumps({
        "base": base,
        "grid": {"tau": [1.0, 3.0], "lr_mult": [1.0]},
        "select": {"metric": "accuracy"},
    }))
    best_path = tmp_path / "best.json"
    assert cli_main(["sweep", str(spec_path), "--output", str(best_path)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "tau\tlr_mult\tstatus\taccuracy"
    best = json.loads(best_path.read_text())
    assert best["method"]["rule"]["tau"] in (1.0, 3.0)


def test_oracle_instances_file(tmp_path, capsys):
    records = [
        {"losses": [0.0, 1.0], "probs": [0.5, 0.5], "rho": 0.05, "divergence": "kl"},
        {"losses": [0.5, 2.0, 3.0], "probs": [0.4, 0.4, 0.2], "rho": 0.2,
         "divergence": "chi2"},
        {"losses": [0.5, 2.0, 3.0], "probs": [0.4, 0.4, 0.2], "rho": 0.2,
         "divergence": "reverse_kl"},
    ]
    path = tmp_path / "instances.json"
    path.write_text(json.dumps(records))
    assert cli_main(["oracle", "--instances", str(path)]) == 0
    out = capsys.readouterr().out
    assert "instance 0: kl" in out and "duality_gap" in out
    assert "oracle instances: PASS" in out


def test_sweep_bad_spec_exits_2(tmp_path):
    spec_path = tmp_path / "sweep.json"
    spec_path.write_text(json.dumps({"grid": {}}))
    assert cli_main(["sweep", str(spec_path)]) == 2


def test_missing_file_exits_2():
    assert cli_main(["train", "/nonexistent/config.json"]) == 2
