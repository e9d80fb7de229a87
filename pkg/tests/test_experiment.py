import json
import math

import numpy as np
import pytest

from reweightopt.datagen import gaussian_mixture_classification, rare_feature_regression
from reweightopt.experiment import (
    ConfigError,
    Trace,
    TraceRecord,
    accuracy,
    direction_l2,
    export_trace,
    minibatch_stream,
    mse,
    parse_trace,
    run_experiment,
    validate_config,
)
from reweightopt.models import ModelKind, ModelState, zero_state
from reweightopt.optim import TrainingDivergenceError


def toy_config(seed=0, divergence="kl", tau=0.25, steps=60, lr=4.0):
    rule = {"divergence": divergence}
    if divergence != "none":
        rule["tau"] = tau
    return {
        "dataset": {"generator": "rare_feature_regression", "params": {"seed": seed}},
        "model": {"kind": "linear"},
        "method": {"name": "rgd", "rule": rule},
        "train": {
            "optimizer": "sgd",
            "lr_base": lr,
            "steps": steps,
            "batch_size": 255,
            "seed": seed,
        },
        "metrics": ["mse", "rare_l2", "frequent_l2"],
        "eval_every": 20,
    }


def mixture_config(seed=0, method=None, steps=100):
    return {
        "dataset": {
            "generator": "gaussian_mixture_classification",
            "params": {"num_classes": 3, "n_per_class": 40, "dim": 4,
                       "separation": 3.0, "seed": seed},
            "split": {"holdout_fraction": 0.2, "test_fraction": 0.2, "seed": seed},
        },
        "model": {"kind": "softmax"},
        "method": method or {"name": "rgd", "rule": {"divergence": "kl", "tau": 1.0}},
        "train": {"optimizer": "sgd", "lr_base": 0.2, "steps": steps,
                  "batch_size": 16, "seed": seed},
        "metrics": ["accuracy"],
        "eval_every": 25,
    }


class TestConfigValidation:
    def test_unknown_top_level_key(self):
        cfg = toy_config()
        cfg["extra"] = 1
        with pytest.raises(ConfigError, match="unknown key"):
            validate_config(cfg)

    def test_unknown_nested_key(self):
        cfg = toy_config()
        cfg["train"]["momentum"] = 0.9
        with pytest.raises(ConfigError, match="train"):
            validate_config(cfg)

    def test_missing_required(self):
        cfg = toy_config()
        del cfg["train"]["lr_base"]
        with pytest.raises(ConfigError, match="lr_base"):
            validate_config(cfg)

    def test_unknown_generator(self):
        cfg = toy_config()
        cfg["dataset"]["generator"] = "cifar10"
        with pytest.raises(ConfigError, match="generator"):
            validate_config(cfg)

    def test_unknown_metric(self):
        cfg = toy_config()
        cfg["metrics"] = ["f1"]
        with pytest.raises(ConfigError, match="metric"):
            validate_config(cfg)

    def test_bad_method(self):
        cfg = toy_config()
        cfg["method"] = {"name": "focal"}
        with pytest.raises(ConfigError, match="method"):
            validate_config(cfg)

    def test_mlp_needs_init_seed(self):
        cfg = mixture_config()
        cfg["model"] = {"kind": "mlp", "hidden": [8]}
        with pytest.raises(ConfigError, match="init_seed"):
            validate_config(cfg)

    def test_defaults_filled(self):
        cfg = toy_config()
        del cfg["eval_every"]
        del cfg["metrics"]
        out = validate_config(cfg)
        assert out["eval_every"] == 10 and out["metrics"] == []


class TestMinibatchStream:
    def test_epoch_without_replacement(self):
        batches = list(minibatch_stream(10, 3, 4, seed=0))
        assert [len(b) for b in batches] == [3, 3, 3, 1]
        seen = np.concatenate(batches)
        assert np.array_equal(np.sort(seen), np.arange(10))

    def test_reshuffles_each_epoch(self):
        batches = list(minibatch_stream(6, 6, 3, seed=1))
        assert not np.array_equal(batches[0], batches[1]) or not np.array_equal(
            batches[1], batches[2]
        )

    def test_deterministic(self):
        a = [b.tolist() for b in minibatch_stream(20, 7, 10, seed=5)]
        b = [b.tolist() for b in minibatch_stream(20, 7, 10, seed=5)]
        assert a == b


class TestRunExperiment:
    def test_deterministic_traces(self):
        t1, s1 = run_experiment(toy_config())
        t2, s2 = run_experiment(toy_config())
        assert t1 == t2
        assert s1 == s2

    def test_byte_identical_exports(self, tmp_path):
        t1, _ = run_experiment(toy_config())
        t2, _ = run_experiment(toy_config())
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        export_trace(t1, p1)
        export_trace(t2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_zero_step_run_has_only_initial_eval(self):
        cfg = toy_config(steps=0)
        trace, summary = run_experiment(cfg)
        assert [r.step for r in trace.records] == [0]
        assert summary["final"]["train"]["step"] == 0

    def test_final_step_always_recorded(self):
        cfg = toy_config(steps=33)  # not a multiple of eval_every
        trace, _ = run_experiment(cfg)
        assert trace.records[-1].step == 33

    def test_kl_weight_stats_bounds(self):
        cfg = mixture_config()
        trace, _ = run_experiment(cfg)
        cap = math.exp(1.0 / 2.0)
        for rec in trace.records:
            assert rec.w_min >= 1.0
            assert rec.w_max <= cap
            assert 0.0 <= rec.w_sat_frac <= 1.0

    def test_splits_present(self):
        trace, summary = run_experiment(mixture_config())
        splits = {r.split for r in trace.records}
        assert splits == {"train", "holdout", "test"}
        assert set(summary["final"]) == {"train", "holdout", "test"}
        assert "accuracy" in summary["holdout_best"]

    def test_flip_applies_to_train_only(self):
        cfg = mixture_config()
        cfg["dataset"]["flip_train"] = {"fraction": 0.5, "seed": 9}
        trace, summary = run_experiment(cfg)
        assert summary["final"]["test"]["accuracy"] >= 0.5

    def test_divergence_error_carries_step(self):
        cfg = toy_config(lr=1e250, divergence="none", steps=10)
        with pytest.raises(TrainingDivergenceError) as err:
            run_experiment(cfg)
        assert 1 <= err.value.step <= 10

    def test_term_and_ma_methods_run(self):
        for method in (
            {"name": "term", "t_tilt": 1.0},
            {"name": "ma", "lam": 1.0, "beta_ma": 0.5},
        ):
            trace, summary = run_experiment(mixture_config(method=method, steps=40))
            assert summary["final"]["train"]["accuracy"] > 0.5


class TestMetrics:
    def test_direction_l2(self):
        theta = np.zeros(10)
        theta_star = np.zeros(10)
        assert direction_l2(theta, theta_star, range(10)) == 0.0
        theta = np.zeros(10)
        theta[7] = 1.0
        assert direction_l2(theta, theta_star, [5, 6, 7, 8, 9]) == 1.0
        assert direction_l2(theta, theta_star, [0, 1, 2, 3, 4]) == 0.0
        with pytest.raises(ValueError):
            direction_l2(theta, theta_star, [10])

    def test_accuracy_perfect_and_chance(self):
        ds = gaussian_mixture_classification(4, 10, 5, 50.0, seed=1)
        # well-separated blobs: unit weight on each mean axis classifies perfectly
        w = np.zeros((4, 5))
        for c in range(4):
            w[c, c] = 1.0
        model = ModelState(ModelKind.SOFTMAX, np.concatenate([w.ravel(), np.zeros(4)]), 5, 4)
        assert accuracy(model, ds) == 1.0
        # all-zero logits predict class 0 always: 1/C on balanced data
        assert accuracy(zero_state(ModelKind.SOFTMAX, 5, 4), ds) == 0.25

    def test_mse_at_optimum(self):
        ds = rare_feature_regression(seed=2)
        model = ModelState(ModelKind.LINEAR, np.array(ds.meta["theta_star"]), 10)
        assert mse(model, ds) == 0.0

    def test_kind_mismatch(self):
        ds = rare_feature_regression(seed=3)
        with pytest.raises(ValueError):
            accuracy(zero_state(ModelKind.SOFTMAX, 10, 3), ds)
        clf_ds = gaussian_mixture_classification(3, 5, 4, 1.0, seed=4)
        with pytest.raises(ValueError):
            mse(zero_state(ModelKind.LINEAR, 4), clf_ds)


class TestTraceExport:
    def test_csv_round_trip(self, tmp_path):
        trace, _ = run_experiment(toy_config())
        path = tmp_path / "trace.csv"
        export_trace(trace, path)
        assert parse_trace(path) == trace

    def test_json_round_trip(self, tmp_path):
        trace, _ = run_experiment(toy_config())
        path = tmp_path / "trace.json"
        export_trace(trace, path)
        assert parse_trace(path) == trace

    def test_formats_numerically_identical(self, tmp_path):
        trace, _ = run_experiment(toy_config())
        export_trace(trace, tmp_path / "t.csv")
        export_trace(trace, tmp_path / "t.json")
        assert parse_trace(tmp_path / "t.csv") == parse_trace(tmp_path / "t.json")

    def test_header_layout(self, tmp_path):
        trace, _ = run_experiment(toy_config())
        path = tmp_path / "trace.csv"
        export_trace(trace, path)
        header = path.read_text().splitlines()[0]
        assert header == "step,split,objective,mse,rare_l2,frequent_l2,w_min,w_mean,w_max,w_sat_frac"

    def test_zero_step_trace_is_header_plus_one_row(self, tmp_path):
        trace, _ = run_experiment(toy_config(steps=0))
        path = tmp_path / "trace.csv"
        export_trace(trace, path)
        assert len(path.read_text().splitlines()) == 2

    def test_append_monotonicity_enforced(self):
        trace = Trace(())
        trace.append(TraceRecord(0, "train", 1.0, {}, 1.0, 1.0, 1.0, 0.0))
        trace.append(TraceRecord(0, "test", 1.0, {}, 1.0, 1.0, 1.0, 0.0))
        with pytest.raises(ValueError):
            trace.append(TraceRecord(0, "train", 1.0, {}, 1.0, 1.0, 1.0, 0.0))
