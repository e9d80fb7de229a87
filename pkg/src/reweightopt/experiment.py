"""Experiment runner: strict JSON configs, training loops, traces, metrics.

A config fully determines a run (all seeds explicit), so traces are
byte-identical across repeated runs on the same platform.  Unknown config
keys are rejected, which keeps experiment files usable as archival
records.

Trace rows carry, per evaluation step and split: the method's reported
objective, the requested metrics, and weight statistics (min/mean/max and
the fraction of samples saturated at the clip).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen
from .datagen import Dataset
from .models import Batch, ModelKind, ModelState, per_sample_loss, predict, random_state, zero_state
from .optim import (
    BaselineState,
    TrainConfig,
    init_state,
    ma_exp_step,
    rgd_step,
    term_objective,
    term_step,
    term_weights,
)
from .weighting import (
    Divergence,
    WeightingRule,
    batch_weights,
    saturation_fraction,
    weighted_objective,
)

__all__ = [
    "ConfigError",
    "TraceRecord",
    "Trace",
    "validate_config",
    "minibatch_stream",
    "run_experiment",
    "direction_l2",
    "accuracy",
    "mse",
    "METRIC_DIRECTIONS",
    "export_trace",
    "parse_trace",
]


class ConfigError(ValueError):
    """Malformed experiment config; message names the offending key path."""


# +1 means larger is better; used for best-holdout tracking and sweeps
METRIC_DIRECTIONS = {"mse": -1, "accuracy": +1, "rare_l2": -1, "frequent_l2": -1}


@dataclass(frozen=True)
class TraceRecord:
    step: int
    split: str
    objective: float
    metrics: dict
    w_min: float
    w_mean: float
    w_max: float
    w_sat_frac: float


@dataclass
class Trace:
    """Append-only per-step records; steps strictly increase per split."""

    metric_names: tuple
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict, compare=False)

    def append(self, record: TraceRecord) -> None:
        for prev in reversed(self.records):
            if prev.split == record.split:
                if record.step <= prev.step:
                    raise ValueError(
                        f"step {record.step} not increasing for split {record.split!r}"
                    )
                break
        self.records.append(record)

    def rows(self, split: str | None = None):
        return [r for r in self.records if split is None or r.split == split]


def _check_keys(section: dict, path: str, required: set, optional: set = frozenset()):
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(section) - required - set(optional)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    missing = required - set(section)
    if missing:
        raise ConfigError(f"{path}: missing required key(s) {sorted(missing)}")


_GENERATOR_PARAMS = {
    "rare_feature_regression": ({"seed"}, set()),
    "gaussian_mixture_classification": (
        {"num_classes", "n_per_class", "dim", "separation", "seed"},
        set(),
    ),
}


def validate_config(config: dict) -> dict:
    """Strict-schema check; returns the config with defaults filled in."""
    _check_keys(
        config,
        "config",
        {"dataset", "model", "method", "train"},
        {"eval_every", "metrics", "output"},
    )
    try:
        cfg = json.loads(json.dumps(config))  # deep copy, also rejects non-JSON values
    except TypeError as exc:
        raise ConfigError(f"config not JSON-serializable: {exc}") from None

    ds = cfg["dataset"]
    _check_keys(ds, "dataset", {"generator", "params"}, {"subsample", "split", "flip_train"})
    gen = ds["generator"]
    if gen not in _GENERATOR_PARAMS:
        raise ConfigError(f"dataset.generator: unknown generator {gen!r}")
    req, opt = _GENERATOR_PARAMS[gen]
    _check_keys(ds["params"], "dataset.params", req, opt)
    if "subsample" in ds:
        _check_keys(ds["subsample"], "dataset.subsample", {"n_max", "imbalance_factor", "seed"})
    if "split" in ds:
        _check_keys(
            ds["split"], "dataset.split", {"seed"}, {"holdout_fraction", "test_fraction"}
        )
    if "flip_train" in ds:
        _check_keys(ds["flip_train"], "dataset.flip_train", {"fraction", "seed"})

    model = cfg["model"]
    _check_keys(model, "model", {"kind"}, {"hidden", "init_seed", "init_scale"})
    try:
        kind = ModelKind(model["kind"])
    except ValueError as exc:
        raise ConfigError(f"model.kind: {exc}") from None
    if kind is ModelKind.MLP and "init_seed" not in model:
        raise ConfigError("model.init_seed: required for mlp (no implicit entropy)")

    method = cfg["method"]
    name = method.get("name")
    if name == "rgd":
        _check_keys(method, "method", {"name", "rule"})
        _check_keys(
            method["rule"], "method.rule", {"divergence"}, {"tau", "gamma_override"}
        )
    elif name == "term":
        _check_keys(method, "method", {"name", "t_tilt"})
    elif name == "ma":
        _check_keys(method, "method", {"name", "lam", "beta_ma"})
    else:
        raise ConfigError(f"method.name: expected rgd|term|ma, got {name!r}")

    _check_keys(
        cfg["train"],
        "train",
        {"optimizer", "lr_base", "steps", "batch_size", "seed"},
        {"schedule", "beta1", "beta2", "eps", "box"},
    )

    cfg.setdefault("eval_every", 10)
    if not (isinstance(cfg["eval_every"], int) and cfg["eval_every"] >= 1):
        raise ConfigError("eval_every: must be a positive integer")
    cfg.setdefault("metrics", [])
    for m in cfg["metrics"]:
        if m not in METRIC_DIRECTIONS:
            raise ConfigError(f"metrics: unknown metric {m!r}")
    return cfg


def _build_rule(rule_cfg: dict) -> WeightingRule:
    try:
        return WeightingRule(
            Divergence(rule_cfg["divergence"]),
            float(rule_cfg.get("tau", 1.0)),
            rule_cfg.get("gamma_override"),
        )
    except ValueError as exc:
        raise ConfigError(f"method.rule: {exc}") from None


def _build_datasets(ds_cfg: dict) -> dict:
    gen = getattr(datagen, ds_cfg["generator"])
    full = gen(**ds_cfg["params"])
    if "subsample" in ds_cfg:
        sub = ds_cfg["subsample"]
        counts = datagen.long_tailed_counts(
            full.num_classes, sub["n_max"], sub["imbalance_factor"]
        )
        full = datagen.subsample_long_tailed(full, counts, sub["seed"])

    splits = {"train": full}
    if "split" in ds_cfg:
        sp = ds_cfg["split"]
        test_frac = float(sp.get("test_fraction", 0.0))
        holdout_frac = float(sp.get("holdout_fraction", 0.0))
        rest = full
        if test_frac > 0:
            rest, splits["test"] = datagen.split(rest, 1.0 - test_frac, sp["seed"])
        if holdout_frac > 0:
            frac = holdout_frac / (1.0 - test_frac)
            rest, splits["holdout"] = datagen.split(rest, 1.0 - frac, sp["seed"] + 1)
        splits["train"] = rest
    if "flip_train" in ds_cfg:
        fl = ds_cfg["flip_train"]
        splits["train"] = datagen.flip_labels(splits["train"], fl["fraction"], fl["seed"])
    return splits


def _build_model(model_cfg: dict, dataset: Dataset) -> ModelState:
    kind = ModelKind(model_cfg["kind"])
    num_classes = dataset.num_classes if dataset.is_classification else 1
    if kind is ModelKind.LINEAR:
        return zero_state(kind, dataset.dim)
    hidden = tuple(model_cfg.get("hidden", ()))
    if kind is ModelKind.SOFTMAX:
        return zero_state(kind, dataset.dim, num_classes)
    return random_state(
        kind,
        dataset.dim,
        num_classes,
        hidden,
        seed=model_cfg["init_seed"],
        scale=model_cfg.get("init_scale"),
    )


def _build_train_config(train_cfg: dict, rule: WeightingRule) -> TrainConfig:
    box = train_cfg.get("box")
    try:
        return TrainConfig(
            optimizer=train_cfg["optimizer"],
            rule=rule,
            lr_base=float(train_cfg["lr_base"]),
            schedule=train_cfg.get("schedule", "constant"),
            steps=int(train_cfg["steps"]),
            batch_size=int(train_cfg["batch_size"]),
            seed=int(train_cfg["seed"]),
            beta1=float(train_cfg.get("beta1", 0.9)),
            beta2=float(train_cfg.get("beta2", 0.999)),
            eps=float(train_cfg.get("eps", 1e-8)),
            box=tuple(box) if box is not None else None,
        )
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def minibatch_stream(n: int, batch_size: int, steps: int, seed: int):
    """Yield `steps` index arrays; epoch-shuffled sampling w/o replacement."""
    rng = np.random.default_rng(seed)
    produced = 0
    while produced < steps:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            if produced == steps:
                return
            yield perm[start : start + batch_size]
            produced += 1


def direction_l2(theta, theta_star, index_set) -> float:
    """Euclidean distance to theta* restricted to the given coordinates."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    theta_star = np.asarray(theta_star, dtype=np.float64).reshape(-1)
    idx = np.asarray(list(index_set), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= theta.size):
        raise ValueError("index set outside parameter range")
    diff = theta[idx] - theta_star[idx]
    return float(np.sqrt(np.sum(diff**2)))


def accuracy(model: ModelState, dataset: Dataset) -> float:
    """Argmax-match fraction on a classification dataset."""
    if model.kind is ModelKind.LINEAR or not dataset.is_classification:
        raise ValueError("accuracy needs a classifier and a classification dataset")
    return float(np.mean(predict(model, dataset.inputs) == dataset.targets))


def mse(model: ModelState, dataset: Dataset) -> float:
    """Mean squared prediction error on a regression dataset."""
    if model.kind is not ModelKind.LINEAR or dataset.is_classification:
        raise ValueError("mse needs a regression model and dataset")
    pred = predict(model, dataset.inputs)
    return float(np.mean((pred - dataset.targets) ** 2))


def _metric_value(name: str, model: ModelState, dataset: Dataset) -> float:
    if name == "mse":
        return mse(model, dataset)
    if name == "accuracy":
        return accuracy(model, dataset)
    if name in ("rare_l2", "frequent_l2"):
        key = "rare_indices" if name == "rare_l2" else "frequent_indices"
        if "theta_star" not in dataset.meta or key not in dataset.meta:
            raise ConfigError(f"metrics: {name} needs theta_star/{key} in dataset metadata")
        return direction_l2(model.theta, dataset.meta["theta_star"], dataset.meta[key])
    raise ConfigError(f"metrics: unknown metric {name!r}")


class _Method:
    """Uniform step/report interface over the three training methods."""

    def __init__(self, method_cfg: dict, train_config: TrainConfig):
        self.name = method_cfg["name"]
        self.config = train_config
        if self.name == "rgd":
            self.rule = train_config.rule
        elif self.name == "term":
            self.t_tilt = float(method_cfg["t_tilt"])
            if self.t_tilt <= 0:
                raise ConfigError("method.t_tilt: must be positive")
        else:
            try:
                self.baseline = BaselineState(
                    float(method_cfg["lam"]), float(method_cfg["beta_ma"])
                )
            except ValueError as exc:
                raise ConfigError(f"method: {exc}") from None

    def step(self, state, batch):
        if self.name == "rgd":
            state, _ = rgd_step(state, batch, self.rule, self.config)
        elif self.name == "term":
            state, _ = term_step(state, batch, self.t_tilt, self.config)
        else:
            state, self.baseline, _ = ma_exp_step(state, self.baseline, batch, self.config)
        return state

    def report(self, losses):
        """(objective, weights, saturated fraction) for trace rows."""
        if self.name == "rgd":
            w = batch_weights(losses, self.rule)
            return weighted_objective(losses, w), w, saturation_fraction(losses, self.rule)
        if self.name == "term":
            return term_objective(losses, self.t_tilt), term_weights(losses, self.t_tilt), 0.0
        with np.errstate(over="ignore"):
            e = np.exp(self.baseline.lam * np.asarray(losses))
        z = self.baseline.z if self.baseline.z is not None else float(np.mean(e))
        return float(np.mean(losses)), e / z, 0.0


def _as_batch(dataset: Dataset) -> Batch:
    return Batch(dataset.inputs, dataset.targets)


def run_experiment(config: dict):
    """Run one experiment; returns (trace, summary).

    Training divergence raises :class:`TrainingDivergenceError` with the
    offending step index.
    """
    cfg = validate_config(config)
    splits = _build_datasets(cfg["dataset"])
    train_ds = splits["train"]
    rule = (
        _build_rule(cfg["method"]["rule"])
        if cfg["method"]["name"] == "rgd"
        else WeightingRule(Divergence.NONE)
    )
    train_config = _build_train_config(cfg["train"], rule)
    model = _build_model(cfg["model"], train_ds)
    method = _Method(cfg["method"], train_config)

    state = init_state(model, train_config.optimizer)
    metric_names = tuple(cfg["metrics"])
    trace = Trace(
        metric_names,
        meta={
            "method": method.name,
            "batching": "epoch_shuffle_without_replacement",
            "splits": {name: ds.n for name, ds in splits.items()},
        },
    )

    eval_batches = {name: _as_batch(ds) for name, ds in splits.items()}

    def record(step: int):
        for name in ("train", "holdout", "test"):
            if name not in splits:
                continue
            losses = per_sample_loss(state.model, eval_batches[name])
            objective, w, sat = method.report(losses)
            metrics = {m: _metric_value(m, state.model, splits[name]) for m in metric_names}
            trace.append(
                TraceRecord(
                    step,
                    name,
                    float(objective),
                    metrics,
                    float(np.min(w)),
                    float(np.mean(w)),
                    float(np.max(w)),
                    float(sat),
                )
            )

    record(0)
    stream = minibatch_stream(
        train_ds.n, train_config.batch_size, train_config.steps, train_config.seed
    )
    x, y = train_ds.inputs, train_ds.targets
    for step, idx in enumerate(stream, start=1):
        state = method.step(state, Batch(x[idx], y[idx]))
        if step % cfg["eval_every"] == 0 or step == train_config.steps:
            record(step)

    summary = _summarize(trace, metric_names)
    summary["method"] = method.name
    summary["seed"] = train_config.seed
    summary["final_theta"] = state.model.theta.tolist()
    return trace, summary


def _summarize(trace: Trace, metric_names) -> dict:
    summary = {"final": {}, "holdout_best": {}}
    for split in ("train", "holdout", "test"):
        rows = trace.rows(split)
        if not rows:
            continue
        last = rows[-1]
        summary["final"][split] = {"step": last.step, "objective": last.objective, **last.metrics}
    for m in metric_names:
        rows = trace.rows("holdout")
        if not rows:
            continue
        sign = METRIC_DIRECTIONS[m]
        best = max(rows, key=lambda r: sign * r.metrics[m])
        summary["holdout_best"][m] = {"step": best.step, "value": best.metrics[m]}
    return summary


_FIXED_COLUMNS = ("step", "split", "objective")
_STAT_COLUMNS = ("w_min", "w_mean", "w_max", "w_sat_frac")


def export_trace(trace: Trace, path, fmt: str | None = None) -> None:
    """Write a trace as CSV or JSON; both round-trip at full precision."""
    path = Path(path)
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower() or "csv"
    if fmt not in ("csv", "json"):
        raise ValueError(f"unsupported trace format {fmt!r}")
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(list(_FIXED_COLUMNS) + list(trace.metric_names) + list(_STAT_COLUMNS))
            for r in trace.records:
                row = [r.step, r.split, repr(r.objective)]
                row += [repr(r.metrics[m]) for m in trace.metric_names]
                row += [repr(r.w_min), repr(r.w_mean), repr(r.w_max), repr(r.w_sat_frac)]
                writer.writerow(row)
        return
    payload = []
    for r in trace.records:
        obj = {"step": r.step, "split": r.split, "objective": r.objective}
        obj.update({m: r.metrics[m] for m in trace.metric_names})
        obj.update(
            {"w_min": r.w_min, "w_mean": r.w_mean, "w_max": r.w_max, "w_sat_frac": r.w_sat_frac}
        )
        payload.append(obj)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def parse_trace(path) -> Trace:
    """Read back a trace written by :func:`export_trace`."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        with open(path) as fh:
            payload = json.load(fh)
        if not payload:
            raise ValueError(f"empty trace file {path}")
        keys = list(payload[0].keys())
        metric_names = tuple(k for k in keys if k not in _FIXED_COLUMNS + _STAT_COLUMNS)
        trace = Trace(metric_names)
        for obj in payload:
            trace.append(
                TraceRecord(
                    int(obj["step"]),
                    obj["split"],
                    float(obj["objective"]),
                    {m: float(obj[m]) for m in metric_names},
                    float(obj["w_min"]),
                    float(obj["w_mean"]),
                    float(obj["w_max"]),
                    float(obj["w_sat_frac"]),
                )
            )
        return trace
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[:3]) != _FIXED_COLUMNS or tuple(header[-4:]) != _STAT_COLUMNS:
            raise ValueError(f"unrecognized trace header in {path}")
        metric_names = tuple(header[3:-4])
        trace = Trace(metric_names)
        for row in reader:
            values = dict(zip(header, row))
            trace.append(
                TraceRecord(
                    int(values["step"]),
                    values["split"],
                    float(values["objective"]),
                    {m: float(values[m]) for m in metric_names},
                    float(values["w_min"]),
                    float(values["w_mean"]),
                    float(values["w_max"]),
                    float(values["w_sat_frac"]),
                )
            )
    return trace
