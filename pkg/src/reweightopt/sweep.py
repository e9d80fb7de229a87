"""Hyperparameter grid sweeps with holdout selection.

The grid axes depend on the method: clip level tau for the reweighted
method, tilting coefficient for the batch-tilted baseline, and
(lam, beta_ma) for the moving-average baseline; every method sweeps a
learning-rate multiplier.  Grid points run independently (a diverging
point is recorded, not fatal) and selection breaks ties toward the
lexicographically smallest hyperparameter tuple, so re-running a sweep
reproduces the same choice.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

from .experiment import METRIC_DIRECTIONS, ConfigError, run_experiment, validate_config
from .optim import TrainingDivergenceError

__all__ = ["SweepSpec", "GridResult", "sweep", "validate_sweep_spec"]

_METHOD_AXES = {
    "rgd": ("tau", "lr_mult"),
    "term": ("t_tilt", "lr_mult"),
    "ma": ("lam", "beta_ma", "lr_mult"),
}

_DEFAULT_GRIDS = {
    "tau": [1.0, 3.0, 5.0, 7.0, 9.0],
    "lr_mult": [0.5, 0.75, 1.0, 1.25, 1.5],
    "t_tilt": [0.2, 0.5, 1.0, 3.0, 5.0],
    "lam": [1.0, 3.0, 5.0, 7.0],
    "beta_ma": [0.25, 0.5, 0.75],
}


@dataclass(frozen=True)
class SweepSpec:
    """Axes (name -> value list), selection metric, and selection split."""

    axes: dict
    select_metric: str
    select_split: str = "holdout"

    def __post_init__(self):
        if not self.axes or any(len(v) == 0 for v in self.axes.values()):
            raise ConfigError("sweep grid must be nonempty on every axis")
        if self.select_metric not in METRIC_DIRECTIONS:
            raise ConfigError(f"unknown selection metric {self.select_metric!r}")


@dataclass(frozen=True)
class GridResult:
    params: tuple
    status: str  # "ok" or "failed"
    metric: float | None
    detail: str = ""
    summary: dict | None = field(default=None, compare=False)


def validate_sweep_spec(spec: dict, base_config: dict) -> SweepSpec:
    """Build a SweepSpec from a JSON dict, filling default grids."""
    unknown = set(spec) - {"grid", "select"}
    if unknown:
        raise ConfigError(f"sweep: unknown key(s) {sorted(unknown)}")
    method = base_config.get("method", {}).get("name")
    if method not in _METHOD_AXES:
        raise ConfigError(f"sweep: base config has unknown method {method!r}")
    axis_names = _METHOD_AXES[method]
    grid_cfg = spec.get("grid", {})
    bad = set(grid_cfg) - set(axis_names)
    if bad:
        raise ConfigError(f"sweep.grid: axes {sorted(bad)} not valid for method {method!r}")
    axes = {name: list(grid_cfg.get(name, _DEFAULT_GRIDS[name])) for name in axis_names}
    select = spec.get("select", {})
    unknown = set(select) - {"metric", "split"}
    if unknown:
        raise ConfigError(f"sweep.select: unknown key(s) {sorted(unknown)}")
    if "metric" not in select:
        raise ConfigError("sweep.select.metric is required")
    return SweepSpec(axes, select["metric"], select.get("split", "holdout"))


def _apply_point(base_config: dict, axes: tuple, point: tuple) -> dict:
    cfg = json.loads(json.dumps(base_config))
    for name, value in zip(axes, point):
        if name == "lr_mult":
            cfg["train"]["lr_base"] = base_config["train"]["lr_base"] * value
        elif name == "tau":
            cfg["method"]["rule"]["tau"] = value
        else:
            cfg["method"][name] = value
    return cfg


def sweep(spec: SweepSpec, base_config: dict):
    """Run every grid point; returns (best_config, results).

    The selection value is the final metric on the selection split.
    Failed points never win; if every point fails, best_config is None.
    """
    base = validate_config(base_config)
    if spec.select_metric not in base["metrics"]:
        raise ConfigError(
            f"selection metric {spec.select_metric!r} missing from config metrics"
        )
    axis_names = tuple(spec.axes.keys())
    sign = METRIC_DIRECTIONS[spec.select_metric]
    results: list[GridResult] = []
    best = None  # (sign * value, params, config)
    for point in itertools.product(*(sorted(spec.axes[a]) for a in axis_names)):
        cfg = _apply_point(base, axis_names, point)
        try:
            _, summary = run_experiment(cfg)
        except TrainingDivergenceError as exc:
            results.append(GridResult(point, "failed", None, str(exc)))
            continue
        split_final = summary["final"].get(spec.select_split)
        if split_final is None or spec.select_metric not in split_final:
            raise ConfigError(
                f"selection split {spec.select_split!r} missing from run summary"
            )
        value = split_final[spec.select_metric]
        results.append(GridResult(point, "ok", value, "", summary))
        key = sign * value
        # strict improvement only: earlier (lexicographically smaller) ties win
        if best is None or key > best[0]:
            best = (key, point, cfg)
    best_config = best[2] if best is not None else None
    return best_config, results
