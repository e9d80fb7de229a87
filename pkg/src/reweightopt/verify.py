"""Self-contained verification suites behind the CLI oracle/gradcheck commands.

Each suite runs seeded randomized checks against the independent oracles
(strong duality, dense simplex grid, central finite differences) and
returns a report dict with the worst observed deviations, so callers can
print one line per check and fail on any tolerance breach.
"""

from __future__ import annotations

import numpy as np

from .dro import (
    Divergence,
    divergence_value,
    instance_from_json,
    kl_dro_dual,
    kl_dro_primal,
    optimal_weight_form_check,
    random_instance,
    simplex_bruteforce,
    chi2_dro_value,
    revkl_dro_value,
)
from .models import Batch, ModelKind, finite_diff_grad, per_sample_loss, random_state, weighted_grad
from .weighting import weighted_objective

__all__ = [
    "dro_suite",
    "gradcheck_suite",
    "check_instances",
    "DUALITY_TOL",
    "FORM_TOL",
    "GRID_TOL",
    "GRAD_TOL",
]

DUALITY_TOL = 1e-8
FORM_TOL = 1e-6
GRID_TOL = 2e-3
GRAD_TOL = 1e-5


def dro_suite(
    trials: int = 200,
    n_max: int = 10,
    rho_max: float = 0.5,
    seed: int = 0,
    grid_points: int = 2001,
    check_variants: bool = True,
) -> dict:
    """Duality, tilting-form, and brute-force agreement over random instances."""
    rng = np.random.default_rng(seed)
    # brute-force accuracy is grid-limited; 2e-3 is calibrated at 2001 points
    grid_tol = GRID_TOL * 2000.0 / (grid_points - 1)
    report = {
        "trials": trials,
        "max_duality_gap": 0.0,
        "max_form_dev": 0.0,
        "max_grid_err": 0.0,
        "max_variant_grid_err": 0.0,
        "max_variant_form_dev": 0.0,
        "grid_checked": 0,
        "grid_tol": grid_tol,
        "failures": [],
    }
    for trial in range(trials):
        inst = random_instance(rng, (2, n_max), 5.0, rho_max, Divergence.KL)
        primal = kl_dro_primal(inst)
        dual = kl_dro_dual(inst)
        gap = abs(primal.value - dual)
        report["max_duality_gap"] = max(report["max_duality_gap"], gap)
        if gap > DUALITY_TOL:
            report["failures"].append(f"trial {trial}: duality gap {gap:.3e}")

        form = optimal_weight_form_check(inst, primal, FORM_TOL)
        report["max_form_dev"] = max(report["max_form_dev"], form.max_rel_dev)
        if not form.passed:
            report["failures"].append(f"trial {trial}: kl form deviation {form.max_rel_dev:.3e}")

        if inst.n <= 3:
            report["grid_checked"] += 1
            brute = simplex_bruteforce(inst, grid_points)
            err = max(abs(primal.value - brute), abs(dual - brute))
            report["max_grid_err"] = max(report["max_grid_err"], err)
            if err > grid_tol:
                report["failures"].append(f"trial {trial}: grid disagreement {err:.3e}")
            if check_variants:
                for div, solver in (
                    (Divergence.CHI2, chi2_dro_value),
                    (Divergence.REVERSE_KL, revkl_dro_value),
                ):
                    vinst = type(inst)(inst.losses, inst.base, inst.rho, div)
                    sol = solver(vinst)
                    verr = abs(sol.value - simplex_bruteforce(vinst, grid_points))
                    report["max_variant_grid_err"] = max(report["max_variant_grid_err"], verr)
                    if verr > grid_tol:
                        report["failures"].append(
                            f"trial {trial}: {div.value} grid disagreement {verr:.3e}"
                        )
                    vform = optimal_weight_form_check(vinst, sol, FORM_TOL)
                    report["max_variant_form_dev"] = max(
                        report["max_variant_form_dev"], vform.max_rel_dev
                    )
                    if not vform.passed:
                        report["failures"].append(
                            f"trial {trial}: {div.value} form deviation {vform.max_rel_dev:.3e}"
                        )
    report["passed"] = not report["failures"]
    return report


def check_instances(records: list[dict]) -> dict:
    """Solve user-supplied JSON instance records and verify the solutions.

    For each record: run the divergence-matched solver, confirm the
    constraint is met and the distribution matches its tilting form; kl
    instances additionally get the strong-duality cross-check.
    """
    report = {"checked": 0, "results": [], "failures": []}
    solvers = {
        Divergence.KL: kl_dro_primal,
        Divergence.CHI2: chi2_dro_value,
        Divergence.REVERSE_KL: revkl_dro_value,
    }
    for i, record in enumerate(records):
        inst = instance_from_json(record)
        sol = solvers[inst.divergence](inst)
        entry = {"index": i, "divergence": inst.divergence.value, "value": sol.value}
        dv = divergence_value(sol.worst_dist.probs, inst.base.probs, inst.divergence)
        if dv > inst.rho + 1e-9:
            report["failures"].append(f"instance {i}: constraint violated ({dv:.3e} > rho)")
        form = optimal_weight_form_check(inst, sol, FORM_TOL)
        if not form.passed:
            report["failures"].append(
                f"instance {i}: form deviation {form.max_rel_dev:.3e}"
            )
        if inst.divergence is Divergence.KL:
            gap = abs(sol.value - kl_dro_dual(inst))
            entry["duality_gap"] = gap
            if gap > DUALITY_TOL:
                report["failures"].append(f"instance {i}: duality gap {gap:.3e}")
        report["results"].append(entry)
        report["checked"] += 1
    report["passed"] = not report["failures"]
    return report


def _random_model_and_batch(kind: ModelKind, rng: np.random.Generator):
    d = int(rng.integers(2, 6))
    b = int(rng.integers(2, 6))
    x = rng.standard_normal((b, d))
    if kind is ModelKind.LINEAR:
        model = random_state(kind, d, seed=int(rng.integers(1 << 31)), scale=0.5)
        y = rng.standard_normal(b)
    else:
        c = int(rng.integers(2, 5))
        hidden = (int(rng.integers(3, 9)),) if kind is ModelKind.MLP else ()
        model = random_state(kind, d, c, hidden, seed=int(rng.integers(1 << 31)), scale=0.5)
        y = rng.integers(0, c, size=b)
    return model, Batch(x, y)


def gradcheck_suite(trials: int = 50, seed: int = 0, h: float = 1e-5) -> dict:
    """Analytic weighted gradients vs central differences, per model kind."""
    rng = np.random.default_rng(seed)
    report = {"trials": trials, "max_rel_err": {}, "failures": []}
    for kind in ModelKind:
        worst = 0.0
        for trial in range(trials):
            model, batch = _random_model_and_batch(kind, rng)
            weights = rng.uniform(0.5, 2.0, size=batch.size)
            analytic = weighted_grad(model, batch, weights)

            def objective(theta):
                losses = per_sample_loss(model.with_theta(theta), batch)
                return weighted_objective(losses, weights)

            numeric = finite_diff_grad(objective, model.theta, h)
            denom = max(float(np.linalg.norm(numeric)), 1e-10)
            rel = float(np.linalg.norm(analytic - numeric)) / denom
            worst = max(worst, rel)
            if rel > GRAD_TOL:
                report["failures"].append(f"{kind.value} trial {trial}: rel err {rel:.3e}")
        report["max_rel_err"][kind.value] = worst
    report["passed"] = not report["failures"]
    return report
