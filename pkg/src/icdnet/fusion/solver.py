"""Levenberg-Marquardt on the whitened sum of squares of a FactorGraphProblem."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .problem import FactorGraphProblem, retract_all


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    gradient_tol: float = 1e-8
    relative_cost_tol: float = 1e-10
    initial_lambda: float = 1e-4
    max_lambda: float = 1e12
    max_rejections: int = 12

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class SolveResult:
    states: dict
    cost: float
    initial_cost: float
    iterations: int
    converged: bool
    reason: str
    report: list = field(default_factory=list)


# whitened cost below which residuals are pure round-off
COST_FLOOR = 1e-16
REPORT_FIELDS = ["iteration", "cost", "lambda", "gradient_norm", "step_norm", "accepted"]


def _damped_solve(H, g, lam):
    d = np.diag(H).copy()
    d = np.maximum(d, 1e-12 * max(d.max(initial=0.0), 1.0))
    A = H + lam * np.diag(d)
    L = np.linalg.cholesky(A)
    y = np.linalg.solve(L, -g)
    return np.linalg.solve(L.T, y)


def solve(problem: FactorGraphProblem, cfg: SolverConfig | None = None) -> SolveResult:
    """Minimise sum ||r||^2 over the window states.

    Stops when the infinity-norm of J^T r drops below ``gradient_tol``, when an
    accepted step changes the cost by less than ``relative_cost_tol`` (relative),
    or after ``max_iterations``. Failed Cholesky factorisations and uphill steps
    both raise the damping. The best iterate is always returned.
    """
    cfg = cfg or SolverConfig()
    problem.validate()
    states = dict(problem.states)
    r, J = problem.linearize(states)
    cost = float(r @ r)
    init_cost = cost
    lam, nu = cfg.initial_lambda, 2.0
    report = []
    reason, converged = "max_iterations", False
    it = 0
    while it < cfg.max_iterations:
        g = J.T @ r
        gnorm = float(np.abs(g).max(initial=0.0))
        if gnorm < cfg.gradient_tol:
            reason, converged = "gradient", True
            break
        H = J.T @ J
        rejections = 0
        accepted = False
        best_pred = 0.0
        while rejections <= cfg.max_rejections:
            try:
                delta = _damped_solve(H, g, lam)
            except np.linalg.LinAlgError:
                lam *= nu
                nu *= 2.0
                rejections += 1
                continue
            trial = retract_all(states, delta)
            r_new, J_new = problem.linearize(trial)
            cost_new = float(r_new @ r_new)
            lin = r + J @ delta
            predicted = cost - float(lin @ lin)
            best_pred = max(best_pred, predicted)
            actual = cost - cost_new
            report.append({"iteration": it + 1, "cost": cost_new, "lambda": lam, "gradient_norm": gnorm,
                           "step_norm": float(np.linalg.norm(delta)), "accepted": int(actual > 0)})
            if actual > 0 and np.isfinite(cost_new):
                rho = actual / predicted if predicted > 0 else 1.0
                lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = 2.0
                states, r, J = trial, r_new, J_new
                rel = actual / max(cost, 1e-300)
                cost = cost_new
                accepted = True
                break
            lam *= nu
            nu *= 2.0
            rejections += 1
            if lam > cfg.max_lambda:
                break
        it += 1
        if not accepted:
            reason = "no_descent"
            # no step helps and none is predicted to: stationary within round-off
            converged = best_pred <= 1e3 * cfg.relative_cost_tol * cost or cost <= COST_FLOOR
            break
        if rel < cfg.relative_cost_tol:
            reason, converged = "relative_cost", True
            break
    return SolveResult(states, cost, init_cost, it, converged, reason, report)


def write_report(path, rows, extra_fields=()) -> None:
    fields = list(extra_fields) + REPORT_FIELDS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in fields])


def _fmt(x):
    if isinstance(x, (int, np.integer, str)):
        return x
    return repr(float(x))
