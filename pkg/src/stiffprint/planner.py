"""Whole-horizon width planner.

At stage ``n`` the planner chooses all remaining widths ``u_n..u_N`` by
minimising

    w1 * sum(u)                                         (material)
  + w2 * [sum of squared successive changes + (u_N - u_min)^2]   (smoothness)
  + w3 * alpha^2 sigma_p^2 sum c_{N,k}^2 / (u_k + gamma)^4        (final variance)

subject to ``upper >= u_n >= ... >= u_N >= u_min`` and a predicted final
compliance no larger than the target. ``upper`` is ``min(u_max, u_{n-1})``
so the part never overhangs the last printed layer.

The problem is convex and is solved with a primal log-barrier method. The
Newton system is tridiagonal plus a rank-one term from the compliance
barrier, so each step costs O(horizon).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_banded

from .beam import ModelParams, coeff_vector


class PlanningError(RuntimeError):
    pass


class InfeasibleProblemError(PlanningError):
    def __init__(self, message: str, report: "FeasibilityReport | None" = None):
        super().__init__(message)
        self.report = report


class MaxIterationsError(PlanningError):
    def __init__(self, message: str, best: "Plan | None" = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class PlanWeights:
    material: float = 1.0
    smooth: float = 1.0
    variance: float = 1.0

    def __post_init__(self):
        if not self.material > 0:
            raise ValueError("material weight must be strictly positive")
        if self.smooth < 0 or self.variance < 0:
            raise ValueError("weights must be nonnegative")

    def scaled(self, s1: float, s2: float, s3: float) -> "PlanWeights":
        return PlanWeights(self.material * s1, self.smooth * s2, self.variance * s3)


@dataclass(frozen=True)
class SolverOptions:
    t0: float = 1.0
    mu: float = 10.0
    gap_tol: float = 1e-8
    newton_tol: float = 1e-10
    armijo: float = 0.01
    shrink: float = 0.5
    max_newton: int = 200
    max_total_newton: int = 5000

    @classmethod
    def from_dict(cls, data: dict) -> "SolverOptions":
        return cls(**data)


@dataclass(frozen=True)
class PlanProblem:
    stage: int
    horizon_end: int
    prefix_mean: np.ndarray
    params: ModelParams
    u_min: float
    u_max: float
    target_compliance: float
    weights: PlanWeights = PlanWeights()
    prev_width: float | None = None

    def __post_init__(self):
        prefix = np.asarray(self.prefix_mean, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "prefix_mean", prefix)
        if not 1 <= self.stage <= self.horizon_end:
            raise ValueError(f"stage {self.stage} outside [1, {self.horizon_end}]")
        if prefix.size != self.stage - 1:
            raise ValueError(f"prefix has {prefix.size} entries, expected {self.stage - 1}")
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be below u_max")
        if not self.target_compliance > 0:
            raise ValueError("target compliance must be positive")
        if not self.u_min + self.params.gamma > 0:
            raise ValueError("u_min + gamma must be positive")

    @property
    def horizon(self) -> int:
        return self.horizon_end - self.stage + 1

    @property
    def upper(self) -> float:
        if self.prev_width is None:
            return self.u_max
        return min(self.u_max, self.prev_width)

    @property
    def coeffs(self) -> np.ndarray:
        return coeff_vector(self.horizon_end)[self.stage - 1:]

    @property
    def prefix_compliance(self) -> float:
        c = coeff_vector(self.horizon_end)[: self.stage - 1]
        return float(self.params.alpha * np.dot(c, self.prefix_mean))

    def predicted_compliance(self, u) -> np.ndarray | float:
        """Predicted final compliance; ``u`` may carry leading batch axes."""
        u = np.asarray(u, dtype=np.float64)
        tail = self.params.alpha * np.sum(self.coeffs / (u + self.params.gamma), axis=-1)
        return self.prefix_compliance + tail


@dataclass
class Plan:
    widths: np.ndarray
    cost: float
    predicted_final_compliance: float
    stats: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    stiffest_compliance: float
    margin: float  # target minus stiffest compliance; negative when infeasible
    reason: str = ""


# -- cost -------------------------------------------------------------------


def _terms(problem: PlanProblem, u) -> tuple:
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != problem.horizon:
        raise ValueError(f"plan has {u.shape[-1]} widths, expected {problem.horizon}")
    p = problem.params
    shifted = u + p.gamma
    if np.any(shifted <= 0):
        raise ValueError("plan has u + gamma <= 0")
    l1 = np.sum(u, axis=-1)
    diffs = np.diff(u, axis=-1)
    l2 = np.sum(diffs**2, axis=-1) + (u[..., -1] - problem.u_min) ** 2
    if problem.prev_width is not None:
        l2 = l2 + (u[..., 0] - problem.prev_width) ** 2
    kappa = p.alpha**2 * p.sigma_p**2
    l3 = kappa * np.sum(problem.coeffs**2 / shifted**4, axis=-1)
    return l1, l2, l3


def cost_terms(problem: PlanProblem, u) -> tuple[float, float, float]:
    """Unweighted (material, smoothness, variance) terms."""
    return tuple(float(t) for t in _terms(problem, u))


def cost(problem: PlanProblem, u):
    """Weighted cost; vectorised over leading axes of ``u``."""
    l1, l2, l3 = _terms(problem, u)
    w = problem.weights
    value = w.material * l1 + w.smooth * l2 + w.variance * l3
    return float(value) if np.ndim(value) == 0 else value


def cost_gradient(problem: PlanProblem, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    w = problem.weights
    p = problem.params
    grad = np.full(u.size, w.material)
    # d/du of sum of squared differences, written as L^T L u style stencil.
    d2 = np.zeros(u.size)
    diffs = np.diff(u)
    d2[1:] += 2 * diffs
    d2[:-1] -= 2 * diffs
    d2[-1] += 2 * (u[-1] - problem.u_min)
    if problem.prev_width is not None:
        d2[0] += 2 * (u[0] - problem.prev_width)
    grad += w.smooth * d2
    kappa = p.alpha**2 * p.sigma_p**2
    grad += w.variance * (-4 * kappa * problem.coeffs**2 / (u + p.gamma) ** 5)
    return grad


def _cost_hessian_bands(problem: PlanProblem, u) -> tuple[np.ndarray, np.ndarray]:
    """Main diagonal and first off-diagonal of the cost Hessian."""
    m = u.size
    w = problem.weights
    p = problem.params
    diag = np.full(m, 4.0)
    if problem.prev_width is None:
        diag[0] -= 2.0
    if m == 1:
        diag[0] = 2.0 + (2.0 if problem.prev_width is not None else 0.0)
    diag *= w.smooth
    off = np.full(m - 1, -2.0 * w.smooth)
    kappa = p.alpha**2 * p.sigma_p**2
    diag = diag + w.variance * 20 * kappa * problem.coeffs**2 / (u + p.gamma) ** 6
    return diag, off


def cost_hessian(problem: PlanProblem, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    diag, off = _cost_hessian_bands(problem, u)
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


def normalized_weights(problem: PlanProblem, raw: PlanWeights = PlanWeights()) -> PlanWeights:
    """Rescale ``raw`` so each term equals its raw weight at the default start plan.

    A term that vanishes at the start (e.g. the variance term with
    sigma_p = 0) keeps its raw weight.
    """
    x0 = _interpolated_start(problem)
    l1, l2, l3 = cost_terms(problem, x0)
    scale = [1.0 / v if v > 0 else 1.0 for v in (l1, l2, l3)]
    return raw.scaled(*scale)


# -- feasibility ------------------------------------------------------------


def check_feasibility(problem: PlanProblem) -> FeasibilityReport:
    """Can any admissible plan meet the compliance target?

    The stiffest admissible plan holds every remaining layer at ``upper``.
    """
    upper = problem.upper
    if upper < problem.u_min:
        return FeasibilityReport(
            False, math.inf, -math.inf,
            f"previous width {problem.prev_width} is below u_min {problem.u_min}",
        )
    stiffest = float(problem.predicted_compliance(np.full(problem.horizon, upper)))
    margin = problem.target_compliance - stiffest
    if margin < 0:
        return FeasibilityReport(
            False, stiffest, margin,
            f"stiffest reachable compliance {stiffest:.6g} exceeds target "
            f"{problem.target_compliance:.6g}",
        )
    return FeasibilityReport(True, stiffest, margin)


# -- barrier method ---------------------------------------------------------


def _interpolated_start(problem: PlanProblem) -> np.ndarray:
    lo, hi = problem.u_min, problem.upper
    delta = 1e-3 * (problem.u_max - problem.u_min)
    delta = min(delta, 0.25 * (hi - lo))
    if problem.horizon == 1:
        return np.array([hi - delta])
    return np.linspace(hi - delta, lo + delta, problem.horizon)


def _slacks(problem: PlanProblem, x: np.ndarray) -> tuple[np.ndarray, float]:
    lin = np.empty(x.size + 1)
    lin[0] = problem.upper - x[0]
    lin[1:-1] = x[:-1] - x[1:]
    lin[-1] = x[-1] - problem.u_min
    comp = problem.target_compliance - float(problem.predicted_compliance(x))
    return lin, comp


def _strict(problem: PlanProblem, x: np.ndarray) -> bool:
    if np.any(x + problem.params.gamma <= 0):
        return False
    lin, comp = _slacks(problem, x)
    return bool(np.all(lin > 0) and comp > 0)


def feasible_start(problem: PlanProblem) -> np.ndarray:
    """A strictly feasible plan.

    Starts from a linear ramp; if the ramp misses the compliance target it
    is blended toward a nearly-constant plan at ``upper``.
    """
    x0 = _interpolated_start(problem)
    if _strict(problem, x0):
        return x0
    m = problem.horizon
    span = problem.upper - problem.u_min
    stiff = problem.upper - 1e-6 * span * np.arange(1, m + 1) / (m + 1)
    if not _strict(problem, stiff):
        raise InfeasibleProblemError(
            "no strictly feasible plan (target at or beyond the stiffest reachable compliance)",
            check_feasibility(problem),
        )
    c_stiff = float(problem.predicted_compliance(stiff))
    goal = problem.target_compliance - 0.1 * (problem.target_compliance - c_stiff)
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if problem.predicted_compliance((1 - mid) * x0 + mid * stiff) <= goal:
            hi = mid
        else:
            lo = mid
    return (1 - hi) * x0 + hi * stiff


def _barrier_parts(problem: PlanProblem, x: np.ndarray, t: float):
    """Value, gradient, banded Hessian and rank-one vector of ``t*cost + barrier``."""
    p = problem.params
    lin, comp = _slacks(problem, x)
    shifted = x + p.gamma
    c = problem.coeffs
    value = t * cost(problem, x) - np.sum(np.log(lin)) - math.log(comp)

    inv = 1.0 / lin
    grad = t * cost_gradient(problem, x)
    # d(-log lin_j)/dx: lin_0 = upper - x_0, lin_j = x_{j-1} - x_j, lin_m = x_{m-1} - u_min
    grad[0] += inv[0]
    grad[:-1] -= inv[1:-1]
    grad[1:] += inv[1:-1]
    grad[-1] -= inv[-1]

    fgrad = -p.alpha * c / shifted**2
    grad += fgrad / comp

    diag, off = _cost_hessian_bands(problem, x)
    diag = t * diag
    off = t * off
    inv2 = inv**2
    diag = diag + inv2[:-1] + inv2[1:]
    off = off - inv2[1:-1]
    diag = diag + (2 * p.alpha * c / shifted**3) / comp
    return value, grad, diag, off, fgrad / comp


def _newton_direction(grad, diag, off, v) -> np.ndarray:
    """Solve ``(T + v v^T) d = -grad`` with ``T`` tridiagonal (Sherman-Morrison)."""
    m = grad.size
    ab = np.zeros((3, m))
    ab[0, 1:] = off
    ab[1] = diag
    ab[2, :-1] = off
    rhs = np.column_stack([-grad, v])
    sol = solve_banded((1, 1), ab, rhs, check_finite=False)
    y, z = sol[:, 0], sol[:, 1]
    return y - z * (v @ y) / (1.0 + v @ z)


def _merit(problem: PlanProblem, x: np.ndarray, t: float) -> float:
    if not _strict(problem, x):
        return math.inf
    lin, comp = _slacks(problem, x)
    return t * cost(problem, x) - float(np.sum(np.log(lin))) - math.log(comp)


def _make_plan(problem: PlanProblem, x: np.ndarray, stats: dict) -> Plan:
    return Plan(
        widths=np.asarray(x, dtype=np.float64).copy(),
        cost=cost(problem, x),
        predicted_final_compliance=float(problem.predicted_compliance(x)),
        stats=stats,
    )


def solve(problem: PlanProblem, options: SolverOptions = SolverOptions(), x0=None) -> Plan:
    """Optimal remaining widths for ``problem``.

    Raises InfeasibleProblemError if no admissible plan meets the target and
    MaxIterationsError (carrying the best iterate) if Newton stalls.
    """
    report = check_feasibility(problem)
    if not report.feasible:
        raise InfeasibleProblemError(report.reason, report)
    m = problem.horizon
    span = problem.upper - problem.u_min
    tight = report.margin <= 1e-12 * problem.target_compliance
    if span <= 1e-12 * max(1.0, abs(problem.u_max)) or tight:
        # The only admissible plan (or the only one meeting the target) is constant at upper.
        x = np.full(m, problem.upper)
        return _make_plan(problem, x, {"outer": 0, "newton": 0, "gap": 0.0, "degenerate": True})

    if x0 is not None and _strict(problem, np.asarray(x0, dtype=np.float64)):
        x = np.asarray(x0, dtype=np.float64).copy()
    else:
        x = feasible_start(problem)

    n_ineq = m + 2
    t = options.t0
    total = 0
    outer = 0
    while True:
        outer += 1
        for _ in range(options.max_newton):
            value, grad, diag, off, v = _barrier_parts(problem, x, t)
            d = _newton_direction(grad, diag, off, v)
            decrement = -float(grad @ d)
            # Below ~eps*|value| the decrement is rounding noise, not progress.
            if decrement / 2 <= max(options.newton_tol, 1e-12 * (1.0 + abs(value))):
                break
            step = 1.0
            while True:
                trial = _merit(problem, x + step * d, t)
                if trial <= value - options.armijo * step * decrement:
                    break
                step *= options.shrink
                if step < 1e-16:
                    break
            if step < 1e-16 or step * np.abs(d).max() <= 1e-15 * np.abs(x).max():
                break
            x = x + step * d
            total += 1
            if total > options.max_total_newton:
                best = _make_plan(problem, x, {"outer": outer, "newton": total, "gap": n_ineq / t})
                raise MaxIterationsError("barrier method exceeded its Newton budget", best)
        else:
            best = _make_plan(problem, x, {"outer": outer, "newton": total, "gap": n_ineq / t})
            raise MaxIterationsError("centering step did not converge", best)
        if n_ineq / t < options.gap_tol:
            break
        t *= options.mu
    return _make_plan(problem, x, {"outer": outer, "newton": total, "gap": n_ineq / t})


# -- brute-force oracle -----------------------------------------------------

MAX_BRUTE_HORIZON = 5


@lru_cache(maxsize=16)
def _monotone_indices(grid_points: int, horizon: int) -> np.ndarray:
    combos = itertools.combinations_with_replacement(range(grid_points - 1, -1, -1), horizon)
    flat = np.fromiter(itertools.chain.from_iterable(combos), dtype=np.int16)
    return flat.reshape(-1, horizon)


def brute_force_solve(problem: PlanProblem, grid_points: int = 60) -> Plan:
    """Exhaustive search over nonincreasing plans on a uniform width grid."""
    if problem.horizon > MAX_BRUTE_HORIZON:
        raise ValueError(f"horizon {problem.horizon} too large for enumeration")
    if problem.upper < problem.u_min:
        raise InfeasibleProblemError("monotone constraint unsatisfiable", check_feasibility(problem))
    grid = np.linspace(problem.u_min, problem.upper, grid_points)
    plans = grid[_monotone_indices(grid_points, problem.horizon)]
    ok = problem.predicted_compliance(plans) <= problem.target_compliance
    if not np.any(ok):
        raise InfeasibleProblemError("no grid plan meets the target", check_feasibility(problem))
    plans = plans[ok]
    costs = cost(problem, plans)
    best = int(np.argmin(costs))
    return _make_plan(problem, plans[best], {"grid_points": grid_points, "candidates": int(ok.sum())})


def grid_resolution_bound(problem: PlanProblem, grid_points: int) -> float:
    """Upper bound on (best grid cost - true optimum).

    Rounding every width of the optimum up to the next grid node keeps the
    plan admissible, so the gap is at most the grid spacing times the sum
    over coordinates of a bound on |d cost / d u_k| over the box.
    """
    w = problem.weights
    p = problem.params
    lo = problem.u_min
    hi = max(problem.upper, problem.prev_width if problem.prev_width is not None else lo)
    spacing = (problem.upper - lo) / (grid_points - 1)
    kappa = p.alpha**2 * p.sigma_p**2
    per = w.material + w.smooth * 4 * (hi - lo) + w.variance * 4 * kappa * problem.coeffs**2 / (lo + p.gamma) ** 5
    return float(spacing * np.sum(per))


def with_weights(problem: PlanProblem, weights: PlanWeights) -> PlanProblem:
    return replace(problem, weights=weights)
