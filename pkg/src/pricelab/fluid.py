"""Per-period fluid program, boundary attraction rounding, horizon benchmark.

The fluid program maximizes p^T (alpha + B p) over the price box subject to
A (alpha + B p) <= rhs. Products that consume a depleted resource are removed
first (demand target 0, price at the upper bound) and the reduced strictly
concave QP is solved by the active-set kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import QPStatus, solve_box_qp
from .model import LinearDemandModel, PriceBox, PricingInstance

#: demand components below this (relative to the intercept scale) flag the
#: solution as sitting on a degenerate boundary
DEGENERACY_TOL = 1e-6


class FluidInfeasibleError(RuntimeError):
    """No price in the box satisfies the resource constraints."""


@dataclass(frozen=True, eq=False)
class FluidProblem:
    model: LinearDemandModel
    A: np.ndarray
    rhs: np.ndarray
    box: PriceBox
    depleted: frozenset[int] = frozenset()

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float).reshape(-1, self.model.n)
        rhs = np.asarray(self.rhs, dtype=float).reshape(A.shape[0])
        # Negative entries can only come from floating-point capacity drift.
        rhs = np.maximum(rhs, 0.0)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "rhs", rhs)
        object.__setattr__(
            self,
            "depleted",
            frozenset(self.depleted) | {int(i) for i in np.flatnonzero(rhs <= 0.0)},
        )


@dataclass(frozen=True, eq=False)
class FluidSolution:
    p: np.ndarray
    d: np.ndarray  # demand target; components of removed products forced to 0
    value: float
    status: str  # optimal | reduced | degenerate-boundary
    active: tuple[int, ...]  # binding resource constraints
    kkt_residual: float
    removed: tuple[int, ...] = ()


def per_period_problem(
    instance: PricingInstance, c: np.ndarray, t: int, T: int | None = None
) -> FluidProblem:
    """Fluid problem at period t with remaining capacity c (rhs = c/(T-t+1))."""
    T = instance.T if T is None else T
    c = np.asarray(c, dtype=float)
    return FluidProblem(
        model=instance.model,
        A=instance.A,
        rhs=c / (T - t + 1),
        box=instance.box,
        depleted=frozenset(int(i) for i in np.flatnonzero(c <= 0.0)),
    )


def solve_fluid(problem: FluidProblem, tol: float = 1e-8) -> FluidSolution:
    """KKT-certified maximizer of the per-period fluid program.

    Raises FluidInfeasibleError when no in-box price satisfies the resource
    constraints, so the policy layer can escalate to full rejection.
    """
    return solve_fluid_raw(
        problem.model.alpha,
        problem.model.B,
        problem.A,
        problem.rhs,
        problem.box,
        problem.depleted,
        tol=tol,
        alpha_scale=float(problem.model.alpha.max()),
    )


def solve_fluid_raw(
    alpha: np.ndarray,
    B: np.ndarray,
    A: np.ndarray,
    rhs: np.ndarray,
    box: PriceBox,
    depleted: frozenset[int] = frozenset(),
    tol: float = 1e-8,
    alpha_scale: float | None = None,
) -> FluidSolution:
    """solve_fluid on raw (alpha, B), for estimated models that skip validation.

    B must still be negative definite (policies repair estimates before
    calling); alpha may be any finite vector.
    """
    alpha = np.asarray(alpha, dtype=float)
    B = np.asarray(B, dtype=float)
    n = alpha.shape[0]
    A = np.asarray(A, dtype=float).reshape(-1, n)
    rhs = np.maximum(np.asarray(rhs, dtype=float).reshape(A.shape[0]), 0.0)
    depleted = frozenset(depleted) | {int(i) for i in np.flatnonzero(rhs <= 0.0)}
    L, U = box.lower, box.upper

    if alpha_scale is None:
        alpha_scale = float(np.abs(alpha).max()) if n else 1.0

    removed_mask = np.zeros(n, dtype=bool)
    for i in depleted:
        removed_mask |= A[i] > 0.0
    keep = np.flatnonzero(~removed_mask)
    removed = tuple(int(j) for j in np.flatnonzero(removed_mask))

    p_full = np.full(n, U)
    d_full = np.zeros(n)
    if keep.size == 0:
        return FluidSolution(p_full, d_full, 0.0, "reduced", (), 0.0, removed)

    alive = np.flatnonzero(rhs > 0.0)
    Bkk = B[np.ix_(keep, keep)]
    alpha_eff = alpha[keep]
    if removed:
        alpha_eff = alpha_eff + B[np.ix_(keep, np.flatnonzero(removed_mask))].sum(axis=1) * U

    H = -(Bkk + Bkk.T)
    g = -alpha_eff
    C = A[np.ix_(alive, keep)] @ Bkk
    b = rhs[alive] - A[np.ix_(alive, keep)] @ alpha_eff
    k = keep.size
    res = solve_box_qp(H, g, C, b, np.full(k, L), np.full(k, U), tol=tol)
    if res.status == QPStatus.INFEASIBLE:
        raise FluidInfeasibleError(f"no in-box price meets the resource constraints (rhs={rhs})")

    p_full[keep] = np.clip(res.x, L, U)
    d_full[keep] = alpha_eff + Bkk @ res.x
    value = float(p_full[keep] @ d_full[keep])

    consumption = A @ d_full
    act_tol = max(1e-6, 10 * tol) * max(1.0, float(np.abs(rhs).max()) if rhs.size else 1.0)
    active = tuple(
        int(i) for i in range(A.shape[0]) if rhs[i] > 0.0 and consumption[i] >= rhs[i] - act_tol
    )

    if removed:
        status = "reduced"
    elif res.status == QPStatus.FALLBACK or (
        keep.size and d_full[keep].min() <= DEGENERACY_TOL * max(1.0, alpha_scale)
    ):
        status = "degenerate-boundary"
    else:
        status = "optimal"
    return FluidSolution(p_full, d_full, value, status, active, res.kkt_residual, removed)


def attraction_threshold(kind: str, t: int, T: int, zeta: float) -> float:
    """Decaying demand-rounding threshold for each information regime."""
    if not 1 <= t <= T:
        raise ValueError(f"period {t} outside horizon 1..{T}")
    if zeta < 0:
        raise ValueError("zeta must be >= 0")
    remain = float(T - t + 1)
    if kind == "full_info":
        return zeta * remain ** -0.5
    if kind == "learning":
        return zeta * (remain ** -0.25 + float(t) ** -0.25)
    if kind == "informed":
        return zeta * (remain ** -0.5 + float(t) ** -0.5)
    raise ValueError(f"unknown attraction kind {kind!r}")


def boundary_attract(d: np.ndarray, threshold: float) -> np.ndarray:
    """Round demand components strictly below the threshold to zero."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    d = np.asarray(d, dtype=float)
    return np.where(d >= threshold, d, 0.0)


def fluid_value(instance: PricingInstance, tol: float = 1e-8) -> float:
    """Horizon benchmark V^Fluid = T * value of the fluid program at c0/T."""
    problem = FluidProblem(
        model=instance.model, A=instance.A, rhs=instance.c0 / instance.T, box=instance.box
    )
    return instance.T * solve_fluid(problem, tol=tol).value
