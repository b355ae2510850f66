"""Market primitives: linear demand model, pricing instance, price/demand algebra.

Everything here is immutable after construction and validated eagerly, so the
solvers and policies downstream can divide by curvature-related quantities
without re-checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EIG_TOL = 1e-10


class ModelValidationError(ValueError):
    """Raised when a demand model or instance violates its invariants."""


def _as_vector(x, n: int | None = None, name: str = "vector") -> np.ndarray:
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.ndim != 1:
        raise ModelValidationError(f"{name} must be one-dimensional, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ModelValidationError(f"{name} must have length {n}, got {v.shape[0]}")
    return v


def _as_matrix(x, shape: tuple[int, int] | None = None, name: str = "matrix") -> np.ndarray:
    m = np.atleast_2d(np.asarray(x, dtype=float))
    if shape is not None and m.shape != shape:
        raise ModelValidationError(f"{name} must have shape {shape}, got {m.shape}")
    return m


@dataclass(frozen=True, eq=False)
class PriceBox:
    """Componentwise price bounds [lower, upper]^dim with 0 <= lower < upper."""

    lower: float
    upper: float
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ModelValidationError("price box needs dim >= 1")
        if self.lower < 0:
            raise ModelValidationError("negative lower price bound")
        if not self.lower < self.upper:
            raise ModelValidationError("price box needs lower < upper")

    def contains(self, p: np.ndarray, tol: float = 1e-9) -> bool:
        p = _as_vector(p, self.dim, "price")
        return bool(np.all(p >= self.lower - tol) and np.all(p <= self.upper + tol))

    def clip(self, p: np.ndarray) -> np.ndarray:
        return np.clip(_as_vector(p, self.dim, "price"), self.lower, self.upper)

    def uniform(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=self.dim)


@dataclass(frozen=True, eq=False)
class LinearDemandModel:
    """Mean demand f(p) = alpha + B p with strictly negative-definite B.

    Construction checks both structural requirements: the symmetrized slope
    (B + B^T) must have strictly negative largest eigenvalue, and mean demand
    must stay nonnegative everywhere on the given price box.
    """

    alpha: np.ndarray
    B: np.ndarray
    box: PriceBox

    def __post_init__(self):
        alpha = _as_vector(self.alpha, name="alpha")
        n = alpha.shape[0]
        B = _as_matrix(self.B, (n, n), "B")
        if self.box.dim != n:
            raise ModelValidationError(f"box dim {self.box.dim} != model dim {n}")
        if np.any(alpha < 0):
            raise ModelValidationError("alpha must be nonnegative")
        sym = (B + B.T) / 2.0
        lam_max = float(np.linalg.eigvalsh(sym)[-1])
        if lam_max > -EIG_TOL:
            raise ModelValidationError(
                f"B is not negative definite: lambda_max(B + B^T) = {2 * lam_max:.3e}"
            )
        # Worst-case mean demand over the box: each term picks its worse corner.
        worst = alpha + np.minimum(B * self.box.lower, B * self.box.upper).sum(axis=1)
        if np.any(worst < -1e-9):
            j = int(np.argmin(worst))
            raise ModelValidationError(
                f"mean demand of product {j} goes negative on the box (min {worst[j]:.3e})"
            )
        alpha.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    def curvature(self) -> float:
        """Second-order growth constant kappa = -lambda_max(B^-1 + B^-T)/2 > 0."""
        Binv = np.linalg.inv(self.B)
        return -0.5 * float(np.linalg.eigvalsh((Binv + Binv.T))[-1])


@dataclass(frozen=True, eq=False)
class PricingInstance:
    """One market: demand model, consumption matrix, capacity, horizon, noise."""

    model: LinearDemandModel
    A: np.ndarray
    c0: np.ndarray
    T: int
    sigma: float

    def __post_init__(self):
        n = self.model.n
        A = np.asarray(self.A, dtype=float).reshape(-1, n)
        c0 = _as_vector(self.c0, A.shape[0], "c0")
        if np.any(A < 0):
            raise ModelValidationError("consumption matrix A must be nonnegative")
        if np.any(c0 < 0):
            raise ModelValidationError("initial capacity c0 must be nonnegative")
        if self.T < 1:
            raise ModelValidationError("horizon T must be >= 1")
        if self.sigma < 0:
            raise ModelValidationError("noise level sigma must be >= 0")
        A.setflags(write=False)
        c0.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c0", c0)
        object.__setattr__(self, "T", int(self.T))
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def box(self) -> PriceBox:
        return self.model.box

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def m(self) -> int:
        return self.A.shape[0]


def demand_mean(model: LinearDemandModel, p: np.ndarray) -> np.ndarray:
    """Mean demand alpha + B p at an in-box price vector."""
    p = _as_vector(p, model.n, "price")
    return model.alpha + model.B @ p


def inverse_demand(model: LinearDemandModel, d: np.ndarray) -> np.ndarray:
    """Candidate price B^-1 (d - alpha); not clipped to the box."""
    d = _as_vector(d, model.n, "demand")
    return np.linalg.solve(model.B, d - model.alpha)


def clip_to_box(p: np.ndarray, box: PriceBox) -> np.ndarray:
    return box.clip(p)


def revenue_of_demand(model: LinearDemandModel, d: np.ndarray) -> float:
    """Noiseless revenue r(d) = d^T B^-1 (d - alpha)."""
    d = _as_vector(d, model.n, "demand")
    return float(d @ np.linalg.solve(model.B, d - model.alpha))


def revenue_gradient(model: LinearDemandModel, d: np.ndarray) -> np.ndarray:
    """Gradient of r(d): (B^-1 + B^-T) d - B^-1 alpha."""
    d = _as_vector(d, model.n, "demand")
    Binv = np.linalg.inv(model.B)
    return (Binv + Binv.T) @ d - Binv @ model.alpha


def unconstrained_opt_demand(model: LinearDemandModel, tol: float = 1e-12) -> np.ndarray:
    """Maximizer d* of r(d) over d >= 0.

    Solves the stationarity system (B^-1 + B^-T) d = B^-1 alpha and, when the
    nonnegativity bound binds, re-solves with an active-set pass on d >= 0.
    The problem is strictly concave, so the solution is unique.
    """
    Binv = np.linalg.inv(model.B)
    H = Binv + Binv.T
    rhs = Binv @ model.alpha
    d = np.linalg.solve(H, rhs)
    if np.all(d >= -tol):
        return np.maximum(d, 0.0)
    # Bound-constrained concave QP: reuse the shared kernel.
    from .kernels import QPStatus, solve_box_qp

    n = model.n
    res = solve_box_qp(
        -H,
        -rhs,
        np.zeros((0, n)),
        np.zeros(0),
        np.zeros(n),
        np.full(n, np.inf),
    )
    if res.status == QPStatus.INFEASIBLE:  # pragma: no cover - d >= 0 is never infeasible
        raise RuntimeError("nonnegativity-constrained demand optimum reported infeasible")
    return np.maximum(res.x, 0.0)
