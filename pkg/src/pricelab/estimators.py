"""Online parameter estimation: OLS moments, anchored regression, diagnostics.

Moments are maintained incrementally (O(n^2) per observation); raw history is
optionally retained for diagnostics. Pseudo-inverses use a symmetric
eigendecomposition with a relative cutoff so estimates stay finite while the
design is still rank-deficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PINV_CUTOFF = 1e-10


class NonConvergedError(RuntimeError):
    """Penalty loop for the constrained anchored regression exhausted."""


@dataclass(frozen=True, eq=False)
class ParamEstimate:
    alpha_hat: np.ndarray
    B_hat: np.ndarray

    def predict(self, p: np.ndarray) -> np.ndarray:
        return self.alpha_hat + self.B_hat @ np.asarray(p, dtype=float)


def pinv_psd(M: np.ndarray, cutoff: float = PINV_CUTOFF) -> tuple[np.ndarray, int]:
    """Pseudo-inverse of a symmetric PSD matrix; returns (pinv, numerical rank)."""
    w, V = np.linalg.eigh((M + M.T) / 2.0)
    lam_max = float(w[-1]) if w.size else 0.0
    if lam_max <= 0.0:
        return np.zeros_like(M), 0
    keep = w > cutoff * lam_max
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (V * inv) @ V.T, int(keep.sum())


@dataclass(eq=False)
class DesignState:
    """Running OLS moments over (price, demand) pairs for all products."""

    n: int
    t: int = 0
    sum_p: np.ndarray = None
    sum_ppT: np.ndarray = None
    sum_d: np.ndarray = None
    sum_pdT: np.ndarray = None  # sum of p d^T outer products
    keep_history: bool = False
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.sum_p is None:
            self.sum_p = np.zeros(self.n)
            self.sum_ppT = np.zeros((self.n, self.n))
            self.sum_d = np.zeros(self.n)
            self.sum_pdT = np.zeros((self.n, self.n))

    @classmethod
    def from_batch(cls, prices: np.ndarray, demands: np.ndarray) -> "DesignState":
        """Moments of a whole (t, n) batch in one shot."""
        P = np.asarray(prices, dtype=float)
        D = np.asarray(demands, dtype=float)
        state = cls(n=P.shape[1], t=P.shape[0])
        state.sum_p = P.sum(axis=0)
        state.sum_ppT = P.T @ P
        state.sum_d = D.sum(axis=0)
        state.sum_pdT = P.T @ D
        return state

    def design_matrix(self) -> np.ndarray:
        """The (n+1) x (n+1) moment matrix P^t."""
        P = np.empty((self.n + 1, self.n + 1))
        P[0, 0] = self.t
        P[0, 1:] = self.sum_p
        P[1:, 0] = self.sum_p
        P[1:, 1:] = self.sum_ppT
        return P

    def moment_vectors(self) -> np.ndarray:
        """D as an (n+1) x n array; column j is the moment vector of product j."""
        D = np.empty((self.n + 1, self.n))
        D[0] = self.sum_d
        D[1:] = self.sum_pdT
        return D


def ols_update(state: DesignState, p: np.ndarray, d: np.ndarray) -> DesignState:
    """Fold one (price, demand) observation into the moments (in place)."""
    p = np.asarray(p, dtype=float)
    d = np.asarray(d, dtype=float)
    if p.shape != (state.n,) or d.shape != (state.n,):
        raise ValueError(f"expected length-{state.n} price and demand vectors")
    state.t += 1
    state.sum_p += p
    state.sum_ppT += np.outer(p, p)
    state.sum_d += d
    state.sum_pdT += np.outer(p, d)
    if state.keep_history:
        state.history.append((p.copy(), d.copy()))
    return state


def ols_estimate(state: DesignState) -> ParamEstimate:
    """Per-product least squares [alpha_j; beta_j] = pinv(P) D_j."""
    if state.t < 1:
        raise ValueError("need at least one observation")
    Pinv, _ = pinv_psd(state.design_matrix())
    theta = Pinv @ state.moment_vectors()
    return ParamEstimate(alpha_hat=theta[0].copy(), B_hat=theta[1:].T.copy())


@dataclass(eq=False)
class AnchoredState:
    """Displacement moments around a certified anchor (p0, d0, eps0)."""

    anchor_p: np.ndarray
    anchor_d: np.ndarray
    eps0: float
    t: int = 0
    V: np.ndarray = None  # sum (p - p0)(p - p0)^T
    C: np.ndarray = None  # sum (d - d0)(p - p0)^T

    def __post_init__(self):
        self.anchor_p = np.asarray(self.anchor_p, dtype=float)
        self.anchor_d = np.asarray(self.anchor_d, dtype=float)
        if self.eps0 < 0:
            raise ValueError("eps0 must be >= 0")
        n = self.anchor_p.shape[0]
        if self.V is None:
            self.V = np.zeros((n, n))
            self.C = np.zeros((n, n))

    @property
    def n(self) -> int:
        return self.anchor_p.shape[0]

    def update(self, p: np.ndarray, d: np.ndarray) -> "AnchoredState":
        x = np.asarray(p, dtype=float) - self.anchor_p
        self.t += 1
        self.V += np.outer(x, x)
        self.C += np.outer(np.asarray(d, dtype=float) - self.anchor_d, x)
        return self


def anchored_estimate(state: AnchoredState) -> ParamEstimate:
    """Slope from displacements around the anchor; intercept pinned to it.

    Predicted demand is d0 + B_hat (p - p0), i.e. alpha_hat = d0 - B_hat p0,
    so the fit always reproduces d0 at the anchor price exactly.
    """
    if state.t < 1:
        raise ValueError("need at least one observation")
    Vinv, _ = pinv_psd(state.V)
    B_hat = state.C @ Vinv
    return ParamEstimate(alpha_hat=state.anchor_d - B_hat @ state.anchor_p, B_hat=B_hat)


def anchored_rank(state: AnchoredState) -> int:
    """Numerical rank of the displacement design V (pinv cutoff convention)."""
    _, rank = pinv_psd(state.V)
    return rank


def constrained_anchored_estimate(
    state: DesignState,
    anchor: tuple[np.ndarray, np.ndarray, float],
    penalty_weight: float = 1.0,
    slack_tol: float = 1e-6,
    max_doublings: int = 30,
) -> ParamEstimate:
    """OLS subject to ||d0 - (alpha + B p0)||^2 <= eps0^2, by exterior penalty.

    The penalized subproblem is weighted least squares with the anchor as one
    extra row of weight mu, so each iterate is a single linear solve; mu
    doubles until the ball constraint holds within slack_tol.
    """
    p0, d0, eps0 = anchor
    p0 = np.asarray(p0, dtype=float)
    d0 = np.asarray(d0, dtype=float)
    if eps0 < 0:
        raise ValueError("eps0 must be >= 0")
    x0 = np.concatenate([[1.0], p0])
    P = state.design_matrix()
    D = state.moment_vectors()

    def solve_with(mu: float) -> ParamEstimate:
        Pmu = P + mu * np.outer(x0, x0)
        Dmu = D + mu * np.outer(x0, d0)
        Pinv, _ = pinv_psd(Pmu)
        theta = Pinv @ Dmu
        return ParamEstimate(alpha_hat=theta[0].copy(), B_hat=theta[1:].T.copy())

    def gap(est: ParamEstimate) -> float:
        r = d0 - est.predict(p0)
        return float(r @ r) - eps0 * eps0

    est = ols_estimate(state)
    if gap(est) <= slack_tol:
        return est
    mu = float(penalty_weight)
    for _ in range(max_doublings + 1):
        est = solve_with(mu)
        if gap(est) <= slack_tol:
            return est
        mu *= 2.0
    raise NonConvergedError(
        f"anchor ball constraint violated by {gap(est):.3e} after {max_doublings} doublings"
    )


def fisher_min_eig_bound(
    prices: np.ndarray, anchors: np.ndarray, n: int, upper: float
) -> float:
    """Certified lower bound on lambda_min(P^t) from accumulated price variance.

    prices: (t, n) implemented prices in order; anchors: (ceil(t/n), n) epoch
    anchor vectors X^k. Only full epochs contribute. Diagnostic only; the bound
    presumes the within-epoch displacements form an orthogonal basis.
    """
    prices = np.asarray(prices, dtype=float).reshape(-1, n)
    anchors = np.asarray(anchors, dtype=float).reshape(-1, n)
    t = prices.shape[0]
    if t == 0:
        raise ValueError("need a nonempty price history")
    full = n * (t // n)
    total = 0.0
    running = np.zeros(n)
    for s in range(1, full + 1):
        pbar_prev = running / (s - 1) if s > 1 else np.zeros(n)
        k = (s + n - 1) // n  # 1-based epoch index
        disp = prices[s - 1] - pbar_prev - anchors[k - 1]
        total += (1.0 - 1.0 / s) * float(disp @ disp)
        running += prices[s - 1]
    return total / (n * (1.0 + 2.0 * upper * upper))


def accumulated_variance_lower(k: int, n: int, sigma0: float) -> float:
    """Certified lower bound sigma0^2 sqrt(kn) / (8n) on the epoch-k variance J^k."""
    if k < 1:
        raise ValueError("epoch index k must be >= 1")
    return sigma0 * sigma0 * np.sqrt(k * n) / (8.0 * n)
