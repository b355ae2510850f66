"""Biased-but-correlated surrogate signal and control-variate machinery.

The surrogate couples to demand through the shared per-period noise draw, so
its correlation with demand is an exact construction knob: with mix
coefficients a = rho * noise_sd / sigma and c = noise_sd * sqrt(1 - rho^2),

    S_t(p) = bias + slope p + a * eps_t + c * nu_t

has Corr(d_j, S_j | p) = rho and Var(S_j | p) = noise_sd^2 componentwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LinearDemandModel, PriceBox


class DegenerateDesignError(RuntimeError):
    """Offline price design stayed rank-deficient after the retry budget."""


@dataclass(frozen=True, eq=False)
class SurrogateModel:
    bias: np.ndarray
    slope: np.ndarray
    rho: float
    noise_sd: float
    demand_sigma: float

    def __post_init__(self):
        bias = np.asarray(self.bias, dtype=float)
        slope = np.asarray(self.slope, dtype=float).reshape(bias.shape[0], bias.shape[0])
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.demand_sigma <= 0 and self.rho != 0.0:
            raise ValueError("nonzero rho needs demand sigma > 0 (shared-noise mix undefined)")
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "slope", slope)

    @property
    def n(self) -> int:
        return self.bias.shape[0]

    @property
    def mix(self) -> tuple[float, float]:
        """Coefficients (a, c) of the shared and independent noise channels."""
        a = self.rho * self.noise_sd / self.demand_sigma if self.demand_sigma > 0 else 0.0
        c = self.noise_sd * float(np.sqrt(1.0 - self.rho * self.rho))
        return a, c

    def mean(self, p: np.ndarray) -> np.ndarray:
        return self.bias + self.slope @ np.asarray(p, dtype=float)

    def signal_variance(self) -> float:
        a, c = self.mix
        return a * a * self.demand_sigma**2 + c * c


def surrogate_from_model(
    model: LinearDemandModel,
    rho: float,
    noise_sd: float,
    demand_sigma: float,
    distortion: float = 0.2,
) -> SurrogateModel:
    """Surrogate misspecified against the true model by a relative distortion.

    The default 20% distortion inflates the intercept and flattens the slope,
    so the surrogate systematically overestimates demand yet stays correlated.
    """
    return SurrogateModel(
        bias=(1.0 + distortion) * model.alpha,
        slope=(1.0 - distortion) * model.B,
        rho=rho,
        noise_sd=noise_sd,
        demand_sigma=demand_sigma,
    )


def sample_surrogate(
    sm: SurrogateModel, p: np.ndarray, eps: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """One surrogate observation; eps is the demand-noise draw of this period."""
    a, c = sm.mix
    nu = rng.standard_normal(sm.n)
    return sm.mean(p) + a * np.asarray(eps, dtype=float) + c * nu


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    prices: np.ndarray  # (N, n)
    signals: np.ndarray  # (N, n)
    center_intercept: np.ndarray
    center_slope: np.ndarray
    sigma_s_off: np.ndarray  # residual covariance, 1/(N-n-1) normalization

    @property
    def size(self) -> int:
        return self.prices.shape[0]

    def center(self, p: np.ndarray) -> np.ndarray:
        """Fitted surrogate mean m_bar(p)."""
        return self.center_intercept + self.center_slope @ np.asarray(p, dtype=float)


def build_offline_dataset(
    sm: SurrogateModel,
    N: int,
    box: PriceBox,
    rng: np.random.Generator,
    max_retries: int = 5,
) -> OfflineDataset:
    """Uniform in-box prices, independent offline noise, least-squares center."""
    n = sm.n
    if N < n + 1:
        raise ValueError(f"need at least n+1 = {n + 1} offline samples, got {N}")
    a, c = sm.mix
    for _ in range(max_retries):
        prices = rng.uniform(box.lower, box.upper, size=(N, n))
        X = np.column_stack([np.ones(N), prices])
        if np.linalg.matrix_rank(X) < n + 1:
            continue  # degenerate design: redraw
        eps_off = sm.demand_sigma * rng.standard_normal((N, n))
        nu_off = rng.standard_normal((N, n))
        signals = sm.bias + prices @ sm.slope.T + a * eps_off + c * nu_off
        theta, *_ = np.linalg.lstsq(X, signals, rcond=None)
        resid = signals - X @ theta
        if N > n + 1:
            sigma = resid.T @ resid / (N - n - 1)
        else:
            sigma = np.zeros((n, n))  # saturated fit interpolates exactly
        return OfflineDataset(
            prices=prices,
            signals=signals,
            center_intercept=theta[0].copy(),
            center_slope=theta[1:].T.copy(),
            sigma_s_off=sigma,
        )
    raise DegenerateDesignError(f"offline design rank-deficient after {max_retries} retries")


@dataclass(frozen=True, eq=False)
class ControlVariate:
    gamma_hat: np.ndarray
    lambda_reg: float


def default_ridge(sigma_s_off: np.ndarray) -> float:
    """Scale-free ridge: 1e-3 * trace(Sigma_S^off) / n."""
    n = sigma_s_off.shape[0]
    return 1e-3 * float(np.trace(sigma_s_off)) / n


def gamma_from_moments(
    sigma_ds: np.ndarray, sigma_s: np.ndarray, lam: float
) -> np.ndarray:
    """Gamma = Sigma_dS (Sigma_S + lambda I)^-1."""
    sigma_ds = np.atleast_2d(np.asarray(sigma_ds, dtype=float))
    sigma_s = np.atleast_2d(np.asarray(sigma_s, dtype=float))
    n = sigma_s.shape[0]
    return sigma_ds @ np.linalg.inv(sigma_s + lam * np.eye(n))


def estimate_gamma(
    demand_residuals: np.ndarray,
    centered_signals: np.ndarray,
    sigma_s_off: np.ndarray,
    lam: float,
) -> ControlVariate:
    """Control-variate coefficient from online residual cross-moments.

    demand_residuals: (t, n) demand minus the caller's current mean estimate;
    centered_signals: (t, n) surrogate minus the offline center at each price.
    """
    R = np.asarray(demand_residuals, dtype=float)
    S = np.asarray(centered_signals, dtype=float)
    if R.shape != S.shape or R.ndim != 2:
        raise ValueError("residuals and centered signals must share shape (t, n)")
    t = R.shape[0]
    if t < 2:
        raise ValueError("need at least 2 online pairs")
    sigma_ds = R.T @ S / t
    return ControlVariate(gamma_hat=gamma_from_moments(sigma_ds, sigma_s_off, lam), lambda_reg=lam)


def pseudo_observe(d, S, p, cv: ControlVariate, center) -> np.ndarray:
    """Variance-reduced pseudo-demand d - Gamma (S - m_bar(p))."""
    d = np.asarray(d, dtype=float)
    return d - cv.gamma_hat @ (np.asarray(S, dtype=float) - center(p))


def schur_variance(sigma_d, sigma_ds, sigma_s) -> np.ndarray:
    """Residual demand covariance Sigma_d - Sigma_dS Sigma_S^-1 Sigma_Sd."""
    sigma_d = np.atleast_2d(np.asarray(sigma_d, dtype=float))
    sigma_ds = np.atleast_2d(np.asarray(sigma_ds, dtype=float))
    sigma_s = np.atleast_2d(np.asarray(sigma_s, dtype=float))
    if np.linalg.matrix_rank(sigma_s) < sigma_s.shape[0]:
        raise np.linalg.LinAlgError("surrogate covariance is singular")
    return sigma_d - sigma_ds @ np.linalg.solve(sigma_s, sigma_ds.T)


def effective_sd(sigma_d, sigma_ds, sigma_s) -> float:
    """sigma_eff = sqrt(lambda_max) of the Schur complement."""
    res = schur_variance(sigma_d, sigma_ds, sigma_s)
    return float(np.sqrt(max(np.linalg.eigvalsh(res)[-1], 0.0)))
