"""Per-period decision rules: boundary-attracted re-solve, periodic-review
learning, certified-anchor estimate-then-select, and surrogate-assisted
variants of the latter two, all behind a single decide/observe interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimators import AnchoredState, DesignState, ParamEstimate, ols_estimate, ols_update, pinv_psd
from .fluid import (
    FluidInfeasibleError,
    attraction_threshold,
    boundary_attract,
    per_period_problem,
    solve_fluid,
    solve_fluid_raw,
)
from .model import PricingInstance, demand_mean, inverse_demand
from .surrogate import ControlVariate, OfflineDataset, SurrogateModel, default_ridge, gamma_from_moments

KINDS = ("full_info", "learning", "informed", "surrogate", "surrogate_informed")

#: estimated slopes whose symmetrized eigenvalues exceed this are clamped down
REPAIR_EIG = -1e-6


@dataclass(frozen=True, eq=False)
class PolicyConfig:
    kind: str
    zeta: float = 1.0
    sigma0: float = 1.0
    tau: float = 1.0
    anchor: tuple | None = None  # (p0, d0, eps0)
    surrogate_model: SurrogateModel | None = None
    offline: OfflineDataset | None = None
    lambda_reg: float | None = None
    gaussian_perturb: bool = False
    force_gamma_zero: bool = False
    keep_history: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.zeta < 0 or self.sigma0 < 0:
            raise ValueError("zeta and sigma0 must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.kind in ("informed", "surrogate_informed") and self.anchor is None:
            raise ValueError(f"{self.kind} policy requires an anchor (p0, d0, eps0)")
        if self.kind in ("surrogate", "surrogate_informed") and (
            self.surrogate_model is None or self.offline is None
        ):
            raise ValueError(f"{self.kind} policy requires surrogate wiring")

    @property
    def needs_surrogate(self) -> bool:
        return self.kind in ("surrogate", "surrogate_informed")


@dataclass(frozen=True, eq=False)
class PolicyDecision:
    price: np.ndarray
    predicted_demand: np.ndarray
    rejection_set: frozenset[int]
    diagnostics: dict


def informed_select(eps0: float, T: int, tau: float) -> str:
    """Estimate-then-select branch: fall back iff (eps0)^2 T > tau sqrt(T)."""
    return "fallback" if eps0 * eps0 * T > tau * np.sqrt(T) else "anchor"


def repair_slope(B_hat: np.ndarray) -> np.ndarray:
    """Clamp the symmetrized estimate's eigenvalues to <= REPAIR_EIG.

    Keeps the estimated fluid program strictly concave when early-epoch
    estimates violate negative definiteness; returns the input untouched when
    it already qualifies.
    """
    sym = (B_hat + B_hat.T) / 2.0
    w, V = np.linalg.eigh(sym)
    if w[-1] <= REPAIR_EIG:
        return B_hat
    return (V * np.minimum(w, REPAIR_EIG)) @ V.T


class BasePolicy:
    """decide(t, c) -> PolicyDecision; observe(t, price, demand[, signal])."""

    needs_surrogate = False

    def __init__(self, instance: PricingInstance, config: PolicyConfig):
        self.instance = instance
        self.config = config
        self.n = instance.n
        self.T = instance.T
        self.mean_price = np.zeros(self.n)
        self._t_observed = 0

    def _track_mean(self, price: np.ndarray):
        self._t_observed += 1
        self.mean_price = self.mean_price + (price - self.mean_price) / self._t_observed

    def mean_estimate(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Current (alpha, B) demand-mean proxy, if any."""
        return None

    def decide(self, t: int, c: np.ndarray) -> PolicyDecision:  # pragma: no cover
        raise NotImplementedError

    def observe(self, t: int, price: np.ndarray, demand: np.ndarray, signal=None):
        self._track_mean(price)


class FullInfoPolicy(BasePolicy):
    """Boundary-attracted re-solve with the true demand model (Algorithm 1 style)."""

    def __init__(self, instance, config):
        super().__init__(instance, config)
        self.model = instance.model

    def decide(self, t, c):
        box = self.instance.box
        thr = attraction_threshold("full_info", t, self.T, self.config.zeta)
        try:
            sol = solve_fluid(per_period_problem(self.instance, c, t))
        except FluidInfeasibleError:
            return PolicyDecision(
                price=np.full(self.n, box.upper),
                predicted_demand=np.zeros(self.n),
                rejection_set=frozenset(range(self.n)),
                diagnostics={"threshold": thr, "branch": "infeasible"},
            )
        d_round = boundary_attract(sol.d, thr)
        if np.array_equal(d_round, sol.d):
            price = sol.p
            branch = "resolve"
        else:
            price = box.clip(inverse_demand(self.model, d_round))
            branch = "attracted"
        return PolicyDecision(
            price=price,
            predicted_demand=demand_mean(self.model, price),
            rejection_set=frozenset(sol.removed),
            diagnostics={"threshold": thr, "branch": branch},
        )

    def mean_estimate(self):
        return self.model.alpha, self.model.B


class LearningPolicy(BasePolicy):
    """Periodic-review re-solve with OLS learning and structured perturbations
    (Algorithm 2 style): n uniform warmup periods, re-estimation every n
    periods, momentum toward the re-solve price, decaying basis perturbations.
    """

    def __init__(self, instance, config, rng: np.random.Generator):
        super().__init__(instance, config)
        self.rng = rng
        self.design = DesignState(self.n, keep_history=config.keep_history)
        self.estimate: ParamEstimate | None = None
        self.ptilde: np.ndarray | None = None
        self.mean_price_epoch = np.zeros(self.n)

    def _reestimate(self, t, c):
        est = ols_estimate(self.design)
        B_r = repair_slope(est.B_hat)
        self.estimate = ParamEstimate(alpha_hat=est.alpha_hat, B_hat=B_r)
        try:
            sol = solve_fluid_raw(
                self.estimate.alpha_hat,
                self.estimate.B_hat,
                self.instance.A,
                np.asarray(c, dtype=float) / (self.T - t + 1),
                self.instance.box,
            )
            self.ptilde = sol.p
        except FluidInfeasibleError:
            pass  # reuse the previous epoch's re-solve price
        if self.ptilde is None:
            self.ptilde = self.mean_price.copy()
        self.mean_price_epoch = self.mean_price.copy()

    def decide(self, t, c):
        box = self.instance.box
        if t <= self.n:
            return PolicyDecision(
                price=box.uniform(self.rng),
                predicted_demand=np.zeros(self.n),
                rejection_set=frozenset(),
                diagnostics={"threshold": 0.0, "branch": "warmup"},
            )
        k = (t - 1) // self.n
        if (t - 1) % self.n == 0:
            self._reestimate(t, c)
        if self.config.gaussian_perturb:
            direction = self.rng.standard_normal(self.n)
        else:
            direction = np.zeros(self.n)
            direction[t - k * self.n - 1] = 1.0
        raw = (
            self.mean_price
            + (self.ptilde - self.mean_price_epoch)
            + self.config.sigma0 * t**-0.25 * direction
        )
        price = box.clip(raw)
        predicted = self.estimate.predict(price)
        thr = attraction_threshold("learning", t, self.T, self.config.zeta)
        rejected = frozenset(int(i) for i in np.flatnonzero(predicted <= thr))
        return PolicyDecision(
            price=price,
            predicted_demand=predicted,
            rejection_set=rejected,
            diagnostics={"threshold": thr, "branch": "epoch", "epoch": k},
        )

    def observe(self, t, price, demand, signal=None):
        ols_update(self.design, price, demand)
        self._track_mean(price)

    def refit_observations(self, prices: np.ndarray, demands: np.ndarray):
        """Rebuild the OLS moments from a corrected observation history."""
        keep = self.design.keep_history
        self.design = DesignState.from_batch(prices, demands)
        self.design.keep_history = keep

    def mean_estimate(self):
        if self.estimate is None:
            return None
        return self.estimate.alpha_hat, self.estimate.B_hat


class InformedPolicy(BasePolicy):
    """Certified-anchor estimate-then-select re-solve (Algorithm 3 style).

    The select step runs once up front; the fallback branch delegates every
    call (including rng use) to a LearningPolicy so the two trajectories are
    bit-identical under a shared seed. In the anchor branch the policy prices
    at the anchor until the displacement design has full numerical rank, then
    re-solves the anchored-estimate fluid model every period.
    """

    def __init__(self, instance, config, rng: np.random.Generator):
        super().__init__(instance, config)
        p0, d0, eps0 = config.anchor
        self.p0 = np.asarray(p0, dtype=float)
        self.d0 = np.asarray(d0, dtype=float)
        self.eps0 = float(eps0)
        self.branch = informed_select(self.eps0, self.T, config.tau)
        self.delegate: LearningPolicy | None = None
        if self.branch == "fallback":
            fallback_cfg = PolicyConfig(
                kind="learning",
                zeta=config.zeta,
                sigma0=config.sigma0,
                tau=config.tau,
                gaussian_perturb=config.gaussian_perturb,
                keep_history=config.keep_history,
            )
            self.delegate = LearningPolicy(instance, fallback_cfg, rng)
        else:
            self.anchored = AnchoredState(anchor_p=self.p0, anchor_d=self.d0, eps0=self.eps0)
            self.ptilde = self.p0.copy()
            self.B_repaired: np.ndarray | None = None

    def decide(self, t, c):
        if self.delegate is not None:
            return self.delegate.decide(t, c)
        box = self.instance.box
        if self.anchored.t > 0:
            Vinv, rank = pinv_psd(self.anchored.V)
            B_hat = self.anchored.C @ Vinv
        else:
            rank = 0
        if rank == self.n:
            self.B_repaired = repair_slope(B_hat)
            alpha_eff = self.d0 - self.B_repaired @ self.p0
            try:
                sol = solve_fluid_raw(
                    alpha_eff,
                    self.B_repaired,
                    self.instance.A,
                    np.asarray(c, dtype=float) / (self.T - t + 1),
                    box,
                )
                self.ptilde = sol.p
            except FluidInfeasibleError:
                pass  # keep the previous target price
            branch = "resolve"
        else:
            branch = "anchor-hold"
        l = (t - 1) % self.n
        step = self.ptilde[l] - self.p0[l]
        sgn = 1.0 if step >= 0.0 else -1.0
        raw = self.ptilde.copy()
        raw[l] += self.config.sigma0 * sgn * t**-0.5
        price = box.clip(raw)
        if self.B_repaired is not None:
            predicted = self.d0 + self.B_repaired @ (price - self.p0)
        else:
            predicted = self.d0.copy()
        thr = attraction_threshold("informed", t, self.T, self.config.zeta)
        rejected = frozenset(int(i) for i in np.flatnonzero(predicted <= thr))
        return PolicyDecision(
            price=price,
            predicted_demand=predicted,
            rejection_set=rejected,
            diagnostics={"threshold": thr, "branch": branch},
        )

    def observe(self, t, price, demand, signal=None):
        if self.delegate is not None:
            self.delegate.observe(t, price, demand)
            return
        self.anchored.update(price, demand)
        self._track_mean(price)

    def refit_observations(self, prices: np.ndarray, demands: np.ndarray):
        """Rebuild the anchored displacement moments from corrected history."""
        if self.delegate is not None:
            self.delegate.refit_observations(prices, demands)
            return
        X = np.asarray(prices, dtype=float) - self.p0
        R = np.asarray(demands, dtype=float) - self.d0
        self.anchored.V = X.T @ X
        self.anchored.C = R.T @ X
        self.anchored.t = X.shape[0]

    def mean_estimate(self):
        if self.delegate is not None:
            return self.delegate.mean_estimate()
        if self.B_repaired is None:
            return self.d0.copy(), np.zeros((self.n, self.n))
        return self.d0 - self.B_repaired @ self.p0, self.B_repaired


class SurrogateAssisted(BasePolicy):
    """Wraps a base policy; the estimator sees variance-reduced pseudo-demand.

    The control-variate coefficient refreshes on Algorithm 2's epoch grid
    (before the base re-estimates), using the base policy's current estimate
    as the demand-mean proxy. Each refresh rebuilds the base estimator's
    moments from the stored history with the new coefficient, so every past
    observation is reduced by the best available coefficient rather than the
    one current when it arrived.
    """

    needs_surrogate = True

    def __init__(self, base: BasePolicy, config: PolicyConfig):
        super().__init__(base.instance, config)
        self.base = base
        self.offline = config.offline
        lam = config.lambda_reg
        self.lam = default_ridge(self.offline.sigma_s_off) if lam is None else float(lam)
        self.cv = ControlVariate(gamma_hat=np.zeros((self.n, self.n)), lambda_reg=self.lam)
        self.count = 0
        self._prices: list[np.ndarray] = []
        self._demands: list[np.ndarray] = []
        self._centered: list[np.ndarray] = []

    def _refresh_gamma(self):
        # An n x n coefficient fitted from t samples adds O(n/t) variance per
        # pseudo-observation component, which early on exceeds what the
        # control variate removes. Stage the fit: scalar gamma*I first (n
        # times less estimator noise), blending into the full matrix as
        # samples accumulate, with a sample-size-decaying ridge throughout.
        if self.config.force_gamma_zero or self.count < self.n + 2:
            return
        proxy = self.base.mean_estimate()
        if proxy is None:
            return
        alpha, B = proxy
        P = np.asarray(self._prices)
        D = np.asarray(self._demands)
        S = np.asarray(self._centered)
        resid = D - alpha - P @ B.T
        sigma_ds = resid.T @ S / self.count
        trace_scale = float(np.trace(self.offline.sigma_s_off)) / self.n
        lam_t = self.lam + (2.0 / self.count) * trace_scale
        full = gamma_from_moments(sigma_ds, self.offline.sigma_s_off, lam_t)
        scalar = float(np.trace(full)) / self.n
        w = self.count / (self.count + 4.0 * self.n * self.n)
        gamma = w * full + (1.0 - w) * scalar * np.eye(self.n)
        self.cv = ControlVariate(gamma_hat=gamma, lambda_reg=lam_t)
        self.base.refit_observations(P, D - S @ gamma.T)

    def decide(self, t, c):
        if t > 1 and (t - 1) % self.n == 0:
            self._refresh_gamma()
        return self.base.decide(t, c)

    def observe(self, t, price, demand, signal=None):
        if signal is None:
            raise ValueError("surrogate policy needs the per-period surrogate signal")
        centered = np.asarray(signal, dtype=float) - self.offline.center(price)
        self.count += 1
        self._prices.append(np.asarray(price, dtype=float))
        self._demands.append(np.asarray(demand, dtype=float))
        self._centered.append(centered)
        pseudo = demand - self.cv.gamma_hat @ centered
        self.base.observe(t, price, pseudo)
        self._track_mean(price)

    def mean_estimate(self):
        return self.base.mean_estimate()


def make_policy(config: PolicyConfig, instance: PricingInstance, rng: np.random.Generator):
    if config.kind == "full_info":
        return FullInfoPolicy(instance, config)
    if config.kind == "learning":
        return LearningPolicy(instance, config, rng)
    if config.kind == "informed":
        return InformedPolicy(instance, config, rng)
    if config.kind == "surrogate":
        base_cfg = PolicyConfig(
            kind="learning",
            zeta=config.zeta,
            sigma0=config.sigma0,
            tau=config.tau,
            gaussian_perturb=config.gaussian_perturb,
            keep_history=config.keep_history,
        )
        return SurrogateAssisted(LearningPolicy(instance, base_cfg, rng), config)
    if config.kind == "surrogate_informed":
        base_cfg = PolicyConfig(
            kind="informed",
            zeta=config.zeta,
            sigma0=config.sigma0,
            tau=config.tau,
            anchor=config.anchor,
            gaussian_perturb=config.gaussian_perturb,
            keep_history=config.keep_history,
        )
        return SurrogateAssisted(InformedPolicy(instance, base_cfg, rng), config)
    raise ValueError(f"unknown policy kind {config.kind!r}")
