"""Market environment: noise, rejection, curtailment, revenue, full episodes.

Randomness comes from counter-based Philox streams derived per (seed, purpose),
so demand noise, policy randomness, and surrogate noise never share a stream
and paired comparisons across policies can reuse the demand path exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .fluid import fluid_value
from .model import PricingInstance, demand_mean
from .policies import PolicyConfig, make_policy
from .surrogate import sample_surrogate

_PURPOSE = {"noise": 1, "policy": 2, "surrogate": 3, "instance": 4, "anchor": 5, "offline": 6}

#: capacities at or below this fraction of the initial scale snap to exact zero
_CAP_SNAP = 1e-12


def stream(seed: int, purpose: str, extra: tuple[int, ...] = ()) -> np.random.Generator:
    """Independent Philox stream for one (seed, purpose[, extra]) combination."""
    code = _PURPOSE[purpose]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), code, *extra))))


@dataclass(frozen=True, eq=False)
class StepOutcome:
    realized: np.ndarray  # post-noise, post-rejection, pre-curtailment
    served: np.ndarray
    revenue: float
    c_after: np.ndarray


@dataclass(frozen=True, eq=False)
class EpisodeResult:
    total_revenue: float
    regret: float
    fluid_value: float
    depletion_times: tuple
    trajectory: list | None = None


def sample_noise(sigma: float, mean_demand: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """N(0, sigma^2) per component, clamped below at -f(p) (no resampling)."""
    mean_demand = np.asarray(mean_demand, dtype=float)
    eps = sigma * rng.standard_normal(mean_demand.shape[0])
    return np.maximum(eps, -mean_demand)


def serve(
    c: np.ndarray, demand: np.ndarray, A: np.ndarray, price: np.ndarray, mode: str = "sequential"
) -> StepOutcome:
    """Curtail demand to remaining capacity and book revenue.

    sequential: products in ascending index order, capacity decremented after
    each; proportional: one common scale factor on the whole demand vector.
    """
    c = np.asarray(c, dtype=float).copy()
    demand = np.asarray(demand, dtype=float)
    snap = _CAP_SNAP * max(1.0, float(c.max()) if c.size else 1.0)
    served = np.zeros_like(demand)
    if mode == "sequential":
        for j in range(demand.shape[0]):
            if demand[j] <= 0.0:
                continue
            col = A[:, j]
            users = col > 0.0
            cap = float(np.min(c[users] / col[users])) if np.any(users) else np.inf
            s = min(demand[j], cap)
            if s > 0.0:
                served[j] = s
                c -= col * s
            c[c <= snap] = 0.0
    elif mode == "proportional":
        load = A @ demand
        users = load > 0.0
        theta = float(min(1.0, np.min(c[users] / load[users]))) if np.any(users) else 1.0
        served = theta * demand
        c -= A @ served
        c[c <= snap] = 0.0
    else:
        raise ValueError(f"unknown curtailment mode {mode!r}")
    c = np.maximum(c, 0.0)
    return StepOutcome(
        realized=demand, served=served, revenue=float(price @ served), c_after=c
    )


def run_episode(
    instance: PricingInstance,
    config: PolicyConfig,
    seed: int,
    record: bool = False,
    curtailment: str = "sequential",
    benchmark: float | None = None,
) -> EpisodeResult:
    """One closed-loop episode; regret is measured against V^Fluid(c0).

    The policy observes the uncensored demand realization for estimation;
    rejection zeroes components before serving, and capacity and revenue use
    the served quantities only.
    """
    rng_noise = stream(seed, "noise")
    rng_policy = stream(seed, "policy")
    rng_surr = stream(seed, "surrogate")
    policy = make_policy(config, instance, rng_policy)
    v_fluid = fluid_value(instance) if benchmark is None else benchmark

    model, A, T = instance.model, instance.A, instance.T
    c = instance.c0.copy()
    m = A.shape[0]
    depleted_at = [None] * m
    revenue = 0.0
    trajectory = [] if record else None

    for t in range(1, T + 1):
        decision = policy.decide(t, c)
        price = decision.price
        f_true = demand_mean(model, price)
        eps = sample_noise(instance.sigma, f_true, rng_noise)
        uncensored = f_true + eps
        realized = uncensored
        if decision.rejection_set:
            realized = uncensored.copy()
            realized[list(decision.rejection_set)] = 0.0
        outcome = serve(c, realized, A, price, mode=curtailment)
        revenue += outcome.revenue
        c = outcome.c_after
        for i in range(m):
            if depleted_at[i] is None and c[i] == 0.0:
                depleted_at[i] = t
        signal = None
        if config.needs_surrogate:
            signal = sample_surrogate(config.surrogate_model, price, eps, rng_surr)
        # Estimators see the uncensored realization (rejection gates serving
        # and consumption only); feeding zeros for rejected products would
        # create an absorbing reject-forever state the algorithms don't have.
        policy.observe(t, price, uncensored, signal)
        if record:
            trajectory.append(
                {
                    "t": t,
                    "price": price.copy(),
                    "realized": outcome.realized.copy(),
                    "served": outcome.served.copy(),
                    "revenue": outcome.revenue,
                    "capacity": c.copy(),
                }
            )

    return EpisodeResult(
        total_revenue=revenue,
        regret=v_fluid - revenue,
        fluid_value=v_fluid,
        depletion_times=tuple(depleted_at),
        trajectory=trajectory,
    )


def trajectory_to_csv(result: EpisodeResult, path) -> None:
    """One row per period: t, price..., realized..., served..., revenue, capacity..."""
    if result.trajectory is None:
        raise ValueError("episode was run without record=True")
    rows = result.trajectory
    n = rows[0]["price"].shape[0]
    m = rows[0]["capacity"].shape[0]
    header = (
        ["t"]
        + [f"price_{j}" for j in range(n)]
        + [f"realized_{j}" for j in range(n)]
        + [f"served_{j}" for j in range(n)]
        + ["revenue"]
        + [f"capacity_{i}" for i in range(m)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [row["t"]]
                + [f"{v:.12g}" for v in row["price"]]
                + [f"{v:.12g}" for v in row["realized"]]
                + [f"{v:.12g}" for v in row["served"]]
                + [f"{row['revenue']:.12g}"]
                + [f"{v:.12g}" for v in row["capacity"]]
            )
