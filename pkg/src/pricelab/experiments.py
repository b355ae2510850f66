"""Experiment harness: instance generation, seeded grids, sweeps, aggregation.

Seeding is paired by construction: every policy, sweep value, and horizon in a
grid shares the per-rep streams (instance, demand noise, policy randomness,
anchor direction, offline data), so comparisons difference out the common
randomness.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .env import run_episode, stream
from .fluid import FluidProblem, solve_fluid, solve_fluid_raw
from .kernels import backend_name
from .model import (
    LinearDemandModel,
    ModelValidationError,
    PriceBox,
    PricingInstance,
)
from .policies import PolicyConfig
from .surrogate import build_offline_dataset, surrogate_from_model

GENERATION_MARGIN = 0.1  # extra diagonal shift beyond lambda_max((B+B^T)/2)


class GenerationFailedError(RuntimeError):
    """Instance generation kept failing validation after the retry budget."""


class NotFittableError(RuntimeError):
    """Too few positive-mean cells for a log-log slope fit."""


class ConfigError(ValueError):
    """Malformed experiment configuration."""


@dataclass(frozen=True)
class ScaleSpec:
    m: int
    n: int
    alpha_range: tuple[float, float] = (5.0, 10.0)
    b_range: tuple[float, float] = (-1.0, 0.0)
    box: tuple[float, float] | None = None  # None: auto-scale the upper bound
    sigma: float = 1.0
    label: str = "custom"

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ConfigError("scale needs m, n >= 1")
        if not (self.alpha_range[0] <= self.alpha_range[1] and self.b_range[0] <= self.b_range[1]):
            raise ConfigError("scale ranges must be ordered")


SCALE1 = ScaleSpec(m=10, n=20, sigma=1.0, label="scale1")
SCALE2 = ScaleSpec(m=1, n=4, sigma=2.2, label="scale2")


def _auto_box(alpha: np.ndarray, B: np.ndarray) -> PriceBox:
    """Largest [0, U]^n on which mean demand stays nonnegative (with headroom)."""
    row_mass = np.abs(B).sum(axis=1)
    upper = 0.99 * float(np.min(alpha / row_mass))
    return PriceBox(0.0, upper, alpha.shape[0])


def generate_instance(
    scale: ScaleSpec, seed: int, T: int, sigma: float | None = None, max_retries: int = 10
) -> PricingInstance:
    """Random instance per the experimental protocol.

    A ~ U[0,1]^{m x n}, alpha ~ U[alpha_range]^n, B ~ U[b_range]^{n x n} with
    B <- B - (lambda_max((B+B^T)/2) + margin) I, capacities c0 = T A d_ref so
    every resource binds at the revenue-optimal in-box operating point (d_ref
    equals the unconstrained optimum d* whenever the optimal price is interior
    to the box). Seeds advance on validation failure (max_retries).
    """
    sigma = scale.sigma if sigma is None else float(sigma)
    n = scale.n
    for attempt in range(max_retries):
        rng = stream(seed, "instance", extra=(attempt,))
        A = rng.uniform(0.0, 1.0, size=(scale.m, n))
        alpha = rng.uniform(*scale.alpha_range, size=n)
        B = rng.uniform(*scale.b_range, size=(n, n))
        shift = float(np.linalg.eigvalsh((B + B.T) / 2.0)[-1]) + GENERATION_MARGIN
        B = B - shift * np.eye(n)
        box = (
            PriceBox(scale.box[0], scale.box[1], n)
            if scale.box is not None
            else _auto_box(alpha, B)
        )
        try:
            model = LinearDemandModel(alpha, B, box)
        except ModelValidationError:
            continue
        ref = solve_fluid_raw(alpha, B, np.zeros((0, n)), np.zeros(0), box)
        c0 = T * A @ ref.d
        return PricingInstance(model=model, A=A, c0=c0, T=T, sigma=sigma)
    raise GenerationFailedError(f"no valid instance after {max_retries} attempts (seed {seed})")


def generate_degenerate_instance(
    scale: ScaleSpec,
    seed: int,
    T: int,
    sigma: float | None = None,
    floor: float | None = None,
) -> PricingInstance:
    """Instance with one near-zero fluid demand component.

    Adds a resource consumed only by the most price-elastic product and sizes
    its capacity so the fluid optimum pins that product's demand at `floor`;
    the remaining capacities bind at the re-optimized demand vector.
    """
    base = generate_instance(scale, seed, T, sigma=sigma)
    model = base.model
    j = int(np.argmin(model.alpha / np.abs(model.B).sum(axis=1)))
    fmin = float(model.alpha[j] + model.B[j].sum() * model.box.upper)
    if floor is None:
        floor = max(1.5 * max(fmin, 0.0) + 1e-3, 0.015 * float(model.alpha[j]))
    pin_row = np.zeros((1, base.n))
    pin_row[0, j] = 1.0
    pinned = solve_fluid(FluidProblem(model=model, A=pin_row, rhs=[floor], box=model.box))
    A_full = np.vstack([base.A, pin_row])
    c0 = T * A_full @ pinned.d
    return PricingInstance(model=model, A=A_full, c0=c0, T=base.T, sigma=base.sigma)


def make_anchor(
    instance: PricingInstance, eps0: float, seed: int
) -> tuple[np.ndarray, np.ndarray, float]:
    """Certified anchor at the fluid-optimal price: d0 = f(p0) + eps0 * direction."""
    sol = solve_fluid(
        FluidProblem(
            model=instance.model, A=instance.A, rhs=instance.c0 / instance.T, box=instance.box
        )
    )
    d0 = sol.d.copy()
    if eps0 > 0:
        v = stream(seed, "anchor").standard_normal(instance.n)
        d0 = d0 + eps0 * v / np.linalg.norm(v)
    return sol.p.copy(), d0, float(eps0)


@dataclass(frozen=True)
class PolicySpec:
    """JSON-able policy description; materialized per instance and rep."""

    kind: str
    name: str | None = None
    zeta: float = 1.0
    sigma0: float = 1.0
    tau: float = 1.0
    eps0: float | None = None
    eps0_rule: str | None = None  # "inv_sqrt_T": eps0 = T^(-1/2) per horizon
    rho: float | None = None
    noise_sd: float | None = None  # default: the instance noise level
    n_offline: int = 500
    distortion: float = 0.2
    lambda_reg: float | None = None
    gaussian_perturb: bool = False
    force_gamma_zero: bool = False

    @property
    def label(self) -> str:
        return self.name or self.kind

    def materialize(self, instance: PricingInstance, rep_seed: int) -> PolicyConfig:
        anchor = None
        if self.kind in ("informed", "surrogate_informed"):
            eps0 = self.eps0
            if self.eps0_rule == "inv_sqrt_T":
                eps0 = instance.T**-0.5
            if eps0 is None:
                raise ConfigError(f"policy {self.label!r} needs eps0 or eps0_rule")
            anchor = make_anchor(instance, eps0, rep_seed)
        sm = None
        offline = None
        if self.kind in ("surrogate", "surrogate_informed"):
            if self.rho is None:
                raise ConfigError(f"policy {self.label!r} needs rho")
            noise_sd = self.noise_sd if self.noise_sd is not None else instance.sigma
            sm = surrogate_from_model(
                instance.model, self.rho, noise_sd, instance.sigma, self.distortion
            )
            offline = build_offline_dataset(
                sm, self.n_offline, instance.box, stream(rep_seed, "offline")
            )
        return PolicyConfig(
            kind=self.kind,
            zeta=self.zeta,
            sigma0=self.sigma0,
            tau=self.tau,
            anchor=anchor,
            surrogate_model=sm,
            offline=offline,
            lambda_reg=self.lambda_reg,
            force_gamma_zero=self.force_gamma_zero,
            gaussian_perturb=self.gaussian_perturb,
        )


SWEEP_PARAMS = ("eps0", "rho", "zeta", "sigma")


@dataclass(frozen=True)
class ExperimentConfig:
    scale: ScaleSpec
    horizons: tuple[int, ...]
    reps: int
    policies: tuple[PolicySpec, ...]
    sweep: tuple[str, tuple[float, ...]] | None = None
    master_seed: int = 0
    degenerate: bool = False
    curtailment: str = "sequential"

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if not self.horizons:
            raise ConfigError("horizons must be nonempty")
        if not self.policies:
            raise ConfigError("need at least one policy")
        if self.sweep is not None and self.sweep[0] not in SWEEP_PARAMS:
            raise ConfigError(f"unknown sweep parameter {self.sweep[0]!r}")


@dataclass(frozen=True, eq=False)
class AggregateCell:
    policy: str
    T: int
    sweep_param: str | None
    sweep_value: float | None
    reps: int
    mean_regret: float
    std: float
    stderr: float
    rep_values: tuple[float, ...] = ()
    failures: int = 0


def rep_seed_of(master_seed: int, rep: int) -> int:
    """Stable per-rep integer seed; shared by every cell for paired comparisons."""
    return int(np.random.SeedSequence((int(master_seed), int(rep))).generate_state(1)[0])


def _apply_sweep(spec: PolicySpec, param: str, value: float) -> PolicySpec:
    if param == "zeta":
        return dataclasses.replace(spec, zeta=float(value))
    if param == "eps0":
        if spec.kind in ("informed", "surrogate_informed"):
            return dataclasses.replace(spec, eps0=float(value), eps0_rule=None)
        return spec
    if param == "rho":
        if spec.kind in ("surrogate", "surrogate_informed"):
            return dataclasses.replace(spec, rho=float(value))
        return spec
    return spec  # sigma acts on the instance, not the policy


def run_cell_episode(
    config: ExperimentConfig, spec: PolicySpec, T: int, sweep_value: float | None, rep: int
) -> float:
    """One (policy, T, sweep value, rep) episode; returns its regret."""
    seed = rep_seed_of(config.master_seed, rep)
    sigma = None
    if config.sweep is not None and config.sweep[0] == "sigma":
        sigma = float(sweep_value)
    if config.sweep is not None and sweep_value is not None:
        spec = _apply_sweep(spec, config.sweep[0], sweep_value)
    gen = generate_degenerate_instance if config.degenerate else generate_instance
    instance = gen(config.scale, seed, T, sigma=sigma)
    policy_config = spec.materialize(instance, seed)
    result = run_episode(instance, policy_config, seed, curtailment=config.curtailment)
    return result.regret


def _run_task(args):
    config, spec_idx, T, sweep_value, rep = args
    spec = config.policies[spec_idx]
    try:
        return spec_idx, T, sweep_value, rep, run_cell_episode(config, spec, T, sweep_value, rep), None
    except Exception as exc:  # recorded per cell, never aborts the grid
        return spec_idx, T, sweep_value, rep, None, repr(exc)


def run_grid(config: ExperimentConfig, workers: int = 1) -> list[AggregateCell]:
    """Every (policy, horizon, sweep value) cell, reps paired across cells."""
    sweep_values: tuple = (None,) if config.sweep is None else tuple(config.sweep[1])
    sweep_param = None if config.sweep is None else config.sweep[0]
    cells = [
        (i, T, v)
        for i, _ in enumerate(config.policies)
        for T in config.horizons
        for v in sweep_values
    ]
    tasks = [(config, i, T, v, rep) for (i, T, v) in cells for rep in range(config.reps)]

    results: dict[tuple, dict[int, float]] = {key: {} for key in cells}
    errors: dict[tuple, list[str]] = {key: [] for key in cells}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * workers))))
    else:
        outs = [_run_task(t) for t in tasks]
    for spec_idx, T, v, rep, regret, err in outs:
        if err is None:
            results[(spec_idx, T, v)][rep] = regret
        else:
            errors[(spec_idx, T, v)].append(err)

    out = []
    for key in cells:
        spec_idx, T, v = key
        vals = tuple(results[key][r] for r in sorted(results[key]))
        arr = np.asarray(vals)
        mean = float(arr.mean()) if arr.size else float("nan")
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        stderr = std / float(np.sqrt(arr.size)) if arr.size else float("nan")
        out.append(
            AggregateCell(
                policy=config.policies[spec_idx].label,
                T=int(T),
                sweep_param=sweep_param,
                sweep_value=None if v is None else float(v),
                reps=int(arr.size),
                mean_regret=mean,
                std=std,
                stderr=stderr,
                rep_values=vals,
                failures=len(errors[key]),
            )
        )
    return out


def fit_scaling_exponent(cells: list[AggregateCell]) -> tuple[float, float, float]:
    """Least-squares slope of log(mean regret) on log(T); returns (slope, intercept, r2)."""
    pts = [(c.T, c.mean_regret) for c in cells if c.mean_regret > 0]
    if len(pts) < 3:
        raise NotFittableError(f"only {len(pts)} positive-mean cells; need >= 3")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


# ---------------------------------------------------------------------------
# Canned sweeps mirroring the published experiments


def phase_transition_grid(T: int, points: int = 7) -> tuple[float, ...]:
    """Log grid over [T^(-1/2), 1] for the anchor-quality sweep."""
    return tuple(float(x) for x in np.geomspace(T**-0.5, 1.0, points))


def canned_config(kind: str, scale: ScaleSpec, **kw) -> ExperimentConfig:
    """Prebuilt configs for the five published sweeps."""
    reps = kw.pop("reps", None)
    master_seed = kw.pop("master_seed", 0)
    horizons = kw.pop("horizons", None)
    grid = kw.pop("grid", None)
    if kw:
        raise ConfigError(f"unknown options {sorted(kw)}")
    if kind == "horizon":
        return ExperimentConfig(
            scale=scale,
            horizons=tuple(horizons or (50, 100, 200, 400, 800, 1600)),
            reps=reps or 100,
            policies=(
                PolicySpec(kind="full_info"),
                PolicySpec(kind="learning"),
                PolicySpec(kind="informed", eps0_rule="inv_sqrt_T"),
            ),
            master_seed=master_seed,
        )
    if kind == "epsilon0":
        T = int((horizons or (400,))[0])
        return ExperimentConfig(
            scale=scale,
            horizons=(T,),
            reps=reps or 300,
            policies=(
                PolicySpec(kind="informed", eps0=0.1),
                PolicySpec(kind="full_info"),
                PolicySpec(kind="learning"),
            ),
            sweep=("eps0", tuple(grid or phase_transition_grid(T))),
            master_seed=master_seed,
        )
    if kind == "rho":
        return ExperimentConfig(
            scale=scale,
            horizons=tuple(horizons or (1000,)),
            reps=reps or 100,
            policies=(PolicySpec(kind="learning"), PolicySpec(kind="surrogate", rho=0.65)),
            sweep=("rho", tuple(grid or (0.0, 0.3, 0.5, 0.7, 0.9))),
            master_seed=master_seed,
        )
    if kind == "zeta":
        return ExperimentConfig(
            scale=scale,
            horizons=tuple(horizons or (500,)),
            reps=reps or 100,
            policies=(PolicySpec(kind="learning"),),
            sweep=("zeta", tuple(grid or (0.0, 0.5, 1.0, 2.0, 5.0, 10.0))),
            master_seed=master_seed,
            degenerate=True,
        )
    if kind == "sigma":
        return ExperimentConfig(
            scale=scale,
            horizons=tuple(horizons or (500,)),
            reps=reps or 100,
            policies=(
                PolicySpec(kind="full_info"),
                PolicySpec(kind="learning"),
                PolicySpec(kind="informed", eps0=0.1),
            ),
            sweep=("sigma", tuple(grid or (0.1, 0.2, 0.5, 1.0, 2.0, 5.0))),
            master_seed=master_seed,
        )
    raise ConfigError(f"unknown canned sweep {kind!r}")


# ---------------------------------------------------------------------------
# Serialization


def emit_csv(cells: list[AggregateCell], path) -> None:
    """Byte-stable CSV: policy,T,sweep_param,sweep_value,reps,mean_regret,std,stderr."""
    lines = ["policy,T,sweep_param,sweep_value,reps,mean_regret,std,stderr"]
    for c in cells:
        lines.append(
            ",".join(
                [
                    c.policy,
                    str(c.T),
                    c.sweep_param or "",
                    "" if c.sweep_value is None else f"{c.sweep_value:.12g}",
                    str(c.reps),
                    f"{c.mean_regret:.12g}",
                    f"{c.std:.12g}",
                    f"{c.stderr:.12g}",
                ]
            )
        )
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


_SCALE_KEYS = {"m", "n", "alpha_range", "b_range", "box", "sigma", "label"}
_POLICY_KEYS = {f.name for f in dataclasses.fields(PolicySpec)}
_CONFIG_KEYS = {
    "scale",
    "horizons",
    "reps",
    "policies",
    "sweep",
    "master_seed",
    "degenerate",
    "curtailment",
}


def _scale_from_obj(obj) -> ScaleSpec:
    if isinstance(obj, str):
        if obj == "scale1":
            return SCALE1
        if obj == "scale2":
            return SCALE2
        raise ConfigError(f"unknown scale name {obj!r}")
    unknown = set(obj) - _SCALE_KEYS
    if unknown:
        raise ConfigError(f"unknown scale keys {sorted(unknown)}")
    obj = dict(obj)
    for key in ("alpha_range", "b_range", "box"):
        if obj.get(key) is not None:
            obj[key] = tuple(obj[key])
    return ScaleSpec(**obj)


def config_from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    missing = {"scale", "horizons", "reps", "policies"} - set(raw)
    if missing:
        raise ConfigError(f"missing config keys {sorted(missing)}")
    policies = []
    for pobj in raw["policies"]:
        unknown = set(pobj) - _POLICY_KEYS
        if unknown:
            raise ConfigError(f"unknown policy keys {sorted(unknown)}")
        policies.append(PolicySpec(**pobj))
    sweep = None
    if raw.get("sweep") is not None:
        sobj = raw["sweep"]
        unknown = set(sobj) - {"param", "grid"}
        if unknown:
            raise ConfigError(f"unknown sweep keys {sorted(unknown)}")
        sweep = (sobj["param"], tuple(float(v) for v in sobj["grid"]))
    return ExperimentConfig(
        scale=_scale_from_obj(raw["scale"]),
        horizons=tuple(int(t) for t in raw["horizons"]),
        reps=int(raw["reps"]),
        policies=tuple(policies),
        sweep=sweep,
        master_seed=int(raw.get("master_seed", 0)),
        degenerate=bool(raw.get("degenerate", False)),
        curtailment=raw.get("curtailment", "sequential"),
    )


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def config_to_dict(config: ExperimentConfig) -> dict:
    scale = dataclasses.asdict(config.scale)
    scale["alpha_range"] = list(scale["alpha_range"])
    scale["b_range"] = list(scale["b_range"])
    scale["box"] = None if scale["box"] is None else list(scale["box"])
    return {
        "scale": scale,
        "horizons": list(config.horizons),
        "reps": config.reps,
        "policies": [dataclasses.asdict(p) for p in config.policies],
        "sweep": None
        if config.sweep is None
        else {"param": config.sweep[0], "grid": list(config.sweep[1])},
        "master_seed": config.master_seed,
        "degenerate": config.degenerate,
        "curtailment": config.curtailment,
    }


def emit_manifest(config: ExperimentConfig, path) -> None:
    """Full config + derived seeds + software version, enough for a bit-exact rerun."""
    payload = {
        "pricelab_version": __version__,
        "kernel_backend": backend_name(),
        "config": config_to_dict(config),
        "rep_seeds": [rep_seed_of(config.master_seed, r) for r in range(config.reps)],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_from_manifest(path, workers: int = 1) -> list[AggregateCell]:
    with open(path) as fh:
        payload = json.load(fh)
    config = config_from_dict(payload["config"])
    return run_grid(config, workers=workers)
