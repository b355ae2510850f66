"""Kernel dispatch: compiled active-set core when available, NumPy otherwise.

The hot loop of every experiment is the per-period fluid QP re-solve, so the
active-set core exists twice: ``_qp_ext`` (Cython + LAPACK) and ``_qp_py``
(NumPy). Selection happens once at import; set PRICELAB_PURE_PY=1 to force the
pure-Python twin. Rare degenerate cases fall back to a shared projected
gradient path regardless of backend.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import _qp_py

_ext = None
if not os.environ.get("PRICELAB_PURE_PY"):
    try:
        from . import _qp_ext as _ext  # type: ignore[attr-defined]
    except ImportError:
        _ext = None


def backend_name() -> str:
    return "compiled" if _ext is not None else "python"


class QPStatus(IntEnum):
    OPTIMAL = 0
    FALLBACK = 1  # projected-gradient path; looser certificate
    INFEASIBLE = 2


@dataclass(frozen=True, eq=False)
class QPResult:
    x: np.ndarray
    status: QPStatus
    active: tuple[int, ...]  # indices into the unified constraint rows
    lam: np.ndarray  # multipliers over the unified rows
    kkt_residual: float
    iterations: int


def _unified_rows(C, b, lo, hi):
    """Stack [C; +I (finite hi); -I (finite lo)] so ties break on resource rows first."""
    n = lo.shape[0]
    rows = [C] if C.size else []
    rhs = [b] if b.size else []
    hi_idx = np.flatnonzero(np.isfinite(hi))
    lo_idx = np.flatnonzero(np.isfinite(lo))
    if hi_idx.size:
        E = np.zeros((hi_idx.size, n))
        E[np.arange(hi_idx.size), hi_idx] = 1.0
        rows.append(E)
        rhs.append(hi[hi_idx])
    if lo_idx.size:
        E = np.zeros((lo_idx.size, n))
        E[np.arange(lo_idx.size), lo_idx] = -1.0
        rows.append(E)
        rhs.append(-lo[lo_idx])
    if rows:
        return np.ascontiguousarray(np.vstack(rows)), np.concatenate(rhs)
    return np.zeros((0, n)), np.zeros(0)


def _kkt_residual(H, g, G, h, x, lam) -> float:
    stat = float(np.abs(H @ x + g + (G.T @ lam if h.size else 0.0)).max())
    if not h.size:
        return stat
    slack = G @ x - h
    feas = float(np.maximum(slack, 0.0).max())
    comp = float(np.abs(lam * slack).max())
    return max(stat, feas, comp)


def solve_box_qp(
    H: np.ndarray,
    g: np.ndarray,
    C: np.ndarray,
    b: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    tol: float = 1e-8,
    max_iter: int | None = None,
) -> QPResult:
    """Minimize 1/2 x^T H x + g^T x s.t. C x <= b, lo <= x <= hi (H sym. PD)."""
    H = np.ascontiguousarray(H, dtype=float)
    g = np.ascontiguousarray(g, dtype=float)
    C = np.asarray(C, dtype=float).reshape(-1, g.shape[0])
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if C.shape[0] == 0:
        b = np.zeros(0)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    G, h = _unified_rows(C, b, lo, hi)
    if max_iter is None:
        max_iter = 60 * (G.shape[0] + 1)

    core = _ext.active_set_core if _ext is not None else _qp_py.active_set_core
    x, lam, working, status, iters = core(H, g, G, h, tol, max_iter)

    if status == _qp_py.CORE_OPTIMAL:
        res = _kkt_residual(H, g, G, h, x, lam)
        active = tuple(int(i) for i in working)
        return QPResult(x, QPStatus.OPTIMAL, active, lam, res, iters)

    # Guard tripped: either degenerate geometry or an infeasible constraint set.
    x_pg, feasible = _qp_py.projected_gradient_fallback(H, g, C, b, lo, hi, tol)
    if not feasible:
        return QPResult(x_pg, QPStatus.INFEASIBLE, (), np.zeros(h.shape[0]), np.inf, iters)
    # Polish: re-derive the active set at the PG point and try one KKT solve.
    if h.size:
        slack = G @ x_pg - h
        cand = [int(i) for i in np.flatnonzero(slack >= -1e-7 * max(1.0, np.abs(h).max()))]
    else:
        cand = []
    for _ in range(len(cand) + 1):
        k = len(cand)
        kkt = np.zeros((H.shape[0] + k, H.shape[0] + k))
        kkt[: H.shape[0], : H.shape[0]] = H
        rhs = np.concatenate([-g, h[cand]]) if k else -g
        if k:
            Gw = G[cand]
            kkt[: H.shape[0], H.shape[0] :] = Gw.T
            kkt[H.shape[0] :, : H.shape[0]] = Gw
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            cand = cand[:-1]
            continue
        x_p, lam_w = sol[: H.shape[0]], sol[H.shape[0] :]
        if k and lam_w.min() < -tol:
            cand.pop(int(np.argmin(lam_w)))
            continue
        ok = (not h.size) or (G @ x_p - h).max() <= 1e-6 * max(1.0, np.abs(h).max())
        if ok:
            lam = np.zeros(h.shape[0])
            lam[cand] = lam_w
            res = _kkt_residual(H, g, G, h, x_p, lam)
            return QPResult(x_p, QPStatus.FALLBACK, tuple(cand), lam, res, iters)
        break
    lam = np.zeros(h.shape[0])
    res = _kkt_residual(H, g, G, h, x_pg, lam)
    return QPResult(x_pg, QPStatus.FALLBACK, tuple(cand), lam, res, iters)
