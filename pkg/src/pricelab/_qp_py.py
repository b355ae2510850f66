"""Pure-NumPy active-set core for the strictly convex box+linear QP.

This is the reference twin of the compiled kernel in ``_qp_ext``; both solve

    min 1/2 x^T H x + g^T x   s.t.  G x <= h        (H symmetric PD)

by iterating KKT solves on a working set: drop the most negative multiplier,
add the most violated independent row, stop when primal-feasible with
nonnegative multipliers. Ties break toward the lowest row index. A repeated
working-set guard hands degenerate or infeasible problems to the caller.
"""

from __future__ import annotations

import numpy as np

CORE_OPTIMAL = 0
CORE_GUARD = 1


def active_set_core(
    H: np.ndarray,
    g: np.ndarray,
    G: np.ndarray,
    h: np.ndarray,
    tol: float,
    max_iter: int,
):
    """Returns (x, lam, working, status, iters); lam is over all rows of G."""
    n = g.shape[0]
    m = h.shape[0]
    scale = max(1.0, float(np.abs(h).max()) if m else 1.0)
    feas_tol = tol * scale
    working: list[int] = []
    seen: set[tuple] = set()
    lam_full = np.zeros(m)

    for it in range(1, max_iter + 1):
        k = len(working)
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = H
        rhs = np.empty(n + k)
        rhs[:n] = -g
        if k:
            Gw = G[working]
            kkt[:n, n:] = Gw.T
            kkt[n:, :n] = Gw
            rhs[n:] = h[working]
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            return None, lam_full, working, CORE_GUARD, it
        x = sol[:n]
        lam_w = sol[n:]

        if k and lam_w.min() < -tol:
            drop = working[int(np.argmin(lam_w))]
            working.remove(drop)
            state = (tuple(working), -1 - drop)
            if state in seen:
                return x, lam_full, working, CORE_GUARD, it
            seen.add(state)
            continue

        lam_full[:] = 0.0
        lam_full[working] = lam_w
        viol = G @ x - h if m else np.zeros(0)
        if m == 0 or viol.max() <= feas_tol:
            return x, lam_full, working, CORE_OPTIMAL, it

        added = False
        order = np.argsort(-viol, kind="stable")
        for j in order:
            j = int(j)
            if viol[j] <= feas_tol:
                break
            if j in working:
                continue
            cand = working + [j]
            sv = np.linalg.svd(G[cand], compute_uv=False)
            if sv[-1] <= 1e-10 * max(sv[0], 1.0):
                continue  # dependent row; try the next most violated
            state = (tuple(working), j)
            if state in seen:
                return x, lam_full, working, CORE_GUARD, it
            seen.add(state)
            working = sorted(cand)
            added = True
            break
        if not added:
            return x, lam_full, working, CORE_GUARD, it

    return None, lam_full, working, CORE_GUARD, max_iter


def projected_gradient_fallback(
    H: np.ndarray,
    g: np.ndarray,
    C: np.ndarray,
    b: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    tol: float,
    feas_only: bool = False,
):
    """Diminishing-step projected gradient with escalating constraint penalty.

    Used when the active-set cycle guard triggers (degenerate geometry) and to
    classify infeasible problems. Returns (x, feasible: bool).
    """
    n = g.shape[0]
    mC = b.shape[0]
    finite_lo = np.where(np.isfinite(lo), lo, -1e30)
    finite_hi = np.where(np.isfinite(hi), hi, 1e30)
    x = np.clip(np.zeros(n), finite_lo, finite_hi)
    bscale = max(1.0, float(np.abs(b).max()) if mC else 1.0)

    def violation(z):
        if mC == 0:
            return 0.0
        return float(np.maximum(C @ z - b, 0.0).max())

    # Phase A: feasibility by minimizing 1/2 || (Cx - b)_+ ||^2 over the box.
    if mC:
        L = max(float(np.linalg.norm(C, 2) ** 2), 1e-12)
        for _ in range(20000):
            r = np.maximum(C @ x - b, 0.0)
            if r.max() <= tol * bscale:
                break
            x = np.clip(x - (C.T @ r) / L, finite_lo, finite_hi)
        if violation(x) > max(1e-7 * bscale, 10 * tol * bscale):
            return x, False
    if feas_only:
        return x, True

    # Phase B: penalized objective with escalating multiplier.
    hnorm = max(float(np.linalg.norm(H, 2)), 1e-12)
    mu = hnorm
    for _ in range(8):
        L = hnorm + (2 * mu * float(np.linalg.norm(C, 2) ** 2) if mC else 0.0)
        for _ in range(4000):
            grad = H @ x + g
            if mC:
                grad = grad + 2 * mu * (C.T @ np.maximum(C @ x - b, 0.0))
            x_new = np.clip(x - grad / L, finite_lo, finite_hi)
            if np.abs(x_new - x).max() <= 1e-14 * max(1.0, np.abs(x).max()):
                x = x_new
                break
            x = x_new
        if violation(x) <= tol * bscale:
            break
        mu *= 10.0
    return x, violation(x) <= max(1e-6 * bscale, 10 * tol * bscale)
