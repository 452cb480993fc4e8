"""Sinkhorn-Knopp matrix scaling onto prescribed row/column marginals.

The same alternating row/column normalization serves two callers: the
discrete solver re-projects per-label coupling tables after each mirror
step, and the batch estimator projects similarity tensors onto batch
marginals. Tables are stacked along a trailing label axis so one call
scales every label slice at once.

Rows or columns with a zero target are frozen at zero and excluded from
scaling; within each label slice the row and column targets must carry
the same total mass, otherwise no coupling exists. Slices whose support
pattern contains degree-1 rows or columns are reduced first by peeling
those forced entries exactly (alternating scaling alone approaches such
boundary solutions only sublinearly); the remaining cyclic core, if any,
is scaled iteratively.
"""
from __future__ import annotations

import numpy as np

from .errors import InfeasibilityError

MASS_MATCH_TOL = 1e-9


def check_feasible(rows: np.ndarray, cols: np.ndarray) -> None:
    """Raise unless per-slice row and column masses agree."""
    row_mass = rows.sum(axis=0)
    col_mass = cols.sum(axis=0)
    gap = np.abs(row_mass - col_mass)
    if np.any(gap > MASS_MATCH_TOL):
        y = int(np.argmax(gap))
        raise InfeasibilityError(
            f"slice {y}: row mass {row_mass[y]!r} != column mass {col_mass[y]!r}"
        )


def marginal_residual(coupling: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> float:
    """Max-abs deviation of the coupling's (i,y)/(j,y) marginals from targets."""
    r = np.abs(coupling.sum(axis=1) - rows).max()
    c = np.abs(coupling.sum(axis=0) - cols).max()
    return float(max(r, c))


def _peel_forced_entries(support: np.ndarray, r: np.ndarray, c: np.ndarray):
    """Fix entries forced by degree-1 rows/columns of the support graph.

    Returns (fixed coupling part, remaining row mass, remaining column
    mass, live support) or None when the support admits no non-negative
    coupling with the given marginals.
    """
    live = support.copy()
    fixed = np.zeros(support.shape)
    r_rem = r.copy()
    c_rem = c.copy()
    while True:
        # Nodes with no remaining mass carry nothing on their edges.
        dead_rows = (r_rem <= 1e-15) & live.any(axis=1)
        if dead_rows.any():
            live[dead_rows, :] = False
            continue
        dead_cols = (c_rem <= 1e-15) & live.any(axis=0)
        if dead_cols.any():
            live[:, dead_cols] = False
            continue
        row_deg = live.sum(axis=1)
        leaf_rows = np.flatnonzero((row_deg == 1) & (r_rem > 1e-15))
        if leaf_rows.size:
            i = int(leaf_rows[0])
            j = int(np.flatnonzero(live[i])[0])
            fixed[i, j] += r_rem[i]
            c_rem[j] -= r_rem[i]
            r_rem[i] = 0.0
            live[i, j] = False
            if c_rem[j] < -1e-9:
                return None
            continue
        col_deg = live.sum(axis=0)
        leaf_cols = np.flatnonzero((col_deg == 1) & (c_rem > 1e-15))
        if leaf_cols.size:
            j = int(leaf_cols[0])
            i = int(np.flatnonzero(live[:, j])[0])
            fixed[i, j] += c_rem[j]
            r_rem[i] -= c_rem[j]
            c_rem[j] = 0.0
            live[i, j] = False
            if r_rem[i] < -1e-9:
                return None
            continue
        break
    if (r_rem < -1e-9).any() or (c_rem < -1e-9).any():
        return None
    if np.abs(r_rem.sum() - c_rem.sum()) > MASS_MATCH_TOL:
        return None
    return fixed, np.maximum(r_rem, 0.0), np.maximum(c_rem, 0.0), live


def _scale_slice(a2: np.ndarray, r: np.ndarray, c: np.ndarray,
                 max_iters: int, tol: float, check_every: int):
    """Scale one 2-axis slice; peels forced entries before iterating."""
    support = a2 > 0.0
    peeled = _peel_forced_entries(support, r, c)
    if peeled is None:
        # Let the iterative path expose the infeasibility as a residual.
        fixed = np.zeros_like(a2)
        r_rem, c_rem, live = r, c, support
    else:
        fixed, r_rem, c_rem, live = peeled
    if r_rem.sum() <= 1e-15:
        return fixed
    core = a2 * live
    row_sup = r_rem > 0.0
    col_sup = c_rem > 0.0
    u = row_sup.astype(float)
    v = col_sup.astype(float)
    for it in range(1, max_iters + 1):
        su = core @ v
        u = np.divide(r_rem, su, out=np.zeros_like(r_rem), where=row_sup & (su > 0.0))
        sv = core.T @ u
        v = np.divide(c_rem, sv, out=np.zeros_like(c_rem), where=col_sup & (sv > 0.0))
        if tol > 0.0 and it % check_every == 0:
            part = core * np.outer(u, v)
            res = max(np.abs(part.sum(axis=1) - r_rem).max(),
                      np.abs(part.sum(axis=0) - c_rem).max())
            if res <= tol:
                return fixed + part
    return fixed + core * np.outer(u, v)


def _needs_peeling(a: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> bool:
    support = a > 0.0
    row_deg = support.sum(axis=1)
    col_deg = support.sum(axis=0)
    return bool(np.any((row_deg <= 1) & (rows > 0.0))
                or np.any((col_deg <= 1) & (cols > 0.0)))


def scale_to_marginals(
    a: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    max_iters: int = 200,
    tol: float = 0.0,
    check_every: int = 5,
):
    """Scale ``a`` (shape i x j x y) so slice y has row sums rows[:, y] and
    column sums cols[:, y].

    Returns ``(coupling, residual, iterations)``. With ``tol > 0`` the
    residual is tested every ``check_every`` rounds and the loop exits
    early once it drops below tol; otherwise all ``max_iters`` rounds run
    (callers that differentiate through the loop need the fixed count).
    """
    a = np.asarray(a, dtype=float)
    rows = np.asarray(rows, dtype=float)
    cols = np.asarray(cols, dtype=float)
    check_feasible(rows, cols)

    if _needs_peeling(a, rows, cols):
        coupling = np.empty_like(a)
        for y in range(a.shape[2]):
            coupling[:, :, y] = _scale_slice(a[:, :, y], rows[:, y], cols[:, y],
                                             max_iters, tol or 1e-12, check_every)
        return coupling, marginal_residual(coupling, rows, cols), max_iters

    row_sup = rows > 0.0
    col_sup = cols > 0.0
    u = row_sup.astype(float)
    v = col_sup.astype(float)
    iterations = 0
    for _ in range(max_iters):
        su = np.einsum("ijy,jy->iy", a, v)
        u = np.divide(rows, su, out=np.zeros_like(rows), where=row_sup & (su > 0.0))
        sv = np.einsum("ijy,iy->jy", a, u)
        v = np.divide(cols, sv, out=np.zeros_like(cols), where=col_sup & (sv > 0.0))
        iterations += 1
        if tol > 0.0 and iterations % check_every == 0:
            coupling = a * u[:, None, :] * v[None, :, :]
            residual = marginal_residual(coupling, rows, cols)
            if residual <= tol:
                return coupling, residual, iterations
    coupling = a * u[:, None, :] * v[None, :, :]
    return coupling, marginal_residual(coupling, rows, cols), iterations
