"""Exact discrete information measures on small probability tables.

All information quantities are in bits (log base 2). Probabilities below
``ZERO_EPS`` are treated as exact zeros so that 0*log(0) contributes
nothing. Values are pure functions of immutable tables and are safe to
call from any number of threads.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DomainError, InternalConsistencyError

ZERO_EPS = 1e-12    # below this a probability is an exact zero
MASS_TOL = 1e-9     # tolerance on total mass of a distribution
NEG_MI_TOL = 1e-9   # negative MI beyond this is an internal error

AXIS_X1, AXIS_X2, AXIS_Y = 0, 1, 2
_AXIS_NAMES = {AXIS_X1: "x1", AXIS_X2: "x2", AXIS_Y: "y"}


def _check_mass(arr: np.ndarray, name: str) -> None:
    if arr.size == 0:
        raise DomainError(f"{name}: empty table")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name}: non-finite entries")
    if np.any(arr < -ZERO_EPS):
        raise DomainError(f"{name}: negative entries (min {arr.min():.3e})")
    total = float(arr.sum())
    if abs(total - 1.0) > MASS_TOL:
        raise DomainError(f"{name}: total mass {total!r} is not 1 within {MASS_TOL}")


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out[np.abs(out) < ZERO_EPS] = 0.0
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Pmf:
    """A probability mass function over a finite alphabet."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1:
            raise DomainError(f"Pmf: expected 1-axis array, got shape {probs.shape}")
        _check_mass(probs, "Pmf")
        object.__setattr__(self, "probs", _freeze(probs))

    def __len__(self) -> int:
        return self.probs.shape[0]

    @classmethod
    def uniform(cls, k: int) -> "Pmf":
        if k < 1:
            raise DomainError("Pmf.uniform: k must be >= 1")
        return cls(np.full(k, 1.0 / k))


@dataclass(frozen=True)
class JointPmf:
    """A joint distribution over (X1-state, X2-state, Y-label).

    The table is a 3-axis array indexed ``table[x1, x2, y]`` whose
    non-negative entries sum to 1.
    """

    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        if table.ndim != 3:
            raise DomainError(f"JointPmf: expected 3-axis table, got shape {table.shape}")
        _check_mass(table, "JointPmf")
        object.__setattr__(self, "table", _freeze(table))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.table.shape

    def marginal(self, axes: Iterable[int]) -> np.ndarray:
        """Marginal table over the kept ``axes`` (ascending axis order)."""
        keep = _normalize_axes(axes, "axes")
        drop = tuple(a for a in (0, 1, 2) if a not in keep)
        return self.table.sum(axis=drop) if drop else self.table

    def pmf(self, axis: int) -> Pmf:
        return Pmf(self.marginal((axis,)))


def _normalize_axes(axes: Iterable[int], name: str) -> tuple[int, ...]:
    try:
        group = tuple(sorted(set(int(a) for a in axes)))
    except TypeError:
        raise DomainError(f"{name}: expected an iterable of axis indices")
    if not group:
        raise DomainError(f"{name}: empty axis group")
    if any(a not in (0, 1, 2) for a in group):
        raise DomainError(f"{name}: axes must be within {{0, 1, 2}}, got {group}")
    return group


def entropy_table(table: np.ndarray) -> float:
    """Shannon entropy in bits of an arbitrary probability table."""
    flat = np.asarray(table, dtype=float).ravel()
    nz = flat[flat > ZERO_EPS]
    return float(-(nz * np.log2(nz)).sum())


def entropy(p: Pmf) -> float:
    """H(p) = -sum p log2 p, with 0*log(0) = 0."""
    return entropy_table(p.probs)


def _clamp_information(value: float, what: str) -> float:
    if value < -NEG_MI_TOL:
        raise InternalConsistencyError(f"{what} came out {value:.3e} < -{NEG_MI_TOL}")
    return max(0.0, value)


def mutual_information(j: JointPmf, group_a: Iterable[int], group_b: Iterable[int]) -> float:
    """Mutual information I(A; B) in bits between two disjoint axis groups."""
    a = _normalize_axes(group_a, "group_a")
    b = _normalize_axes(group_b, "group_b")
    if set(a) & set(b):
        raise DomainError(f"axis groups overlap: {a} vs {b}")
    h_a = entropy_table(j.marginal(a))
    h_b = entropy_table(j.marginal(b))
    h_ab = entropy_table(j.marginal(a + b))
    return _clamp_information(h_a + h_b - h_ab, "mutual information")


def conditional_mi(j: JointPmf, a: int, b: int, given: int) -> float:
    """Conditional mutual information I(A; B | C) in bits."""
    axes = (a, b, given)
    if len(set(axes)) != 3:
        raise DomainError(f"conditional_mi needs three distinct axes, got {axes}")
    _normalize_axes(axes, "axes")
    h_ac = entropy_table(j.marginal((a, given)))
    h_bc = entropy_table(j.marginal((b, given)))
    h_abc = entropy_table(j.table)
    h_c = entropy_table(j.marginal((given,)))
    return _clamp_information(h_ac + h_bc - h_abc - h_c, "conditional MI")


def co_information(j: JointPmf) -> float:
    """I(X1;Y) + I(X2;Y) - I(X1,X2;Y); may be negative (equals R - S)."""
    i1 = mutual_information(j, (AXIS_X1,), (AXIS_Y,))
    i2 = mutual_information(j, (AXIS_X2,), (AXIS_Y,))
    i12 = mutual_information(j, (AXIS_X1, AXIS_X2), (AXIS_Y,))
    return i1 + i2 - i12


def kl_bits(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in bits for two distributions on the same alphabet.

    Entries of p below ZERO_EPS contribute nothing; p-mass on q-zeros is a
    domain error (infinite divergence).
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DomainError("kl_bits: shape mismatch")
    mask = p > ZERO_EPS
    if np.any(q[mask] <= ZERO_EPS):
        raise DomainError("kl_bits: p has mass where q is zero")
    return float((p[mask] * (np.log2(p[mask]) - np.log2(q[mask]))).sum())
