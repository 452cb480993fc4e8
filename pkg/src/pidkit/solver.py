"""Exact PID atoms for discrete systems.

The redundancy/unique/synergy atoms are defined through the convex program

    minimize I_Q(X1, X2; Y)  over all joints Q that preserve the pairwise
    (x1, y) and (x2, y) marginals of the true joint P.

The feasible set fixes Q(y) and, for every label y, constrains the
conditional coupling Q(x1, x2 | y) to a transportation polytope with row
marginals P(x1|y) and column marginals P(x2|y). Since H(Y) is constant on
that set, minimizing I is maximizing H_Q(Y | X1, X2). We run mirror
descent (exponentiated gradient) on the per-label coupling tables and
re-project with Sinkhorn scaling after every step, which keeps iterates
strictly feasible.

Atoms are then read off the optimal value:

    S  = I_P(X1,X2;Y) - I_Q(X1,X2;Y)
    U1 = I_Q(X1,X2;Y) - I_P(X2;Y)
    U2 = I_Q(X1,X2;Y) - I_P(X1;Y)
    R  = I_P(X1;Y) - U1
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    AXIS_X1,
    AXIS_X2,
    AXIS_Y,
    ZERO_EPS,
    JointPmf,
    co_information,
    mutual_information,
)
from .errors import DomainError, InternalConsistencyError
from .sinkhorn import scale_to_marginals

MARGINAL_TOL = 1e-6          # default feasibility tolerance for q_tilde
CONSISTENCY_HARD_TOL = 1e-4  # residuals beyond this raise
ATOM_NEG_TOL = 1e-6          # atoms may be this negative from float error


@dataclass(frozen=True)
class SolveOptions:
    """Knobs for the mirror-descent solver.

    step_rule "adaptive" (default) grows the step after accepted
    iterations and halves it when a step would increase the objective;
    "fixed" only ever halves; "backtracking" restarts from ``step`` every
    iteration and halves within it. All three enforce monotone descent.
    ``seed`` is carried for interface stability; the algorithm is
    deterministic and never draws random numbers.
    """

    max_iters: int = 10000
    tol: float = 1e-9
    step: float = 1.0
    step_rule: str = "adaptive"
    seed: int = 0

    def __post_init__(self):
        if self.tol <= 0:
            raise DomainError("SolveOptions: tol must be > 0")
        if self.max_iters < 1:
            raise DomainError("SolveOptions: max_iters must be >= 1")
        if self.step_rule not in ("adaptive", "fixed", "backtracking"):
            raise DomainError(f"SolveOptions: unknown step_rule {self.step_rule!r}")


@dataclass(frozen=True)
class AdmissibleSet:
    """The marginal-matching constraint set of a target joint.

    Caches the two pairwise marginals that every member must preserve.
    """

    target: JointPmf
    marg_x1y: np.ndarray
    marg_x2y: np.ndarray

    @classmethod
    def from_joint(cls, target: JointPmf) -> "AdmissibleSet":
        m1 = target.marginal((AXIS_X1, AXIS_Y))
        m2 = target.marginal((AXIS_X2, AXIS_Y))
        return cls(target=target, marg_x1y=m1, marg_x2y=m2)


def check_marginals(q: JointPmf, a: AdmissibleSet, tol: float) -> bool:
    """True iff q's pairwise (x_i, y) marginals match the set's within tol."""
    if q.dims != a.target.dims:
        raise DomainError(f"dimension mismatch: {q.dims} vs {a.target.dims}")
    d1 = np.abs(q.marginal((AXIS_X1, AXIS_Y)) - a.marg_x1y).max()
    d2 = np.abs(q.marginal((AXIS_X2, AXIS_Y)) - a.marg_x2y).max()
    return bool(max(d1, d2) <= tol)


def marginal_deviation(q: JointPmf, a: AdmissibleSet) -> float:
    d1 = np.abs(q.marginal((AXIS_X1, AXIS_Y)) - a.marg_x1y).max()
    d2 = np.abs(q.marginal((AXIS_X2, AXIS_Y)) - a.marg_x2y).max()
    return float(max(d1, d2))


@dataclass(frozen=True)
class SolveResult:
    q_tilde: JointPmf
    objective_trace: np.ndarray  # bits, one entry per accepted iterate
    converged: bool
    iterations: int


def _objective_bits(cond: np.ndarray, py: np.ndarray) -> float:
    """I_Q(X1,X2;Y) in bits for per-label conditionals cond[x1,x2,y]."""
    return _grad_and_objective(cond, py)[1]


def _grad_and_objective(cond: np.ndarray, py: np.ndarray):
    """Mirror direction log(cond / mixture) in nats plus the objective in bits.

    The direction is the objective gradient rescaled per label by 1/P(y):
    the step is taken in each conditional table's own KL geometry, so
    small-mass labels move at the same multiplicative rate as large ones.
    At step 1.0 the update C <- C * exp(-log(C/M)) = M followed by the
    Sinkhorn projection is one round of alternating I-projection, which
    never increases the objective; larger adaptive steps overrelax it.
    """
    joint = cond * py[None, None, :]
    mix = joint.sum(axis=2)
    mask = cond > ZERO_EPS
    ratio = np.divide(cond, mix[:, :, None], out=np.ones_like(cond), where=mask)
    grad = np.log(ratio, out=np.zeros_like(cond), where=mask)
    objective = float((joint * grad).sum() / np.log(2.0))
    return grad, objective


def solve(p: JointPmf, opts: SolveOptions | None = None) -> SolveResult:
    """Minimize I_Q(X1,X2;Y) over the marginal-matching set of p.

    Returns the best feasible iterate, the objective trace (non-increasing
    over accepted steps) and a convergence flag. Labels with zero mass are
    excluded from the optimization; with at most one live label the
    problem is trivial and p itself is returned.
    """
    opts = opts or SolveOptions()
    table = p.table
    py = table.sum(axis=(0, 1))
    live = py > 0.0
    if int(live.sum()) <= 1 or table.shape[2] == 1:
        start = mutual_information(p, (AXIS_X1, AXIS_X2), (AXIS_Y,))
        return SolveResult(p, np.array([start]), True, 0)

    # Per-label conditionals and their fixed transportation marginals.
    safe_py = np.where(live, py, 1.0)
    cond = table / safe_py[None, None, :]
    cond[:, :, ~live] = 0.0
    rows = cond.sum(axis=1)  # P(x1|y), shape (n1, k)
    cols = cond.sum(axis=0)  # P(x2|y), shape (n2, k)

    # Feasible synergy-free start: independent coupling per label.
    cond = rows[:, None, :] * cols[None, :, :]

    def project(table):
        projected, residual, _ = scale_to_marginals(table, rows, cols,
                                                    max_iters=120, tol=1e-10, check_every=4)
        return projected, residual

    grad, obj = _grad_and_objective(cond, py)
    trace = [obj]
    best_cond = cond
    best_obj = obj
    eta = opts.step
    converged = False
    iterations = 0
    small_changes = 0
    snap_cond, snap_iter = cond, 0

    for _ in range(opts.max_iters):
        iterations += 1
        step = opts.step if opts.step_rule == "backtracking" else eta
        accepted = False
        while True:
            candidate = cond * np.exp(-step * grad)
            candidate, _ = project(candidate)
            cand_grad, cand_obj = _grad_and_objective(candidate, py)
            if cand_obj <= obj + 1e-12:
                accepted = True
                break
            step *= 0.5
            if opts.step_rule in ("fixed", "adaptive"):
                eta = step
            if step < 1e-14:
                break
        if not accepted:
            converged = True  # step underflow: no descent direction left
            break
        change = obj - cand_obj
        cond, obj, grad = candidate, cand_obj, cand_grad
        # Optima often sit on polytope faces; Sinkhorn alone approaches a
        # zero entry only sublinearly, so freeze entries that have decayed
        # to dust whenever that keeps both feasibility and descent.
        tiny = (cond > 0.0) & (cond < 1e-10)
        if tiny.any():
            frozen = cond.copy()
            frozen[tiny] = 0.0
            frozen, residual = project(frozen)
            froz_grad, froz_obj = _grad_and_objective(frozen, py)
            if residual <= 1e-9 and froz_obj <= obj + 1e-12:
                cond, obj, grad = frozen, froz_obj, froz_grad
        # Linearly convergent tails are cut short by extrapolating the
        # recent multiplicative drift; adopted only when it out-performs
        # the latest plain step, so the trace stays monotone.
        if iterations - snap_iter == 16:
            ratio = np.divide(cond, snap_cond, out=np.ones_like(cond),
                              where=(cond > 0.0) & (snap_cond > 0.0))
            log_ratio = np.log(ratio, out=np.zeros_like(ratio), where=ratio > 0.0)
            for kappa in (64.0, 16.0, 4.0):
                candidate = cond * np.exp(np.clip(kappa * log_ratio, -700.0, 60.0))
                candidate, residual = project(candidate)
                cand_grad, cand_obj = _grad_and_objective(candidate, py)
                if residual <= 1e-9 and cand_obj <= obj + 1e-12 and obj - cand_obj > change:
                    cond, obj, grad = candidate, cand_obj, cand_grad
                    break
            snap_cond, snap_iter = cond, iterations
        trace.append(obj)
        if obj < best_obj:
            best_obj, best_cond = obj, cond
        if opts.step_rule == "adaptive":
            eta = min(eta * 1.3, 16.0)
        if change <= opts.tol * max(1.0, abs(obj)):
            small_changes += 1
            if small_changes >= 2:
                converged = True
                break
        else:
            small_changes = 0

    # Certify tight feasibility of the returned iterate.
    dev = max(np.abs(best_cond.sum(axis=1) - rows).max(),
              np.abs(best_cond.sum(axis=0) - cols).max())
    if dev > 1e-9:
        best_cond, _, _ = scale_to_marginals(best_cond, rows, cols,
                                             max_iters=2000, tol=1e-13, check_every=10)
    q_table = best_cond * py[None, None, :]
    q_tilde = JointPmf(q_table)
    # P is always feasible; never report an iterate worse than P itself.
    start_obj = mutual_information(p, (AXIS_X1, AXIS_X2), (AXIS_Y,))
    if best_obj > start_obj + 1e-9:
        q_tilde = p
        trace.append(start_obj)
    return SolveResult(q_tilde, np.asarray(trace), converged, iterations)


@dataclass(frozen=True)
class PidAtoms:
    """The information spectrum {R, U1, U2, S} of a joint, in bits.

    Fields hold the raw (unclamped) values, which satisfy the consistency
    identities exactly; ``clamped()`` gives the reporting convention with
    small negatives floored at zero. ``residuals`` is a diagnostics
    payload (identity residuals, marginal deviation, the residual of the
    alternative redundancy formula) and does not affect equality.
    """

    r: float
    u1: float
    u2: float
    s: float
    total: float
    residuals: dict = field(default=None, compare=False)

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.u1, self.u2, self.s])

    def clamped(self) -> "PidAtoms":
        return PidAtoms(
            r=max(0.0, self.r),
            u1=max(0.0, self.u1),
            u2=max(0.0, self.u2),
            s=max(0.0, self.s),
            total=self.total,
            residuals=self.residuals,
        )


def compute_atoms(p: JointPmf, q_tilde: JointPmf) -> PidAtoms:
    """Atoms of p given a marginal-matching minimizer q_tilde.

    Raises InternalConsistencyError when q_tilde's marginal deviation or
    any consistency identity residual exceeds 1e-4, naming the violation.
    """
    admissible = AdmissibleSet.from_joint(p)
    deviation = marginal_deviation(q_tilde, admissible)
    if deviation > CONSISTENCY_HARD_TOL:
        raise InternalConsistencyError(
            f"q_tilde violates marginal matching by {deviation:.3e}"
        )

    i1 = mutual_information(p, (AXIS_X1,), (AXIS_Y,))
    i2 = mutual_information(p, (AXIS_X2,), (AXIS_Y,))
    i_p = mutual_information(p, (AXIS_X1, AXIS_X2), (AXIS_Y,))
    i_q = mutual_information(q_tilde, (AXIS_X1, AXIS_X2), (AXIS_Y,))

    s = i_p - i_q
    u1 = i_q - i2
    u2 = i_q - i1
    r = i1 - u1

    identities = {
        "R+U1 = I(X1;Y)": (r + u1) - i1,
        "R+U2 = I(X2;Y)": (r + u2) - i2,
        "R+U1+U2+S = I(X1,X2;Y)": (r + u1 + u2 + s) - i_p,
        "R-S = co-information": (r - s) - co_information(p),
    }
    for name, residual in identities.items():
        if abs(residual) > CONSISTENCY_HARD_TOL:
            raise InternalConsistencyError(f"identity {name} violated by {residual:.3e}")

    residuals = {name: float(v) for name, v in identities.items()}
    residuals["marginal_deviation"] = deviation
    # The alternative formula R = I_q(X1,X2;Y) disagrees with the
    # consistency relations except when both unique atoms vanish; its
    # residual is reported, never adopted.
    residuals["alternative_r_formula"] = float(i_q - r)
    residuals["min_raw_atom"] = float(min(r, u1, u2, s))
    return PidAtoms(r=r, u1=u1, u2=u2, s=s, total=i_p, residuals=residuals)


def decompose_joint(p: JointPmf, opts: SolveOptions | None = None):
    """Solve for q_tilde and return (atoms, solve_result)."""
    result = solve(p, opts)
    atoms = compute_atoms(p, result.q_tilde)
    return atoms, result
