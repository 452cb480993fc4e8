"""Ground-truth generators and an independent brute-force PID oracle.

The oracle minimizes I_Q(X1,X2;Y) by dense grid search with local
refinement over the per-label transportation polytopes. It shares no
optimization machinery with the mirror-descent solver, so the two paths
check each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import AXIS_X1, AXIS_X2, AXIS_Y, JointPmf, entropy_table
from .errors import CapabilityError, DomainError
from .pipeline import SampleRecord, threshold_regularize
from .solver import PidAtoms

GATES = ("XOR", "AND", "OR", "COPY", "UNQ1", "UNQ2")

ORACLE_MAX_DIMS = (4, 4, 4)
ORACLE_POINT_BUDGET = 250_000
ORACLE_REFINE_ROUNDS = 2
ORACLE_REFINE_SHRINK = 10.0


@dataclass(frozen=True)
class GateSpec:
    """A two-input binary gate with optional label-flip noise."""

    gate: str
    flip_noise: float = 0.0
    n_samples: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.gate.upper() not in GATES:
            raise DomainError(f"unknown gate {self.gate!r}; expected one of {GATES}")
        if not 0.0 <= self.flip_noise < 0.5:
            raise DomainError("flip_noise must lie in [0, 0.5)")
        object.__setattr__(self, "gate", self.gate.upper())


@dataclass(frozen=True)
class ContinuousSpec:
    """Gaussian-cluster features with a planted dependence structure."""

    structure: str
    dim: int = 4
    cluster_separation: float = 6.0
    n_samples: int = 2000
    seed: int = 0

    def __post_init__(self):
        structures = ("synergy", "redundancy", "unique1", "unique2", "independent")
        if self.structure not in structures:
            raise DomainError(f"unknown structure {self.structure!r}")
        if self.dim < 1 or self.n_samples < 1:
            raise DomainError("dim and n_samples must be >= 1")


def gate_joint(spec: GateSpec) -> JointPmf:
    """Exact 2x2x2 joint of the gate, with Y flipped w.p. flip_noise."""
    table = np.zeros((2, 2, 2))
    if spec.gate == "COPY":
        table[0, 0, 0] = 0.5
        table[1, 1, 1] = 0.5
    else:
        for x1 in (0, 1):
            for x2 in (0, 1):
                if spec.gate == "XOR":
                    y = x1 ^ x2
                elif spec.gate == "AND":
                    y = x1 & x2
                elif spec.gate == "OR":
                    y = x1 | x2
                elif spec.gate == "UNQ1":
                    y = x1
                else:  # UNQ2
                    y = x2
                table[x1, x2, y] = 0.25
    if spec.flip_noise > 0.0:
        eps = spec.flip_noise
        table = (1.0 - eps) * table + eps * table[:, :, ::-1]
    return JointPmf(table)


def _mi_batch(cond: np.ndarray, py: np.ndarray) -> np.ndarray:
    """I(X1,X2;Y) in bits for a batch of per-label conditionals.

    cond has shape (batch, n1, n2, k); entry [b, :, :, y] is Q(x1,x2|y).
    """
    joint = cond * py[None, None, None, :]
    mix = joint.sum(axis=3, keepdims=True)
    mask = joint > 1e-15
    safe_cond = np.where(mask, cond, 1.0)
    safe_mix = np.where(mix > 1e-15, mix, 1.0)
    term = joint * (np.log2(safe_cond) - np.log2(safe_mix))
    return np.where(mask, term, 0.0).sum(axis=(1, 2, 3))


def _plug_in_i(table: np.ndarray, axes_a, axes_b) -> float:
    """Plug-in mutual information between two axis groups of a 3-axis table."""
    def marg(axes):
        drop = tuple(a for a in (0, 1, 2) if a not in axes)
        return table.sum(axis=drop)

    h_a = entropy_table(marg(axes_a))
    h_b = entropy_table(marg(axes_b))
    h_ab = entropy_table(marg(tuple(sorted(axes_a + axes_b))))
    return max(0.0, h_a + h_b - h_ab)


class _PolytopeGrid:
    """Free-coordinate parameterization of one label's coupling polytope."""

    def __init__(self, r: np.ndarray, c: np.ndarray):
        self.rs = np.flatnonzero(r > 0.0)
        self.cs = np.flatnonzero(c > 0.0)
        self.r = r[self.rs]
        self.c = c[self.cs]
        m, l = len(self.rs), len(self.cs)
        self.shape = (m, l)
        self.n_free = (m - 1) * (l - 1) if m > 1 and l > 1 else 0
        if self.n_free:
            self.upper = np.minimum.outer(self.r[:-1], self.c[:-1]).ravel()
        else:
            self.upper = np.zeros(0)

    def couplings(self, free: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Full support-submatrix couplings for a batch of free vectors.

        Returns (batch of (m, l) couplings, feasibility mask).
        """
        b = free.shape[0]
        m, l = self.shape
        sub = np.zeros((b, m, l))
        if self.n_free:
            block = free.reshape(b, m - 1, l - 1)
            sub[:, : m - 1, : l - 1] = block
            sub[:, : m - 1, l - 1] = self.r[: m - 1] - block.sum(axis=2)
            sub[:, m - 1, : l - 1] = self.c[: l - 1] - block.sum(axis=1)
            sub[:, m - 1, l - 1] = self.r[m - 1] - sub[:, m - 1, : l - 1].sum(axis=1)
        else:
            # A single live row or column leaves one feasible coupling.
            sub[:] = np.outer(self.r, self.c)
        feasible = (sub >= -1e-12).all(axis=(1, 2))
        return np.clip(sub, 0.0, None), feasible


def brute_force_pid(p: JointPmf, grid_resolution: int = 50) -> PidAtoms:
    """PID atoms by exhaustive search, independent of the descent solver.

    Dense product grid over every free coupling coordinate, followed by
    two rounds of 10x local refinement around the incumbent. Capability
    is capped at 4x4x4 tables; above a few free coordinates the per-axis
    resolution is reduced to keep the grid within a fixed budget.
    """
    n1, n2, k = p.dims
    if (n1, n2, k) > ORACLE_MAX_DIMS:
        raise CapabilityError(f"oracle handles dims <= {ORACLE_MAX_DIMS}, got {p.dims}")
    if grid_resolution < 3:
        raise DomainError("grid_resolution must be >= 3")

    table = p.table
    py = table.sum(axis=(0, 1))
    live = np.flatnonzero(py > 0.0)
    grids = []
    for y in live:
        cond_y = table[:, :, y] / py[y]
        grids.append(_PolytopeGrid(cond_y.sum(axis=1), cond_y.sum(axis=0)))

    offsets = np.cumsum([0] + [g.n_free for g in grids])
    n_free = int(offsets[-1])

    def assemble(free: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        b = free.shape[0]
        cond = np.zeros((b, n1, n2, k))
        ok = np.ones(b, dtype=bool)
        for idx, y in enumerate(live):
            g = grids[idx]
            sub, feasible = g.couplings(free[:, offsets[idx]: offsets[idx + 1]])
            ok &= feasible
            cond[:, g.rs[:, None], g.cs[None, :], y] = sub
        return cond, ok

    if n_free == 0:
        best_free = np.zeros((1, 0))
        cond, _ = assemble(best_free)
        best_obj = float(_mi_batch(cond, py)[0])
    else:
        res = min(grid_resolution, max(3, int(ORACLE_POINT_BUDGET ** (1.0 / n_free))))
        lows = np.zeros(n_free)
        highs = np.concatenate([g.upper for g in grids])
        best_free = None
        best_obj = np.inf
        for _round in range(1 + ORACLE_REFINE_ROUNDS):
            axes = [np.linspace(lows[d], highs[d], res) for d in range(n_free)]
            mesh = np.meshgrid(*axes, indexing="ij")
            points = np.stack([m.ravel() for m in mesh], axis=1)
            if best_free is not None:
                points = np.vstack([points, best_free])
            for start in range(0, points.shape[0], 8192):
                chunk = points[start: start + 8192]
                cond, ok = assemble(chunk)
                objs = _mi_batch(cond, py)
                objs[~ok] = np.inf
                j = int(np.argmin(objs))
                if objs[j] < best_obj:
                    best_obj = float(objs[j])
                    best_free = chunk[j: j + 1].copy()
            width = (highs - lows) / ORACLE_REFINE_SHRINK
            lows = np.maximum(0.0, best_free[0] - width / 2)
            highs = np.minimum(np.concatenate([g.upper for g in grids]), best_free[0] + width / 2)

    i1 = _plug_in_i(table, (AXIS_X1,), (AXIS_Y,))
    i2 = _plug_in_i(table, (AXIS_X2,), (AXIS_Y,))
    i_p = _plug_in_i(table, (AXIS_X1, AXIS_X2), (AXIS_Y,))
    i_q = min(best_obj, i_p)  # P itself is feasible

    s = i_p - i_q
    u1 = i_q - i2
    u2 = i_q - i1
    r = i1 - u1
    return PidAtoms(r=r, u1=u1, u2=u2, s=s, total=i_p,
                    residuals={"oracle_objective": i_q, "free_coordinates": n_free})


def _gate_record(spec, joint, x1, x2, y, index) -> SampleRecord:
    table = joint.table
    p_y_given_pair = table[x1, x2, :] / table[x1, x2, :].sum()
    m1 = table.sum(axis=(1,))  # (x1, y)
    m2 = table.sum(axis=(0,))  # (x2, y)
    p_y_given_x1 = m1[x1] / m1[x1].sum()
    p_y_given_x2 = m2[x2] / m2[x2].sum()
    return SampleRecord(
        id=f"{spec.gate.lower()}-{index:06d}",
        dataset=f"gate-{spec.gate.lower()}",
        model="synthetic",
        x1=np.array([float(x1)]),
        x2=np.array([float(x2)]),
        scores_mm=p_y_given_pair,
        scores_v=p_y_given_x1,
        scores_t=p_y_given_x2,
        gold=int(y),
        pred=int(np.argmax(p_y_given_pair)),
        pred_v=int(np.argmax(p_y_given_x1)),
        pred_t=int(np.argmax(p_y_given_x2)),
    )


def gate_records(spec: GateSpec) -> list[SampleRecord]:
    """Sample wire-format records from a gate joint; scores carry the
    gate's exact conditionals, so every pipeline operation applies."""
    if spec.n_samples < 1:
        raise DomainError("gate_records needs n_samples >= 1")
    joint = gate_joint(spec)
    rng = np.random.default_rng(spec.seed)
    flat = joint.table.ravel()
    draws = rng.choice(flat.size, size=spec.n_samples, p=flat / flat.sum())
    cells = np.array(np.unravel_index(draws, joint.dims)).T
    return [_gate_record(spec, joint, x1, x2, y, i) for i, (x1, x2, y) in enumerate(cells)]


def gen_continuous(spec: ContinuousSpec) -> list[SampleRecord]:
    """Seeded Gaussian-cluster records with a planted PID structure.

    Each modality's feature is a unit-variance Gaussian around one of two
    cluster centers separated by ``cluster_separation``; the label depends
    on both latent bits, either bit, or neither, per ``structure``. Probe
    score vectors are the exact generating conditionals.
    """
    rng = np.random.default_rng(spec.seed)
    n, dim, sep = spec.n_samples, spec.dim, spec.cluster_separation
    direction = np.ones(dim) / np.sqrt(dim)

    z1 = rng.integers(0, 2, size=n)
    z2 = z1.copy() if spec.structure == "redundancy" else rng.integers(0, 2, size=n)
    if spec.structure == "synergy":
        y = z1 ^ z2
    elif spec.structure in ("redundancy", "unique1"):
        y = z1.copy()
    elif spec.structure == "unique2":
        y = z2.copy()
    else:
        y = rng.integers(0, 2, size=n)

    x1 = (z1[:, None] - 0.5) * sep * direction + rng.standard_normal((n, dim))
    x2 = (z2[:, None] - 0.5) * sep * direction + rng.standard_normal((n, dim))

    logit1 = sep * (x1 @ direction)
    logit2 = sep * (x2 @ direction)
    p1 = expit(logit1)
    p2 = expit(logit2)
    half = np.full(n, 0.5)

    if spec.structure == "synergy":
        p_mm = p1 * (1 - p2) + (1 - p1) * p2
        p_v, p_t = half, half
    elif spec.structure == "redundancy":
        p_mm = expit(logit1 + logit2)
        p_v, p_t = p1, p2
    elif spec.structure == "unique1":
        p_mm, p_v, p_t = p1, p1, half
    elif spec.structure == "unique2":
        p_mm, p_v, p_t = p2, half, p2
    else:
        p_mm, p_v, p_t = half, half, half

    records = []
    dataset = f"synthetic-{spec.structure}"
    for i in range(n):
        mm = np.array([1.0 - p_mm[i], p_mm[i]])
        sv = np.array([1.0 - p_v[i], p_v[i]])
        st = np.array([1.0 - p_t[i], p_t[i]])
        records.append(SampleRecord(
            id=f"{spec.structure}-{i:06d}",
            dataset=dataset,
            model="synthetic",
            x1=x1[i],
            x2=x2[i],
            scores_mm=mm,
            scores_v=sv,
            scores_t=st,
            gold=int(y[i]),
            pred=int(np.argmax(mm)),
            pred_v=int(np.argmax(sv)),
            pred_t=int(np.argmax(st)),
        ))
    return records


def discretize_features(records: list[SampleRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Collapse each feature vector to one bit: per-dimension median split,
    then majority sign across dimensions (sum of signs breaks ties).

    When a dimension's median coincides with its extreme value (heavy
    ties, e.g. binary features) the split point falls back to the
    midpoint of the range, so neither side swallows the whole sample.
    """
    def bits(features: np.ndarray) -> np.ndarray:
        med = np.median(features, axis=0)
        lo = features.min(axis=0)
        hi = features.max(axis=0)
        degenerate = (med <= lo) | (med >= hi)
        med = np.where(degenerate, (lo + hi) / 2.0, med)
        signs = np.sign(features - med)
        vote = signs.sum(axis=1)
        tie = vote == 0
        vote[tie] = np.where(signs[tie, 0] >= 0, 1.0, -1.0)
        return (vote > 0).astype(int)

    f1 = np.stack([r.x1 for r in records])
    f2 = np.stack([r.x2 for r in records])
    return bits(f1), bits(f2)


def discretized_oracle_atoms(records: list[SampleRecord], tau: float = 0.3,
                             grid_resolution: int = 50) -> PidAtoms:
    """Oracle atoms of the median-split discretization of a record set.

    The joint over (bit1, bit2, y) is assembled from the regularized
    multimodal predictive distributions, then decomposed exhaustively.
    """
    if not records:
        raise DomainError("discretized_oracle_atoms: empty record set")
    b1, b2 = discretize_features(records)
    k = len(records[0].scores_mm)
    joint = np.zeros((2, 2, k))
    for rec, i, j in zip(records, b1, b2):
        joint[i, j] += threshold_regularize(rec.scores_mm, tau).vector
    joint /= len(records)
    return brute_force_pid(JointPmf(joint), grid_resolution=grid_resolution)
