"""Cross-model, layer-wise, and training-dynamics statistics.

Pure transformations over profile collections plus deterministic file
emission: comma-separated tables (header row, '.' decimal, LF endings)
and a JSON chart bundle any plotting tool can consume. Every output is
accompanied by a provenance sidecar carrying the resolved configuration
and input manifest digests; identical inputs produce byte-identical
files.
"""
from __future__ import annotations

import itertools
import json
import math
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import stdtr

from .errors import (
    DegenerateSpectrumError,
    DomainError,
    FormatError,
    UndefinedCorrelationError,
)
from .pipeline import SampleRecord
from .solver import PidAtoms

ZERO_TOTAL = 1e-9
_CHECKPOINT_RE = re.compile(r"^s(\d+)c(\d+)$")


@dataclass(frozen=True)
class ProfileReport:
    """Atoms, shares, and accuracy for one (model, dataset[, layer/ckpt])."""

    model: str
    dataset: str
    atoms: PidAtoms
    shares: np.ndarray | None
    layer: int | None = None
    checkpoint: str | None = None
    accuracy: float | None = None
    accuracy_text_only: float | None = None
    family: str | None = None
    regime: str | None = None
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class CorrelationResult:
    rho: float
    p_value: float
    n: int


def pid_shares(atoms: PidAtoms) -> np.ndarray:
    """Each atom divided by the total; sums to 1 when defined."""
    if atoms.total <= ZERO_TOTAL:
        raise DegenerateSpectrumError(
            f"total information {atoms.total!r} is too small for shares")
    return atoms.as_array() / atoms.total


def d_vision(acc_multimodal: float, acc_text_only: float) -> float:
    """Accuracy drop when the image is removed (may be negative)."""
    for name, value in (("acc_multimodal", acc_multimodal),
                        ("acc_text_only", acc_text_only)):
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"{name} must lie in [0, 1], got {value!r}")
    return acc_multimodal - acc_text_only


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, ties receiving the average of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float], mode: str = "t") -> CorrelationResult:
    """Tie-corrected rank correlation with a two-sided p-value.

    mode "t" uses the Student-t approximation on n-2 degrees of freedom;
    mode "permutation" enumerates all orderings exactly (n <= 10 only).
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise DomainError("inputs must be equal-length vectors")
    n = len(xs)
    if n < 3:
        raise DomainError("spearman needs n >= 3")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise UndefinedCorrelationError("rank correlation of a constant input is undefined")

    rx = _average_ranks(xs)
    ry = _average_ranks(ys)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float((rx * rx).sum()) * float((ry * ry).sum()))
    rho = float((rx * ry).sum() / denom)
    rho = max(-1.0, min(1.0, rho))

    if mode == "t":
        if abs(rho) >= 1.0:
            p = 0.0
        else:
            t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
            p = float(2.0 * stdtr(n - 2, -abs(t)))
    elif mode == "permutation":
        if n > 10:
            raise DomainError("exact permutation mode is limited to n <= 10")
        xn = rx / math.sqrt(float((rx * rx).sum()))
        yn = ry / math.sqrt(float((ry * ry).sum()))
        hits = 0
        total = 0
        for perm in itertools.permutations(range(n)):
            r = float((xn * yn[list(perm)]).sum())
            if abs(r) >= abs(rho) - 1e-12:
                hits += 1
            total += 1
        p = hits / total
    else:
        raise DomainError(f"unknown p-value mode {mode!r}")
    return CorrelationResult(rho=rho, p_value=p, n=n)


def family_medians(reports: Sequence[ProfileReport]):
    """Median S and U2 shares per (family, regime) cell.

    Reports missing a family, regime, or defined shares are skipped with a
    warning; even-sized cells use the midpoint convention.
    """
    cells: dict[tuple[str, str], list[np.ndarray]] = {}
    for rep in reports:
        if rep.family is None or rep.regime is None or rep.shares is None:
            warnings.warn(f"skipping report {rep.model}/{rep.dataset}: "
                          "missing family, regime, or shares")
            continue
        cells.setdefault((rep.family, rep.regime), []).append(rep.shares)
    out = {}
    for key in sorted(cells):
        stacked = np.stack(cells[key])
        out[key] = (float(np.median(stacked[:, 3])), float(np.median(stacked[:, 2])))
    return out


def scaling_deltas(small: ProfileReport, mid: ProfileReport, large: ProfileReport):
    """Percentage-point changes (accuracy, S share, U2 share) for
    small->mid and mid->large."""
    rows = []
    for name, lo, hi in (("S->M", small, mid), ("M->VL", mid, large)):
        if lo.shares is None or hi.shares is None:
            raise DomainError("scaling_deltas needs defined shares on every report")
        d_acc = None
        if lo.accuracy is not None and hi.accuracy is not None:
            d_acc = 100.0 * (hi.accuracy - lo.accuracy)
        rows.append({
            "transition": name,
            "d_acc": d_acc,
            "d_s": 100.0 * (hi.shares[3] - lo.shares[3]),
            "d_u2": 100.0 * (hi.shares[2] - lo.shares[2]),
        })
    return rows


def trace(reports: Sequence[ProfileReport]):
    """Order reports by layer or checkpoint into trace rows.

    Layer traces sort numerically and mark gaps; checkpoint tags of the
    form s<stage>c<index> sort by (stage, index) and mark stage
    boundaries. Duplicate keys are a format error.
    """
    if not reports:
        raise DomainError("trace needs at least one report")
    layered = [r.layer is not None for r in reports]
    tagged = [r.checkpoint is not None for r in reports]
    if all(layered) and not any(tagged):
        keyed = sorted(reports, key=lambda r: r.layer)
        keys = [r.layer for r in keyed]
        if len(set(keys)) != len(keys):
            raise FormatError("duplicate layer keys in trace input")
        rows = []
        prev = None
        for rep in keyed:
            rows.append({"key": rep.layer, "report": rep,
                         "gap_before": prev is not None and rep.layer > prev + 1,
                         "stage_boundary": False})
            prev = rep.layer
        return rows
    if all(tagged) and not any(layered):
        keys = [r.checkpoint for r in reports]
        if len(set(keys)) != len(keys):
            raise FormatError("duplicate checkpoint keys in trace input")
        parsed = [_CHECKPOINT_RE.match(k) for k in keys]
        if all(parsed):
            decorated = sorted(
                (int(m.group(1)), int(m.group(2)), r)
                for m, r in zip(parsed, reports))
            rows = []
            prev_stage = None
            for stage, _idx, rep in decorated:
                rows.append({"key": rep.checkpoint, "report": rep,
                             "gap_before": False,
                             "stage_boundary": prev_stage is not None and stage != prev_stage})
                prev_stage = stage
            return rows
        keyed = sorted(reports, key=lambda r: r.checkpoint)
        return [{"key": r.checkpoint, "report": r, "gap_before": False,
                 "stage_boundary": False} for r in keyed]
    raise FormatError("trace input must be keyed uniformly by layer or by checkpoint")


def bootstrap_ci(values: Sequence[float], n_boot: int = 10000, seed: int = 0,
                 level: float = 0.95):
    """Seeded percentile bootstrap interval for the mean."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise DomainError("bootstrap needs at least 2 values")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(n_boot, values.size))
    means = values[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    return (float(np.quantile(means, alpha)), float(np.quantile(means, 1.0 - alpha)))


# ---------------------------------------------------------------------------
# Building reports from records
# ---------------------------------------------------------------------------

def accuracy_from_records(records: Sequence[SampleRecord], probe: str = "mm") -> float | None:
    """Strict-match accuracy over records carrying gold and a prediction.

    The text-only probe falls back to the argmax of the text scores when
    the exporter did not write pred_t.
    """
    hits, count = 0, 0
    for rec in records:
        if rec.gold is None:
            continue
        if probe == "mm":
            pred = rec.pred
        elif probe == "text":
            pred = rec.pred_t if rec.pred_t is not None else int(np.argmax(rec.scores_t))
        else:
            raise DomainError(f"unknown probe {probe!r}")
        if pred is None:
            continue
        hits += int(pred == rec.gold)
        count += 1
    return hits / count if count else None


def build_report(atoms: PidAtoms, records: Sequence[SampleRecord], *,
                 model: str, dataset: str, layer: int | None = None,
                 checkpoint: str | None = None, family: str | None = None,
                 regime: str | None = None) -> ProfileReport:
    """Assemble a profile row: shares when defined, accuracy when scored."""
    flags = []
    try:
        shares = pid_shares(atoms)
    except DegenerateSpectrumError:
        shares = None
        flags.append("degenerate-spectrum")
    if atoms.residuals and atoms.residuals.get("min_raw_atom", 0.0) < 0.0:
        flags.append("clamped-negative-atom")
    acc = accuracy_from_records(records, "mm")
    acc_text = accuracy_from_records(records, "text")
    if acc is not None and acc_text is not None and acc < acc_text:
        flags.append("negative-d-vision")
    return ProfileReport(model=model, dataset=dataset, atoms=atoms, shares=shares,
                         layer=layer, checkpoint=checkpoint, accuracy=acc,
                         accuracy_text_only=acc_text, family=family, regime=regime,
                         flags=tuple(flags))


# ---------------------------------------------------------------------------
# Deterministic emission
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_provenance(path: Path, provenance: Mapping) -> None:
    side = Path(path).with_name(Path(path).name + ".provenance.json")
    side.write_text(json.dumps(provenance, sort_keys=True, allow_nan=False) + "\n",
                    encoding="utf-8", newline="\n")


PROFILE_HEADER = ["model", "dataset", "layer", "checkpoint", "family", "regime",
                  "R", "U1", "U2", "S", "total",
                  "share_R", "share_U1", "share_U2", "share_S",
                  "accuracy", "accuracy_text_only", "d_vision", "min_raw_atom", "flags"]


def profile_row(rep: ProfileReport) -> list:
    clamped = rep.atoms.clamped()
    shares = [None] * 4 if rep.shares is None else [float(v) for v in rep.shares]
    dv = None
    if rep.accuracy is not None and rep.accuracy_text_only is not None:
        dv = d_vision(rep.accuracy, rep.accuracy_text_only)
    min_raw = None
    if rep.atoms.residuals:
        min_raw = rep.atoms.residuals.get("min_raw_atom")
    return [rep.model, rep.dataset, rep.layer, rep.checkpoint, rep.family, rep.regime,
            clamped.r, clamped.u1, clamped.u2, clamped.s, rep.atoms.total,
            shares[0], shares[1], shares[2], shares[3],
            rep.accuracy, rep.accuracy_text_only, dv, min_raw,
            ";".join(rep.flags)]


def write_profile_csv(reports: Sequence[ProfileReport], path, provenance: Mapping) -> None:
    rows = [profile_row(r) for r in reports]
    _write_csv(Path(path), PROFILE_HEADER, rows)
    write_provenance(Path(path), provenance)


def write_correlations_csv(rows: Sequence[Mapping], path, provenance: Mapping) -> None:
    header = ["dataset", "target", "n", "rho", "p_value"]
    body = [[r["dataset"], r["target"], r["n"], r["rho"], r["p_value"]] for r in rows]
    _write_csv(Path(path), header, body)
    write_provenance(Path(path), provenance)


def write_trace_csv(rows: Sequence[Mapping], path, provenance: Mapping) -> None:
    header = ["key", "stage_boundary", "gap_before"] + PROFILE_HEADER
    body = []
    for row in rows:
        body.append([row["key"], int(row["stage_boundary"]), int(row["gap_before"])]
                    + profile_row(row["report"]))
    _write_csv(Path(path), header, body)
    write_provenance(Path(path), provenance)


def write_chart_bundle(charts: Sequence[Mapping], path, provenance: Mapping) -> None:
    """Chart bundle: named series with x and y arrays, JSON-encoded."""
    payload = {"charts": list(charts), "provenance": dict(provenance)}
    Path(path).write_text(json.dumps(payload, sort_keys=True, allow_nan=False) + "\n",
                          encoding="utf-8", newline="\n")
