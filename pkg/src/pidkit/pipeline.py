"""Wire format plus the probe-data adaptations.

Records are one JSON object per line (UTF-8, LF, decimal floats, no
non-finite values) with a sidecar manifest describing the export. The
float text written by ``json`` is the shortest round-tripping decimal, so
serialize -> parse is bit-exact.

The same module holds candidate-score normalization, confidence-threshold
regularization, soft marginal aggregation, token pooling, modality noise
statistics, and the deterministic train/test split protocol.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Pmf
from .errors import DomainError, FormatError

SCHEMA_VERSION = 1
DEFAULT_TAU = 0.3
SIGMA_FLOOR = 1e-8
SIDECAR_DIM_THRESHOLD = 4096
POOL_MODES = ("mean", "last", "max")

_RECORD_FIELDS = ("id", "dataset", "model", "layer", "checkpoint", "x1", "x2",
                  "scores_mm", "scores_v", "scores_t", "gold", "pred",
                  "pred_v", "pred_t")


@dataclass
class SampleRecord:
    """One exported probe: pooled features plus three candidate-score vectors."""

    id: str
    dataset: str
    model: str
    x1: np.ndarray
    x2: np.ndarray
    scores_mm: np.ndarray
    scores_v: np.ndarray
    scores_t: np.ndarray
    layer: int | None = None
    checkpoint: str | None = None
    gold: int | None = None
    pred: int | None = None
    pred_v: int | None = None
    pred_t: int | None = None

    def __post_init__(self):
        for name in ("x1", "x2", "scores_mm", "scores_v", "scores_t"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 1:
                raise FormatError(f"record {self.id}: {name} must be a flat vector")
            if not np.all(np.isfinite(arr)):
                raise FormatError(f"record {self.id}: non-finite values in {name}")
            setattr(self, name, arr)
        k = len(self.scores_mm)
        if not 2 <= k <= 26:
            raise FormatError(f"record {self.id}: candidate count {k} outside [2, 26]")
        if len(self.scores_v) != k or len(self.scores_t) != k:
            raise FormatError(f"record {self.id}: score vectors disagree on K")
        for name in ("scores_mm", "scores_v", "scores_t"):
            if np.any(getattr(self, name) < 0):
                raise FormatError(f"record {self.id}: negative scores in {name}")
        for name in ("gold", "pred", "pred_v", "pred_t"):
            value = getattr(self, name)
            if value is not None and not 0 <= int(value) < k:
                raise FormatError(f"record {self.id}: {name}={value} outside [0, {k})")

    @property
    def k(self) -> int:
        return len(self.scores_mm)


@dataclass
class Manifest:
    """Sidecar description of a record file."""

    dataset: str
    k: int
    x1_dim: int
    x2_dim: int
    pooling: str
    model: str
    exporter: str
    n_records: int
    schema_version: int = SCHEMA_VERSION
    family: str | None = None
    regime: str | None = None
    feature_sidecar: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        data = json.loads(text)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise FormatError(f"manifest has unknown fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise FormatError(f"manifest is missing fields: {exc}") from exc

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def manifest_for(records: Sequence[SampleRecord], pooling: str = "mean",
                 exporter: str = "pidkit-synth", family: str | None = None,
                 regime: str | None = None) -> Manifest:
    if not records:
        raise DomainError("cannot build a manifest for zero records")
    first = records[0]
    return Manifest(
        dataset=first.dataset, k=first.k, x1_dim=len(first.x1),
        x2_dim=len(first.x2), pooling=pooling, model=first.model,
        exporter=exporter, n_records=len(records), family=family, regime=regime,
    )


def manifest_path(records_path: Path) -> Path:
    records_path = Path(records_path)
    return records_path.with_name(records_path.stem + ".manifest.json")


def _record_to_obj(rec: SampleRecord, inline_features: bool) -> dict:
    obj = {
        "id": rec.id, "dataset": rec.dataset, "model": rec.model,
        "layer": rec.layer, "checkpoint": rec.checkpoint,
        "scores_mm": rec.scores_mm.tolist(), "scores_v": rec.scores_v.tolist(),
        "scores_t": rec.scores_t.tolist(), "gold": rec.gold, "pred": rec.pred,
        "pred_v": rec.pred_v, "pred_t": rec.pred_t,
    }
    if inline_features:
        obj["x1"] = rec.x1.tolist()
        obj["x2"] = rec.x2.tolist()
    else:
        obj["x1"] = None
        obj["x2"] = None
    return obj


def write_records(records: Sequence[SampleRecord], path, manifest: Manifest | None = None,
                  use_sidecar: bool | None = None) -> Manifest:
    """Write records as JSONL plus a manifest sidecar.

    Features move to a binary sidecar (little-endian float32, row-major,
    with a JSON index) when a dimension exceeds 4096 or when requested.
    """
    path = Path(path)
    records = list(records)
    manifest = manifest or manifest_for(records)
    if manifest.n_records != len(records):
        raise FormatError("manifest n_records disagrees with record count")
    if use_sidecar is None:
        use_sidecar = max(manifest.x1_dim, manifest.x2_dim) > SIDECAR_DIM_THRESHOLD
    if use_sidecar:
        manifest.feature_sidecar = path.stem + ".features.f32"
        _write_feature_sidecar(records, path.with_name(manifest.feature_sidecar))
    else:
        manifest.feature_sidecar = None
    lines = []
    for rec in records:
        try:
            lines.append(json.dumps(_record_to_obj(rec, not use_sidecar),
                                    sort_keys=True, allow_nan=False))
        except ValueError as exc:
            raise FormatError(f"record {rec.id}: {exc}") from exc
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest_path(path).write_text(manifest.to_json() + "\n", encoding="utf-8")
    return manifest


def _write_feature_sidecar(records: Sequence[SampleRecord], blob_path: Path) -> None:
    index = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for rec in records:
            for arr in (rec.x1, rec.x2):
                data = np.asarray(arr, dtype="<f4").tobytes()
                fh.write(data)
            index.append({"id": rec.id, "offset": offset,
                          "x1_len": len(rec.x1), "x2_len": len(rec.x2)})
            offset += 4 * (len(rec.x1) + len(rec.x2))
    idx_path = blob_path.with_suffix(".idx.json")
    idx_path.write_text(json.dumps(index, sort_keys=True) + "\n", encoding="utf-8")


def _read_feature_sidecar(blob_path: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    idx_path = blob_path.with_suffix(".idx.json")
    if not blob_path.exists() or not idx_path.exists():
        raise FormatError(f"feature sidecar missing: {blob_path}")
    index = json.loads(idx_path.read_text(encoding="utf-8"))
    blob = blob_path.read_bytes()
    out = {}
    for entry in index:
        start = entry["offset"]
        n1, n2 = entry["x1_len"], entry["x2_len"]
        x1 = np.frombuffer(blob, dtype="<f4", count=n1, offset=start).astype(float)
        x2 = np.frombuffer(blob, dtype="<f4", count=n2, offset=start + 4 * n1).astype(float)
        out[entry["id"]] = (x1, x2)
    return out


def read_records(path) -> tuple[list[SampleRecord], Manifest]:
    """Parse a JSONL record file and its manifest; errors carry line numbers."""
    path = Path(path)
    mpath = manifest_path(path)
    if not mpath.exists():
        raise FormatError(f"manifest not found: {mpath}")
    manifest = Manifest.from_json(mpath.read_text(encoding="utf-8"))
    sidecar = None
    if manifest.feature_sidecar:
        sidecar = _read_feature_sidecar(path.with_name(manifest.feature_sidecar))

    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line, parse_constant=_reject_constant)
            except ValueError as exc:
                raise FormatError(f"{path.name} line {lineno}: {exc}") from exc
            try:
                rec = _record_from_obj(obj, sidecar)
            except (FormatError, KeyError, TypeError) as exc:
                raise FormatError(f"{path.name} line {lineno}: {exc}") from exc
            records.append(rec)
    if len(records) != manifest.n_records:
        raise FormatError(
            f"{path.name}: manifest promises {manifest.n_records} records, found {len(records)}")
    _check_against_manifest(records, manifest, path.name)
    return records, manifest


def _reject_constant(name):
    raise FormatError(f"non-finite constant {name!r} is forbidden")


def _record_from_obj(obj: dict, sidecar) -> SampleRecord:
    unknown = set(obj) - set(_RECORD_FIELDS)
    if unknown:
        raise FormatError(f"unknown fields {sorted(unknown)}")
    missing = [f for f in _RECORD_FIELDS if f not in obj]
    if missing:
        raise FormatError(f"missing fields {missing}")
    x1, x2 = obj["x1"], obj["x2"]
    if x1 is None or x2 is None:
        if sidecar is None:
            raise FormatError("features are null but no sidecar is declared")
        x1, x2 = sidecar[obj["id"]]
    return SampleRecord(
        id=obj["id"], dataset=obj["dataset"], model=obj["model"],
        layer=obj["layer"], checkpoint=obj["checkpoint"],
        x1=x1, x2=x2, scores_mm=obj["scores_mm"], scores_v=obj["scores_v"],
        scores_t=obj["scores_t"], gold=obj["gold"], pred=obj["pred"],
        pred_v=obj["pred_v"], pred_t=obj["pred_t"],
    )


def _check_against_manifest(records, manifest, name):
    for rec in records:
        if rec.k != manifest.k:
            raise FormatError(f"{name}: record {rec.id} has K={rec.k}, manifest K={manifest.k}")
        if len(rec.x1) != manifest.x1_dim or len(rec.x2) != manifest.x2_dim:
            raise FormatError(f"{name}: record {rec.id} feature dims disagree with manifest")


def validate_records(path) -> list[str]:
    """Collect wire-format problems (empty list means the file is valid)."""
    try:
        read_records(path)
    except FormatError as exc:
        return [str(exc)]
    return []


# ---------------------------------------------------------------------------
# Candidate scoring and regularization
# ---------------------------------------------------------------------------

def length_normalized_score(candidate_loglik: float, token_count: int) -> float:
    """exp(loglik / token_count): the per-token geometric-mean likelihood."""
    if token_count < 1:
        raise DomainError("token_count must be >= 1")
    if candidate_loglik > 0:
        raise DomainError("log-likelihood must be <= 0")
    return math.exp(candidate_loglik / token_count)


@dataclass(frozen=True)
class RegularizedPrediction:
    """A candidate distribution after confidence thresholding."""

    probs: Pmf
    fallback_used: bool

    @property
    def vector(self) -> np.ndarray:
        return self.probs.probs


def threshold_regularize(scores, tau: float) -> RegularizedPrediction:
    """Renormalize candidate scores, or fall back to uniform.

    If the raw scores sum to at least ``tau`` they are renormalized;
    otherwise the uniform distribution over the K candidates is returned
    with ``fallback_used`` set. An all-zero score vector falls back to
    uniform even at tau = 0.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1 or len(scores) < 2:
        raise DomainError("scores must be a vector with K >= 2")
    if np.any(scores < 0) or not np.all(np.isfinite(scores)):
        raise DomainError("scores must be finite and non-negative")
    total = float(scores.sum())
    k = len(scores)
    if total >= tau and total > 0.0:
        return RegularizedPrediction(Pmf(scores / total), False)
    return RegularizedPrediction(Pmf.uniform(k), True)


def aggregate_marginal(preds: Sequence[RegularizedPrediction]) -> Pmf:
    """Arithmetic mean of regularized predictions (soft aggregation)."""
    if not preds:
        raise DomainError("aggregate_marginal needs at least one prediction")
    ks = {len(p.probs) for p in preds}
    if len(ks) != 1:
        raise DomainError(f"mixed candidate counts: {sorted(ks)}")
    stacked = np.stack([p.vector for p in preds])
    return Pmf(stacked.mean(axis=0))


def pool_tokens(tokens: Sequence[np.ndarray], mode: str) -> np.ndarray:
    """Summarize a token-embedding sequence to one vector."""
    if mode not in POOL_MODES:
        raise DomainError(f"unknown pooling mode {mode!r}")
    if len(tokens) == 0:
        raise DomainError("cannot pool an empty token sequence")
    stacked = np.stack([np.asarray(t, dtype=float) for t in tokens])
    if stacked.ndim != 2:
        raise DomainError("tokens must share one dimension")
    if mode == "mean":
        return stacked.mean(axis=0)
    if mode == "last":
        return stacked[-1].copy()
    return stacked.max(axis=0)


# ---------------------------------------------------------------------------
# Modality statistics and splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModalityStats:
    """Per-dimension mean and standard deviation of a modality's features."""

    modality: str
    mu: np.ndarray
    sigma: np.ndarray
    count: int
    floored_dims: tuple[int, ...] = ()

    def to_json(self) -> str:
        return json.dumps({
            "modality": self.modality, "count": self.count,
            "mu": np.asarray(self.mu).tolist(),
            "sigma": np.asarray(self.sigma).tolist(),
            "floored_dims": list(self.floored_dims),
        }, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "ModalityStats":
        data = json.loads(text)
        return cls(modality=data["modality"], mu=np.asarray(data["mu"], dtype=float),
                   sigma=np.asarray(data["sigma"], dtype=float), count=int(data["count"]),
                   floored_dims=tuple(data["floored_dims"]))


def compute_modality_stats(records: Sequence[SampleRecord], modality: str) -> ModalityStats:
    """Unbiased per-dimension mean/std of one modality across records.

    Dimensions whose deviation falls below 1e-8 are floored there and
    flagged, so downstream noise generation never degenerates.
    """
    if modality not in ("vision", "text"):
        raise DomainError(f"modality must be 'vision' or 'text', got {modality!r}")
    if len(records) < 2:
        raise DomainError("need at least 2 records for modality stats")
    attr = "x1" if modality == "vision" else "x2"
    dims = {len(getattr(r, attr)) for r in records}
    if len(dims) != 1:
        raise FormatError(f"feature dimension varies across records: {sorted(dims)}")
    feats = np.stack([getattr(r, attr) for r in records])
    mu = feats.mean(axis=0)
    sigma = feats.std(axis=0, ddof=1)
    floored = tuple(int(i) for i in np.flatnonzero(sigma < SIGMA_FLOOR))
    sigma = np.maximum(sigma, SIGMA_FLOOR)
    return ModalityStats(modality=modality, mu=mu, sigma=sigma,
                         count=len(records), floored_dims=floored)


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic train:test partition (default 3:1)."""

    ratio: tuple[int, int] = (3, 1)
    seed: int = 0

    def __post_init__(self):
        a, b = self.ratio
        if a < 1 or b < 1:
            raise DomainError("both ratio parts must be >= 1")


def split_dataset(records: Sequence[SampleRecord], spec: SplitSpec):
    """Seeded shuffle, then train = floor(n * a / (a+b)) and test the rest.

    This floor-to-train rule reproduces the published split sizes
    (e.g. 4329 -> 3246/1083, 2150 -> 1612/538).
    """
    n = len(records)
    a, b = spec.ratio
    if n < a + b:
        raise DomainError(f"need at least {a + b} records for a {a}:{b} split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = (n * a) // (a + b)
    if n_train == 0 or n_train == n:
        raise DomainError("split would leave one side empty")
    train = [records[i] for i in order[:n_train]]
    test = [records[i] for i in order[n_train:]]
    return train, test
