"""Calibrated noise for modality masking, plus the statistics pass.

A masked modality's embedding span is replaced by vectors drawn i.i.d.
per position from a diagonal Gaussian whose per-dimension mean and
standard deviation were pre-computed over that modality's embeddings
across the dataset. The statistics file is the primary toolkit's
ModalityStats JSON schema.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class ModalityStats:
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
        return cls(modality=data["modality"],
                   mu=np.asarray(data["mu"], dtype=float),
                   sigma=np.asarray(data["sigma"], dtype=float),
                   count=int(data["count"]),
                   floored_dims=tuple(data["floored_dims"]))

    @classmethod
    def load(cls, path) -> "ModalityStats":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def compute_stats(embedding_rows: np.ndarray, modality: str) -> ModalityStats:
    """Unbiased per-dimension mean/std over all token embeddings of one
    modality, with degenerate dimensions floored and flagged."""
    rows = np.asarray(embedding_rows, dtype=float)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError("need at least 2 embedding rows")
    mu = rows.mean(axis=0)
    sigma = rows.std(axis=0, ddof=1)
    floored = tuple(int(i) for i in np.flatnonzero(sigma < SIGMA_FLOOR))
    return ModalityStats(modality=modality, mu=mu,
                         sigma=np.maximum(sigma, SIGMA_FLOOR),
                         count=rows.shape[0], floored_dims=floored)


def noise_sequence(stats: ModalityStats, length: int,
                   rng: np.random.Generator) -> np.ndarray:
    """A sequence of i.i.d. draws from N(mu, diag(sigma^2))."""
    return stats.mu + stats.sigma * rng.standard_normal((length, len(stats.mu)))
