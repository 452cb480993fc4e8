"""Probe passes and wire-format emission.

For every dataset item the exporter runs a standard multimodal pass and
two noise-masked unimodal passes, scores each candidate option by
teacher forcing, pools the input token embeddings of each modality into
the feature vectors, and writes one record per item in the analysis
toolkit's JSONL wire format with its manifest sidecar.

Masking rule for this model family: the image span is exactly the
patch-embedding positions, the text span is exactly the prompt's
character positions; nothing else is replaced. Per-record failures are
collected in an errors sidecar, never silently dropped.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import VqaItem, load_dataset
from .model import TinyLvlm
from .noise import ModalityStats, compute_stats, noise_sequence
from .scoring import first_token_prediction, option_letter, score_candidates

EXPORTER_VERSION = "probe-exporter 0.1.0"
SCHEMA_VERSION = 1

INSTRUCTION = ("Please select the correct answer from the options above. "
               "You must answer with the letter of the correct option only.")
DEFAULT_TEMPLATE = ("Question: {question}\n{options}\n"
                    + INSTRUCTION + "\nAnswer: ")

PROBES = ("multimodal", "vision", "text")
POOL_MODES = ("mean", "last", "max")


class ExportError(ValueError):
    pass


@dataclass
class ExportJob:
    """One export run: model, dataset, probes, pooling, taps, stats."""

    model_path: str
    dataset_dir: str
    out_path: str
    model_id: str = "tiny-lvlm"
    dataset_name: str = "demo"
    template: str = DEFAULT_TEMPLATE
    probes: tuple[str, ...] = PROBES
    pooling: str = "mean"
    layer_taps: tuple[int, ...] | None = None
    stats_vision_path: str | None = None
    stats_text_path: str | None = None
    seed: int = 0
    checkpoint_tag: str | None = None

    def __post_init__(self):
        if INSTRUCTION not in self.template:
            raise ExportError("prompt template must contain the fixed answer instruction")
        if self.pooling not in POOL_MODES:
            raise ExportError(f"unknown pooling mode {self.pooling!r}")
        unknown = set(self.probes) - set(PROBES)
        if unknown:
            raise ExportError(f"unknown probes: {sorted(unknown)}")
        needs_stats = {"vision", "text"} & set(self.probes)
        if needs_stats and (self.stats_vision_path is None or self.stats_text_path is None):
            raise ExportError("unimodal probes need both modality stats files")


def render_prompt(template: str, item: VqaItem) -> str:
    options = "\n".join(f"{option_letter(i)}. {text}"
                        for i, text in enumerate(item.options))
    return template.format(question=item.question, options=options)


def pool(tokens: np.ndarray, mode: str) -> np.ndarray:
    if mode == "mean":
        return tokens.mean(axis=0)
    if mode == "last":
        return tokens[-1].copy()
    return tokens.max(axis=0)


def _probe_rng(seed: int, item_index: int, probe: str) -> np.random.Generator:
    return np.random.default_rng([seed, item_index, PROBES.index(probe)])


def _candidates(item: VqaItem) -> list[str]:
    return [option_letter(i) for i in range(len(item.options))]


def export_item(model: TinyLvlm, job: ExportJob, item: VqaItem, index: int,
                stats_vision: ModalityStats | None,
                stats_text: ModalityStats | None,
                tap: int | None = None) -> dict:
    """One wire-format record as a JSON-ready dict."""
    vis = model.image_embeddings(item.image)
    text = model.text_embeddings(render_prompt(job.template, item))
    candidates = _candidates(item)
    k = len(candidates)

    record = {
        "id": item.id,
        "dataset": job.dataset_name,
        "model": job.model_id,
        "layer": tap,
        "checkpoint": job.checkpoint_tag,
        "x1": pool(vis, job.pooling).tolist(),
        "x2": pool(text, job.pooling).tolist(),
        "gold": item.gold,
        "scores_mm": None, "scores_v": None, "scores_t": None,
        "pred": None, "pred_v": None, "pred_t": None,
    }

    contexts = {}
    if "multimodal" in job.probes:
        contexts["multimodal"] = np.vstack([vis, text])
    if "vision" in job.probes:
        rng = _probe_rng(job.seed, index, "vision")
        masked_text = noise_sequence(stats_text, text.shape[0], rng)
        contexts["vision"] = np.vstack([vis, masked_text])
    if "text" in job.probes:
        rng = _probe_rng(job.seed, index, "text")
        masked_vis = noise_sequence(stats_vision, vis.shape[0], rng)
        contexts["text"] = np.vstack([masked_vis, text])

    keys = {"multimodal": ("scores_mm", "pred"),
            "vision": ("scores_v", "pred_v"),
            "text": ("scores_t", "pred_t")}
    for probe, context in contexts.items():
        score_key, pred_key = keys[probe]
        scores = score_candidates(model, context, candidates, tap=tap)
        record[score_key] = scores.tolist()
        record[pred_key] = first_token_prediction(model, context, k)
    for probe in set(PROBES) - set(job.probes):
        # A skipped probe still needs a valid score vector: uniform,
        # regularization-neutral mass.
        record[keys[probe][0]] = [1.0 / k] * k
    return record


def _manifest(job: ExportJob, records: list[dict]) -> dict:
    first = records[0]
    return {
        "schema_version": SCHEMA_VERSION,
        "dataset": job.dataset_name,
        "k": len(first["scores_mm"]),
        "x1_dim": len(first["x1"]),
        "x2_dim": len(first["x2"]),
        "pooling": job.pooling,
        "model": job.model_id,
        "exporter": EXPORTER_VERSION,
        "n_records": len(records),
        "family": None,
        "regime": None,
        "feature_sidecar": None,
    }


def _write_wire(records: list[dict], errors: list[dict], path: Path, job: ExportJob) -> None:
    if not records:
        raise ExportError("no records survived the export")
    ks = {len(r["scores_mm"]) for r in records}
    if len(ks) != 1:
        raise ExportError(f"dataset mixes option counts {sorted(ks)}; "
                          "export one candidate-set size per file")
    lines = [json.dumps(rec, sort_keys=True, allow_nan=False) for rec in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest_path = path.with_name(path.stem + ".manifest.json")
    manifest_path.write_text(json.dumps(_manifest(job, records), sort_keys=True) + "\n",
                             encoding="utf-8")
    if errors:
        errors_path = path.with_name(path.stem + ".errors.json")
        errors_path.write_text(json.dumps(errors, sort_keys=True) + "\n", encoding="utf-8")


def export_records(job: ExportJob) -> tuple[Path, list[dict]]:
    """Run all probes over the dataset; returns (records path, errors)."""
    model = TinyLvlm.load(job.model_path)
    items = load_dataset(job.dataset_dir)
    stats_vision = ModalityStats.load(job.stats_vision_path) if job.stats_vision_path else None
    stats_text = ModalityStats.load(job.stats_text_path) if job.stats_text_path else None
    records, errors = [], []
    for index, item in enumerate(items):
        try:
            records.append(export_item(model, job, item, index, stats_vision, stats_text))
        except Exception as exc:  # recorded, never silently dropped
            errors.append({"id": item.id, "error": f"{type(exc).__name__}: {exc}"})
    path = Path(job.out_path)
    _write_wire(records, errors, path, job)
    return path, errors


def export_layerwise(job: ExportJob) -> list[Path]:
    """One tagged wire file per tap; scores come from the lens projection."""
    model = TinyLvlm.load(job.model_path)
    if not job.layer_taps:
        raise ExportError("layerwise export needs layer_taps")
    bad = [t for t in job.layer_taps if not 0 <= t < model.n_layers]
    if bad:
        raise ExportError(f"taps {bad} outside model depth {model.n_layers}")
    items = load_dataset(job.dataset_dir)
    stats_vision = ModalityStats.load(job.stats_vision_path) if job.stats_vision_path else None
    stats_text = ModalityStats.load(job.stats_text_path) if job.stats_text_path else None
    base = Path(job.out_path)
    paths = []
    for tap in job.layer_taps:
        records, errors = [], []
        for index, item in enumerate(items):
            try:
                records.append(export_item(model, job, item, index,
                                           stats_vision, stats_text, tap=tap))
            except Exception as exc:
                errors.append({"id": item.id, "layer": tap,
                               "error": f"{type(exc).__name__}: {exc}"})
        path = base.with_name(f"{base.stem}.layer{tap}{base.suffix}")
        _write_wire(records, errors, path, job)
        # A lens that collapses to the same distribution everywhere carries
        # no layer signal; flag it alongside the export.
        stacked = np.array([r["scores_mm"] for r in records])
        if np.ptp(stacked, axis=0).max() < 1e-12:
            warn_path = path.with_name(path.stem + ".warnings.json")
            warn_path.write_text(json.dumps(
                [{"layer": tap, "warning": "degenerate lens outputs"}]) + "\n",
                encoding="utf-8")
        paths.append(path)
    return paths


def stats_pass(model_path: str, dataset_dir: str, modality: str,
               template: str = DEFAULT_TEMPLATE) -> ModalityStats:
    """First pass over the dataset: collect one modality's token
    embeddings and freeze their per-dimension statistics."""
    if modality not in ("vision", "text"):
        raise ExportError(f"modality must be 'vision' or 'text', got {modality!r}")
    model = TinyLvlm.load(model_path)
    rows = []
    for item in load_dataset(dataset_dir):
        if modality == "vision":
            rows.append(model.image_embeddings(item.image))
        else:
            rows.append(model.text_embeddings(render_prompt(template, item)))
    return compute_stats(np.vstack(rows), modality)
