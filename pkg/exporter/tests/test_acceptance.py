"""Exporter acceptance: a 10-sample export from a small checkpoint passes
the analysis toolkit's validator, the final-layer lens scores match the
standard scores within 1e-5, and generated noise matches the frozen
statistics within three standard errors."""
import json
import subprocess
import sys

import numpy as np

from probe_exporter import ExportJob, ModalityStats, export_layerwise, export_records, noise_sequence


def test_export_round_trip_acceptance(workspace, tmp_path):
    job = ExportJob(model_path=str(workspace["model"]),
                    dataset_dir=str(workspace["dataset"]),
                    out_path=str(tmp_path / "export.jsonl"),
                    stats_vision_path=str(workspace["stats_vision"]),
                    stats_text_path=str(workspace["stats_text"]),
                    seed=11)
    path, errors = export_records(job)
    assert errors == []
    assert len(path.read_text().splitlines()) == 10

    # The emitted file passes the primary toolkit's wire-format linter.
    proc = subprocess.run([sys.executable, "-m", "pidkit.cli", "validate",
                           "--in", str(path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    print("ACCEPTANCE PASS: exporter output validates (exit 0)")

    # Final-block lens scores reduce to the standard read-out path.
    lens_job = ExportJob(model_path=str(workspace["model"]),
                         dataset_dir=str(workspace["dataset"]),
                         out_path=str(tmp_path / "lens.jsonl"),
                         stats_vision_path=str(workspace["stats_vision"]),
                         stats_text_path=str(workspace["stats_text"]),
                         seed=11, layer_taps=(1,))
    (lens_path,) = export_layerwise(lens_job)
    std = [json.loads(l) for l in path.read_text().splitlines()]
    lens = [json.loads(l) for l in lens_path.read_text().splitlines()]
    worst = max(np.abs(np.array(a["scores_mm"]) - np.array(b["scores_mm"])).max()
                for a, b in zip(std, lens))
    assert worst <= 1e-5
    print(f"ACCEPTANCE PASS: final-layer lens matches standard scores (max {worst:.1e})")

    # Noise calibration: 10k draws against the frozen statistics.
    for stats_path in (workspace["stats_vision"], workspace["stats_text"]):
        stats = ModalityStats.load(stats_path)
        draws = noise_sequence(stats, 10_000, np.random.default_rng(99))
        se_mean = stats.sigma / np.sqrt(10_000)
        se_sigma = stats.sigma / np.sqrt(2 * 10_000)
        mean_err = np.abs(draws.mean(axis=0) - stats.mu)
        sigma_err = np.abs(draws.std(axis=0, ddof=1) - stats.sigma)
        assert np.all(mean_err <= 3 * se_mean), stats.modality
        assert np.all(sigma_err <= 3 * se_sigma), stats.modality
    print("ACCEPTANCE PASS: noise calibration within 3 standard errors")
