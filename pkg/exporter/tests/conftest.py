import pytest

from probe_exporter import TinyLvlm, make_demo_dataset, stats_pass


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """A checkpoint, a 10-item dataset, and frozen modality stats."""
    root = tmp_path_factory.mktemp("exporter")
    model_path = root / "model.npz"
    TinyLvlm.init(seed=7).save(model_path)
    dataset_dir = root / "dataset"
    make_demo_dataset(dataset_dir, n_items=10, seed=3)
    stats_v = stats_pass(model_path, dataset_dir, "vision")
    stats_t = stats_pass(model_path, dataset_dir, "text")
    stats_v.save(root / "vision.stats.json")
    stats_t.save(root / "text.stats.json")
    return {"root": root, "model": model_path, "dataset": dataset_dir,
            "stats_vision": root / "vision.stats.json",
            "stats_text": root / "text.stats.json"}
