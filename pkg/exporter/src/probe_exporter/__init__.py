"""probe_exporter: run LVLM probe passes and write analysis-ready records."""

__version__ = "0.1.0"

from .export import (
    DEFAULT_TEMPLATE,
    INSTRUCTION,
    ExportError,
    ExportJob,
    export_layerwise,
    export_records,
    stats_pass,
)
from .model import ModelConfig, TinyLvlm
from .noise import ModalityStats, compute_stats, noise_sequence
from .dataset import VqaItem, load_dataset, make_demo_dataset
