"""Leaf KD-tree spatial patching with depth/breadth attention for large-scale traffic forecasting."""
from .attention import EncoderConfig, breadth_attention, depth_attention, encode
from .data import RawDataset, chronological_split, load_dataset, metrics, save_dataset, synth_generate, windows
from .decoder import decode, l1_loss
from .embedding import EmbeddingConfig, embed, embed_window
from .estimators import LeafKDTreePatcher, PatchForecaster
from .model import ModelConfig, PatchForecastModel
from .spatial_index import (
    LeafKdTree,
    PatchLayout,
    apply_layout,
    assemble_patches,
    build_leaf_kdtree,
    export_partition,
    invert_layout,
    leaf_order,
    pad_assignments,
)
from .training import TrainConfig, evaluate, lr_schedule, train

__version__ = "0.1.0"
