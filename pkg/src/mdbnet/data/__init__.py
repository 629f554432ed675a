"""Samples, synthetic scenes, file formats and dataset splits."""
from .io import SamplePaths, load_dataset, load_sample, read_manifest, read_vxg, save_sample, write_manifest, write_vxg
from .sample import Prepared, Sample, downsample_labels, pool_visibility, prepare
from .splits import StopDecision, TrainState, early_stop, kfold_split
from .synthetic import SyntheticSceneSpec, easy_tier, generate_scene, skewed_tier

__all__ = [
    "Prepared", "Sample", "SamplePaths", "StopDecision", "SyntheticSceneSpec", "TrainState",
    "downsample_labels", "early_stop", "easy_tier", "generate_scene", "kfold_split", "load_dataset",
    "load_sample", "pool_visibility", "prepare", "read_manifest", "read_vxg", "save_sample", "skewed_tier",
    "write_manifest", "write_vxg",
]
