"""Hierarchical level-based context coding for anchor-based Gaussian splatting scenes.

Typical use::

    scene = load_scene("scene.ply")
    part = partition(scene, PartitionConfig(levels=3, tau=0.2))
    model, report = train(scene, part, TrainConfig(iterations=2000))
    stream = encode_scene(scene, part, model)
    decoded, _ = decode_scene(stream.data)
"""

__version__ = "0.1.0"

from .codec import decode_scene, encode_scene, storage_report
from .entropy import EntropyModel, ModelConfig
from .modelio import load_model, save_model
from .partition import LevelPartition, PartitionConfig, partition
from .scene import AnchorScene, load_scene, save_scene, similarity_report
from .synth import SynthConfig, synthesize
from .trainer import TrainConfig, ablation_run, train

__all__ = [
    "AnchorScene", "EntropyModel", "LevelPartition", "ModelConfig", "PartitionConfig",
    "SynthConfig", "TrainConfig", "ablation_run", "decode_scene", "encode_scene", "load_model",
    "load_scene", "partition", "save_model", "save_scene", "similarity_report", "storage_report",
    "synthesize", "train",
]
