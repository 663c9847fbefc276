"""Dynamic surface reconstruction from monocular RGB-D sequences with a score-distillation prior."""

from .dataio import Dataset, SyntheticScene, SyntheticSceneSpec, load_dataset, preprocess, synth_generate
from .evaluation import TriangleMesh, accuracy_completion, deformation_error, extract_mesh
from .fields import ModelConfig, SceneModel
from .training import TrainConfig, Trainer, model_from_checkpoint, run_training

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "ModelConfig",
    "SceneModel",
    "SyntheticScene",
    "SyntheticSceneSpec",
    "TrainConfig",
    "Trainer",
    "TriangleMesh",
    "accuracy_completion",
    "deformation_error",
    "extract_mesh",
    "load_dataset",
    "model_from_checkpoint",
    "preprocess",
    "run_training",
    "synth_generate",
]
