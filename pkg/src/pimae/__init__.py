"""Cross-modal masked-autoencoder pre-training for paired point clouds
and RGB images, on a single CPU with no framework dependencies.

The pieces compose bottom-up: ``synth`` generates aligned scenes,
``tokenizer`` clusters points and patchifies images under a shared mask,
``model`` runs the two-branch encoder/decoder, ``losses`` scores the three
reconstruction targets, and ``train`` owns the optimizer loop and
checkpoints.  ``cli`` wraps the whole thing in subcommands.
"""

from .errors import (ConfigError, DataError, NonFinite, NumericError,
                     PimaeError)
from .geometry import (CameraModel, PatchGrid, farthest_point_sampling,
                       knn_group, patch_indices, project_points)
from .losses import LossReport, chamfer_l2, total_loss
from .model import (ModelConfig, attention_maps, forward_pass, init_weights,
                    param_shapes)
from .sceneio import load_scene, load_scene_dirs, write_scene_dir
from .synth import PROFILES, Scene, SceneProfile, generate_scene
from .tokenizer import STRATEGIES, MaskAlignment, tokenize_scene, unpatchify
from .train import (Checkpoint, TrainConfig, load_checkpoint, lr_at,
                    model_for_profile, pipeline_grad_error, run_training,
                    save_checkpoint)

__all__ = [
    "CameraModel", "Checkpoint", "ConfigError", "DataError", "LossReport",
    "MaskAlignment", "ModelConfig", "NonFinite", "NumericError", "PROFILES",
    "PatchGrid", "PimaeError", "STRATEGIES", "Scene", "SceneProfile",
    "TrainConfig", "attention_maps", "chamfer_l2", "farthest_point_sampling",
    "forward_pass", "generate_scene", "init_weights", "knn_group",
    "load_checkpoint", "load_scene", "load_scene_dirs", "lr_at",
    "model_for_profile", "param_shapes", "patch_indices",
    "pipeline_grad_error", "project_points", "run_training",
    "save_checkpoint", "tokenize_scene", "total_loss", "unpatchify",
    "write_scene_dir",
]
