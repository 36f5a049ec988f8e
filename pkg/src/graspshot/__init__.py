"""Grasp-position detection on synthetic planar scenes, guided-gradient
feature refinement per detection, and few-shot shape classification
with automatic layer selection."""

from .detector import (Detection, DetectorConfig, DetectorNetwork,
                       TrainConfig, detect, load_checkpoint,
                       save_checkpoint, train_detector)
from .errors import (ConfigurationError, CorruptFileError,
                     DegenerateDataError, DivergenceError, GraspShotError,
                     InsufficientRankError, PlacementError, StaleTraceError)
from .experiments import (ExperimentConfig, ExperimentReport, SweepResult,
                          default_config, human_table, machine_records,
                          run_ablation, run_experiment, run_sweep)
from .fewshot import (LayerClassifier, LayerSelection, classify,
                      fit_all_layers, load_bundle, pca_fit, pca_transform,
                      save_bundle, svm_train)
from .refine import (RefinedFeatureSet, blob_centroid, extract_all,
                     guided_maps, load_cache, save_cache)
from .scenes import (GraspLabel, LabeledScene, ObjectPose, SceneConfig,
                     SHAPE_KINDS, TRAINED_KINDS, generate_scene,
                     load_dataset, render_scene, sample_dataset,
                     save_dataset)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "CorruptFileError", "DegenerateDataError",
    "Detection", "DetectorConfig", "DetectorNetwork", "DivergenceError",
    "ExperimentConfig", "ExperimentReport", "GraspLabel", "GraspShotError",
    "InsufficientRankError", "LabeledScene", "LayerClassifier",
    "LayerSelection", "ObjectPose", "PlacementError", "RefinedFeatureSet",
    "SHAPE_KINDS", "SceneConfig", "StaleTraceError", "SweepResult",
    "TRAINED_KINDS", "TrainConfig", "blob_centroid", "classify",
    "default_config", "detect", "extract_all", "fit_all_layers",
    "generate_scene", "guided_maps", "human_table", "load_bundle",
    "load_cache", "load_checkpoint", "load_dataset", "machine_records",
    "pca_fit", "pca_transform", "render_scene", "run_ablation",
    "run_experiment", "run_sweep", "sample_dataset", "save_bundle",
    "save_cache", "save_checkpoint", "save_dataset", "svm_train",
    "train_detector",
]
