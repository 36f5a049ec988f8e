"""Shared fixtures.

The acceptance suite exercises a detector trained at full working size
(500 scenes, 64px images). Training takes a few minutes, so it happens
once per session here and every test that needs a real detector shares
the result. The wall-clock cost is recorded so the end-to-end budget
checks can charge it to themselves.
"""

import time
from dataclasses import dataclass

import pytest

from graspshot.detector import (DetectorConfig, TrainConfig, save_checkpoint,
                                train_detector)
from graspshot.scenes import SceneConfig, TRAINED_KINDS, sample_dataset


@dataclass
class TrainedDetector:
    network: object
    checkpoint: str
    train_seconds: float
    num_scenes: int


@pytest.fixture(scope="session")
def trained_detector(tmp_path_factory):
    scenes = sample_dataset(SceneConfig(
        num_scenes=500, objects_per_scene=1, allowed_kinds=TRAINED_KINDS,
        scale_range=(5.0, 12.0), image_size=64, seed=11))
    start = time.monotonic()
    network, _ = train_detector(scenes, DetectorConfig(),
                                TrainConfig(seed=11))
    train_seconds = time.monotonic() - start
    path = tmp_path_factory.mktemp("detector") / "detector.gsct"
    save_checkpoint(network, path)
    return TrainedDetector(network=network, checkpoint=str(path),
                           train_seconds=train_seconds,
                           num_scenes=len(scenes))
