import numpy as np
import pytest

from tsdet.augment import AugmentConfig


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    try:
        import test_acceptance
    except ImportError:
        return
    lines = test_acceptance.pytest_terminal_summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
from tsdet.detector import DetectorConfig
from tsdet.engine import TrainConfig
from tsdet.synth import SceneConfig, make_splits


def tiny_detector_config() -> DetectorConfig:
    return DetectorConfig(image_size=48, num_classes=7, channels=(6, 8, 8),
                          roi_hidden=16, anchor_size=16.0,
                          k_proposals=12, max_proposals=16)


def tiny_scene_config() -> SceneConfig:
    return SceneConfig(image_size=48, min_size=10.0, max_size=24.0)


def tiny_train_config(**kw) -> TrainConfig:
    cfg = TrainConfig(batch_labeled=2, batch_unlabeled=2,
                      burn_in_iters=5, mutual_iters=5,
                      eval_cadence=5, checkpoint_cadence=5,
                      detector=tiny_detector_config())
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="session")
def tiny_split():
    return make_splits(120, 0.10, seed=3, config=tiny_scene_config())


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
