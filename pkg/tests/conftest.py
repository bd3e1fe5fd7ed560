"""Shared fixtures: a small procedural dataset and models trained on it.

The dataset/model fixtures are session-scoped because generating scenes and
running even short training loops dominates test time; individual tests must
treat them as read-only.
"""

import numpy as np
import pytest

from voxelweave.model import ModelConfig, ReconModel
from voxelweave.scenes import DatasetConfig, SceneConfig, load_dataset, make_dataset
from voxelweave.train import TrainConfig, train

TINY = dict(grid=16, image=32)

_CRITERIA: list[tuple[int, bool, str]] = []


@pytest.fixture()
def criterion():
    """Record one acceptance-criterion verdict; echoed in the final summary."""

    def _record(num: int, passed: bool, detail: str) -> None:
        _CRITERIA.append((num, passed, detail))
        print(f"[criterion {num:2d}] {'PASS' if passed else 'FAIL'}  {detail}")
        assert passed, f"criterion {num}: {detail}"

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, passed, detail in sorted(_CRITERIA):
        word = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[criterion {num:2d}] {word}  {detail}")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six single-object scenes at 16^3 / 32px: cheap but fully realistic."""
    root = tmp_path_factory.mktemp("tinydata")
    config = DatasetConfig(
        num_scenes=6,
        objects_per_scene=1,
        families=("box", "sphere", "cylinder"),
        grid_shape=(TINY["grid"],) * 3,
        scene=SceneConfig(image_size=TINY["image"], focal=float(TINY["image"])),
    )
    make_dataset(root, config, seed=3)
    manifest, loaded, records = load_dataset(root)
    return manifest, loaded, records


@pytest.fixture(scope="session")
def pair_dataset(tmp_path_factory):
    """Four two-object scenes, used by occlusion/identity tests."""
    root = tmp_path_factory.mktemp("pairdata")
    config = DatasetConfig(
        num_scenes=4,
        objects_per_scene=2,
        families=("box", "sphere", "cylinder"),
        grid_shape=(TINY["grid"],) * 3,
        scene=SceneConfig(image_size=TINY["image"], focal=float(TINY["image"])),
    )
    make_dataset(root, config, seed=11)
    return load_dataset(root)


@pytest.fixture(scope="session")
def tiny_model_config(tiny_dataset):
    _, dconf, _ = tiny_dataset
    return ModelConfig.for_data(dconf.num_classes,
                                image_size=dconf.scene.image_size,
                                grid_shape=dconf.grid_shape)


@pytest.fixture(scope="session")
def fresh_model(tiny_model_config):
    return ReconModel.create(tiny_model_config, seed=0)


@pytest.fixture(scope="session")
def overfit_run(tiny_dataset, tiny_model_config):
    """One scene memorized at a fixed offset; produces confident volumes.

    Returns (model, record, base_spec, history).
    """
    manifest, dconf, records = tiny_dataset
    record = records[manifest["train"][0]]
    base = dconf.base_grid()
    model = ReconModel.create(tiny_model_config, seed=1)
    config = TrainConfig(steps=200, lr=1.5e-3, loss="iou-xent", seed=1,
                         random_offsets=False)
    result = train(model, [record], base, config)
    return result.model, record, base, result.history


@pytest.fixture()
def rng():
    return np.random.default_rng(20260817)
