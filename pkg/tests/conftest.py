import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    """A backbone small enough for many training steps in a test."""
    from effowt.backbone import BackboneConfig
    from effowt.experiment.config import DataConfig, ExperimentConfig, OptimizerConfig
    from effowt.side import SideConfig

    return ExperimentConfig(
        backbone=BackboneConfig(image_size=32, patch=8, dim=64, depth=6, heads=4),
        side=SideConfig(gn_groups=4),
        data=DataConfig(image_size=32, n_videos=2, n_eval_videos=1, frames_per_video=4,
                        objects_per_video=2, min_size=8, max_size=12),
        optimizer=OptimizerConfig(steps=20, batch=2),
        seed=7,
    )


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg, tmp_path_factory):
    from effowt.experiment import gen_data

    root = tmp_path_factory.mktemp("tiny_data")
    gen_data(tiny_cfg, root)
    return root


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: (int(k.split("-")[0]), k)):
        terminalreporter.write_line(results[key])
