import numpy as np
import pytest

from pyramid_pose.data.mesh import default_objects
from pyramid_pose.geometry import Intrinsics


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def meshes():
    return default_objects()


@pytest.fixture(scope="session")
def mesh_map(meshes):
    return {m.class_id: m for m in meshes}


@pytest.fixture
def K():
    return Intrinsics(500.0, 500.0, 320.0, 240.0)


@pytest.fixture(scope="session")
def scenes(meshes):
    from pyramid_pose.data.synth import synth_generate

    return synth_generate(meshes, 4, seed=7)


def tiny_config(tmp_path, num_scenes=4, epochs=1):
    """A W=8 network on a handful of generated scenes: seconds per epoch."""
    from pyramid_pose.backbone import BackboneConfig, PFPNConfig
    from pyramid_pose.config import RunConfig
    from pyramid_pose.heads import HeadConfig, ModelConfig

    cfg = RunConfig()
    cfg.model = ModelConfig(backbone=BackboneConfig(widths=(4, 8, 8), convs_per_stage=1, stem_widths=(4, 4, 4)),
                            pyramid=PFPNConfig(width=8), heads=HeadConfig(8, 8, 8, num_classes=2))
    cfg.data.num_scenes = num_scenes
    cfg.optim.epochs = epochs
    cfg.optim.batch_size = 2
    cfg.optim.lr = 1e-3
    cfg.checkpoint = str(tmp_path / "model.ckpt")
    cfg.out_dir = str(tmp_path / "out")
    return cfg


@pytest.fixture
def tiny(tmp_path):
    return tiny_config(tmp_path)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list = []


def record_acceptance(label: str, passed: bool, detail: str) -> None:
    line = f"{label}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
