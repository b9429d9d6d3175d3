"""Shared fixtures: a coarse test arm that keeps per-test solves fast.

The coarse configuration (6 sectors, 4 soft layers per segment) meshes to a
few hundred nodes; full-resolution runs live in test_acceptance.py only.
"""

import numpy as np
import pytest

from softarm.armgen import ArmParams, generate_arm
from softarm.scene import Scene, SceneConfig

COARSE_PARAMS = ArmParams(sectors=6, soft_layers=4, rigid_layers=1)


@pytest.fixture(scope="session")
def coarse_arm():
    return generate_arm(COARSE_PARAMS)


@pytest.fixture(scope="session")
def coarse_config():
    return SceneConfig(arm=COARSE_PARAMS)


@pytest.fixture
def coarse_scene(coarse_arm, coarse_config):
    return Scene(coarse_config, arm=coarse_arm)


@pytest.fixture
def make_coarse_scene(coarse_arm, coarse_config):
    """Factory for scenes sharing the coarse geometry but custom configs."""

    def build(**overrides):
        cfg = coarse_config.replace(**overrides) if overrides else coarse_config
        return Scene(cfg, arm=coarse_arm)

    return build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
