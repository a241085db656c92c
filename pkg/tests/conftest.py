import numpy as np
import pytest
import torch

from voxelkp.backbone import default_scene_spec, synth_generate
from voxelkp.geometry import make_orbit_rig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_rig():
    return make_orbit_rig(4, elevation_deg=20.0, radius=2.5, image_size=(64, 64))


@pytest.fixture(scope="session")
def scene_spec():
    return default_scene_spec(6, appearance_seed=3)


@pytest.fixture(scope="session")
def sample(scene_spec, small_rig):
    return synth_generate(scene_spec, small_rig, seed=11)


@pytest.fixture(scope="session")
def tiny_dataset(scene_spec, small_rig):
    return [synth_generate(scene_spec, small_rig, seed=100 + i) for i in range(8)]


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
