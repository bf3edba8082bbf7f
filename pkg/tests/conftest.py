import numpy as np
import pytest

from simgap import world
from simgap.world import NpcSpec, Pose2, Scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_npc(x1, x2, yaw=0.0, length=4.0, width=2.0, asset_id=0, color=(0.5, 0.5, 0.5)):
    return NpcSpec(pose=Pose2(x1, x2, yaw), length=length, width=width,
                   asset_id=asset_id, color=color)


def random_scene(rng, n_npc, extent=20.0, yaw_random=True):
    scene = Scene()
    assets = world.asset_table()
    attempts = 0
    while len(scene.npcs) < n_npc and attempts < 20 * n_npc:
        attempts += 1
        a = assets[int(rng.integers(len(assets)))]
        npc = NpcSpec(
            pose=Pose2(float(rng.uniform(-extent, extent)),
                       float(rng.uniform(-extent, extent)),
                       float(rng.uniform(0, 2 * np.pi)) if yaw_random else 0.0),
            length=a.length, width=a.width, asset_id=0, color=a.color)
        world.try_place(scene, npc, extent)
    return scene
