import functools
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from meshcnn.hierarchy import icosphere
from meshcnn.mesh import build_mesh


@functools.lru_cache(maxsize=None)
def cached_icosphere(depth):
    return icosphere(depth)


@pytest.fixture(scope="session")
def ico():
    return cached_icosphere


def hex_patch(rotation_deg=0.0, z=0.0):
    """Center vertex 0 plus six neighbors at 0, 60, ..., 300 degrees, CCW seen from +z."""
    ang = np.deg2rad(np.arange(6) * 60.0 + rotation_deg)
    verts = np.vstack([[0.0, 0.0, z], np.stack([np.cos(ang), np.sin(ang), np.full(6, z)], axis=1)])
    tris = [(0, 1 + k, 1 + (k + 1) % 6) for k in range(6)]
    return build_mesh(verts, tris)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
