from __future__ import annotations

import numpy as np
import pytest

from dynavessel import _parallel
from dynavessel.volume import LabelVolume, ScalarVolume, VolumeGeometry


@pytest.fixture(autouse=True)
def _reset_threads():
    yield
    _parallel.set_threads(None)


def make_volume(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> ScalarVolume:
    data = np.asarray(data, dtype=np.float32)
    return ScalarVolume(VolumeGeometry(data.shape, spacing, origin), data)


def make_labels(data, names=None, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    data = np.asarray(data, dtype=np.uint8)
    return LabelVolume(VolumeGeometry(data.shape, spacing), data, names or {})


def sphere(shape, center, radius) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    return sum((g - c) ** 2 for g, c in zip(grids, center)) <= radius ** 2
