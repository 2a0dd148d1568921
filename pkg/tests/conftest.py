import numpy as np
import pytest

from kfplab.presets import UNIT_BOX, preset


@pytest.fixture
def unit_box():
    return UNIT_BOX


@pytest.fixture
def half_laplacian():
    return preset("unit_box")


def random_smooth(rng, scale=1.0):
    """A random trigonometric polynomial in (x, v), usable as boundary data."""
    a = rng.normal(size=(3, 3)) * scale
    px, pv = rng.uniform(0, 2 * np.pi, size=2)

    def g(x, v):
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        out = np.zeros(np.broadcast_shapes(x.shape, v.shape))
        for k in range(3):
            for m in range(3):
                out = out + a[k, m] * np.cos(k * 2.0 * x + px) * np.cos(m * 1.5 * v + pv)
        return out

    return g
