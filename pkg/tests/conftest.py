import numpy as np
import pytest

from ebstrack.catalog import gen_synthetic_catalog
from ebstrack.geometry import CameraIntrinsics


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def intr():
    return CameraIntrinsics()


@pytest.fixture(scope="session")
def sky():
    # about 5-10 stars in the default field of view, 0.5 deg apart
    return gen_synthetic_catalog(7, 5000, (0.0, 7.0), 0.5)


def random_quats(rng, n):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q


def place_stars(q, points, f):
    """Celestial directions that project to relative pixel ``points`` at attitude q."""
    from ebstrack.geometry import quat_rotate

    qi = np.array([q[0], -q[1], -q[2], -q[3]])
    out = []
    for x, y in points:
        c = np.array([x, y, f])
        out.append(quat_rotate(qi, c / np.linalg.norm(c)))
    return np.array(out)
