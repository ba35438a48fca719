import itertools

import numpy as np
import pytest

from ebstrack.catalog import (StarCatalog, gen_synthetic_catalog, load_catalog,
                              nearest_projected_star, save_catalog, stars_in_fov)
from ebstrack.errors import EmptyCatalog, PackingFailure, ParseError
from ebstrack.geometry import (CameraIntrinsics, CelestialAttitude, celestial_to_quat,
                               project_directions, radec_to_unit)

from conftest import random_quats


def test_radec_to_unit():
    assert np.allclose(radec_to_unit(0, 0), [1, 0, 0])
    assert np.allclose(radec_to_unit(90, 0), [0, 1, 0], atol=1e-16)
    for ra in (0, 45, 123.4, 359):
        assert np.allclose(radec_to_unit(ra, 90), [0, 0, 1], atol=1e-16)


def write(tmp_path, text):
    p = tmp_path / "cat.csv"
    p.write_text(text)
    return p


def test_load_catalog(tmp_path):
    cat = load_catalog(write(tmp_path, "id,ra_deg,dec_deg,mag\n1,0,0,1\n2,10,5,3\n3,20,-5,6.5\n"))
    assert len(cat) == 3 and cat.n_dropped == 0
    cat = load_catalog(write(tmp_path, "# comment\nid,ra_deg,dec_deg,mag\n1,0,0,1\n2,1,1,8.5\n"), 7)
    assert len(cat) == 1 and cat.n_dropped == 1


def test_load_catalog_errors(tmp_path):
    rows = "id,ra_deg,dec_deg,mag\n" + "".join(f"{i},{i},0,1\n" for i in range(1, 6))
    p = write(tmp_path, rows + "6,6,abc,1\n")  # line 7
    with pytest.raises(ParseError) as exc:
        load_catalog(p)
    assert exc.value.line == 7
    with pytest.raises(EmptyCatalog):
        load_catalog(write(tmp_path, "id,ra_deg,dec_deg,mag\n1,0,0,9\n"))


def test_catalog_round_trip(tmp_path, rng):
    cat = gen_synthetic_catalog(3, 200, (0, 7))
    save_catalog(cat, tmp_path / "c.csv")
    back = load_catalog(tmp_path / "c.csv")
    assert np.array_equal(back.ids, cat.ids)
    assert np.max(np.abs(back.directions - cat.directions)) < 1e-9
    assert np.max(np.abs(back.mags - cat.mags)) < 1e-6


def brute_fov(q, intr, cat, margin):
    out = set()
    xy, Z = project_directions(q, cat.directions, intr.focal_length_px)
    for i in range(len(cat)):
        if Z[i] <= 1e-9:
            continue
        u, v = xy[i, 0] + intr.cx, xy[i, 1] + intr.cy
        if -0.5 - margin <= u < intr.width - 0.5 + margin and -0.5 - margin <= v < intr.height - 0.5 + margin:
            out.add(int(cat.ids[i]))
    return out


def test_stars_in_fov(rng, sky, intr):
    empty = StarCatalog(np.zeros(0), np.zeros((0, 3)), np.zeros(0))
    assert stars_in_fov([1, 0, 0, 0], intr, empty) == []
    one = StarCatalog([5], [[0, 0, 1]], [2.0])
    res = stars_in_fov([1, 0, 0, 0], intr, one)
    assert len(res) == 1 and res[0][0].id == 5 and np.allclose(res[0][1], 0)
    dense = gen_synthetic_catalog(11, 50000, (0, 7))
    for q in random_quats(rng, 100):
        got = {s.id for s, _ in stars_in_fov(q, intr, dense, 10.0)}
        assert got == brute_fov(q, intr, dense, 10.0)


def test_nearest_projected_star(rng):
    cat = StarCatalog([1, 2, 3], np.eye(3), [1, 2, 3])
    s1, s2, s3 = cat.stars
    assert nearest_projected_star([0, 0], [], 3) is None
    assert nearest_projected_star([0, 0], [(s1, np.array([1.0, 0]))], 3)[0].id == 1
    pr = [(s2, np.array([2.5, 0])), (s1, np.array([0, 2.0]))]
    assert nearest_projected_star([0, 0], pr, 3)[0].id == 1
    # tie goes to the lower id
    pr = [(s3, np.array([1.0, 0])), (s2, np.array([0, -1.0]))]
    assert nearest_projected_star([0, 0], pr, 3)[0].id == 2
    assert nearest_projected_star([0, 0], pr, 0.5) is None
    for _ in range(200):
        pts = rng.uniform(-5, 5, (3, 2))
        p = rng.uniform(-5, 5, 2)
        proj = list(zip(cat.stars, pts))
        d = np.hypot(*(pts - p).T)
        k = int(np.argmin(d))
        got = nearest_projected_star(p, proj, 3.0)
        assert (got is None) == (d[k] > 3.0)
        if got is not None:
            assert got[0].id == k + 1


def test_gen_synthetic_catalog():
    a = gen_synthetic_catalog(1, 10, (0, 7))
    b = gen_synthetic_catalog(1, 10, (0, 7))
    assert np.array_equal(a.directions, b.directions) and np.array_equal(a.mags, b.mags)
    assert len(a) == 10
    c = gen_synthetic_catalog(2, 300, (1, 6), 5.0)
    assert len(c) == 300 and c.mags.min() >= 1 and c.mags.max() <= 6
    cosmin = np.cos(np.radians(5.0))
    for i, j in itertools.combinations(range(len(c)), 2):
        assert c.directions[i] @ c.directions[j] <= cosmin
    with pytest.raises(PackingFailure):
        gen_synthetic_catalog(1, 50, (0, 7), 60.0)
